"""Synthetic shape corpora on disk: generation, manifest parsing and batching."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DatasetError, ParameterError, ParseError
from .geometry import SHAPE_KINDS, PointCloud, ensure_dir, load_cloud, save_cloud, synth_generate

MANIFEST = "manifest.csv"
MANIFEST_HEADER = ("path", "label", "split")
SPLITS = ("train", "test")


def stratified_split(per_class: int, rng: np.random.Generator, test_fraction: float = 0.2) -> np.ndarray:
    """Boolean test mask for one class: ``floor(test_fraction * n)`` random members.

    With a single instance the floor is 0, so it always lands in train.
    """
    n_test = int(np.floor(test_fraction * per_class))
    mask = np.zeros(per_class, dtype=bool)
    mask[rng.permutation(per_class)[:n_test]] = True
    return mask


def generate_dataset(out_dir, classes: int = 8, per_class: int = 100, n_points: int = 256,
                     noise: float = 0.02, seed: int = 0, rotation: str = "z") -> str:
    """Write ``classes * per_class`` clouds plus ``manifest.csv``; returns the manifest path.

    Class ``c`` is primitive ``SHAPE_KINDS[c]``. Output depends only on the
    arguments, so the same seed gives byte-identical files.
    """
    if not 1 <= classes <= len(SHAPE_KINDS):
        raise ParameterError(f"classes must lie in [1, {len(SHAPE_KINDS)}], got {classes}")
    if per_class < 1:
        raise ParameterError(f"per_class must be positive, got {per_class}")
    try:
        ensure_dir(os.path.join(out_dir, "clouds"))
    except OSError as e:
        raise DatasetError(f"cannot create dataset directory {out_dir}: {e}") from e
    root = np.random.SeedSequence(seed)
    split_ss, *class_ss = root.spawn(classes + 1)
    split_rng = np.random.default_rng(split_ss)
    rows = []
    for label in range(classes):
        kind = SHAPE_KINDS[label]
        test_mask = stratified_split(per_class, split_rng)
        for i, ss in enumerate(class_ss[label].spawn(per_class)):
            cloud = synth_generate(kind, n_points, noise, np.random.default_rng(ss), rotation, label)
            rel = f"clouds/{kind}_{i:04d}.txt"
            path = os.path.join(out_dir, rel)
            try:
                save_cloud(cloud, path)
            except OSError as e:
                raise DatasetError(f"cannot write {path}: {e}") from e
            rows.append((rel, label, "test" if test_mask[i] else "train"))
    manifest = os.path.join(out_dir, MANIFEST)
    with open(manifest, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        w.writerows(rows)
    return manifest


@dataclass
class Split:
    points: np.ndarray  # B x N x D
    labels: np.ndarray  # B
    paths: list

    def __len__(self):
        return len(self.labels)


def read_manifest(root) -> list:
    """Rows ``(path, label, split)`` with validated fields."""
    manifest = os.path.join(root, MANIFEST)
    if not os.path.isfile(manifest):
        raise DatasetError(f"no {MANIFEST} in {root}")
    rows = []
    with open(manifest, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise DatasetError(f"{manifest}: header must be {','.join(MANIFEST_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != 3:
                raise DatasetError(f"{manifest}:{lineno}: expected 3 fields, got {len(row)}")
            path, label, split = (v.strip() for v in row)
            try:
                label = int(label)
            except ValueError:
                raise DatasetError(f"{manifest}:{lineno}: label {label!r} is not an integer") from None
            if label < 0:
                raise DatasetError(f"{manifest}:{lineno}: negative label {label}")
            if split not in SPLITS:
                raise DatasetError(f"{manifest}:{lineno}: split must be train or test, got {split!r}")
            rows.append((path, label, split))
    return rows


def load_split(root, split: str, use_normals: bool = False) -> Split:
    """Load every cloud of one split as a dense ``B x N x D`` array."""
    if split not in SPLITS:
        raise ParameterError(f"split must be one of {SPLITS}")
    feats, labels, paths = [], [], []
    for rel, label, s in read_manifest(root):
        if s != split:
            continue
        path = os.path.join(root, rel)
        try:
            cloud = load_cloud(path, label)
        except OSError as e:
            raise DatasetError(f"cannot read {path}: {e}") from e
        except ParseError as e:
            raise DatasetError(str(e)) from e
        if use_normals and cloud.normals is None:
            raise DatasetError(f"{path}: normals requested but the file has 3 columns")
        feats.append(cloud.features(use_normals))
        labels.append(label)
        paths.append(rel)
    if feats and len({f.shape for f in feats}) != 1:
        raise DatasetError(f"clouds in split {split!r} differ in point count; batches need equal N")
    d = 6 if use_normals else 3
    points = np.stack(feats) if feats else np.zeros((0, 0, d))
    return Split(points, np.asarray(labels, dtype=np.int64), paths)


def num_classes(root) -> int:
    rows = read_manifest(root)
    if not rows:
        raise DatasetError(f"manifest in {root} has no rows")
    return max(r[1] for r in rows) + 1


def iterate_batches(n: int, batch_size: int, rng: Optional[np.random.Generator] = None):
    """Index batches over ``range(n)``, shuffled when ``rng`` is given."""
    if batch_size < 1:
        raise ParameterError("batch_size must be positive")
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


def split_from_clouds(clouds, use_normals: bool = False) -> Split:
    """Wrap in-memory clouds (all with labels) as a :class:`Split`."""
    clouds = list(clouds)
    pts = np.stack([c.features(use_normals) for c in clouds])
    return Split(pts, np.array([c.label for c in clouds], dtype=np.int64), [""] * len(clouds))


def synth_split(classes: int, per_class: int, n_points: int, noise: float, seed: int,
                rotation: str = "z") -> list:
    """In-memory list of labelled clouds using the same seeding as :func:`generate_dataset`."""
    root = np.random.SeedSequence(seed)
    _, *class_ss = root.spawn(classes + 1)
    out = []
    for label in range(classes):
        for ss in class_ss[label].spawn(per_class):
            out.append(synth_generate(SHAPE_KINDS[label], n_points, noise,
                                      np.random.default_rng(ss), rotation, label))
    return out


def spike_sphere(n_points: int, seed, spike_fraction: float = 0.5, noise: float = 0.0):
    """Two-part segmentation toy: a unit sphere with a conical spike.

    Returns ``(points N x 3, parts N)`` with part 0 on the sphere and part 1
    on the spike. The spike direction is drawn uniformly per cloud.
    """
    if n_points < 4 or not 0 < spike_fraction < 1:
        raise ParameterError("spike_sphere needs n_points >= 4 and spike_fraction in (0, 1)")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n_spike = int(round(spike_fraction * n_points))
    n_ball = n_points - n_spike
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    ball = rng.normal(size=(n_ball, 3))
    ball /= np.linalg.norm(ball, axis=1, keepdims=True)
    # the base circle (radius 0.3) sits on the sphere, the apex at distance 2.2
    base_h, apex_h, base_r = np.sqrt(1 - 0.3 ** 2), 2.2, 0.3
    u = np.cross(d, [1.0, 0, 0] if abs(d[0]) < 0.9 else [0, 1.0, 0])
    u /= np.linalg.norm(u)
    v = np.cross(d, u)
    s = np.sqrt(rng.random(n_spike))  # area-uniform from the apex
    phi = rng.uniform(0, 2 * np.pi, n_spike)
    radial = (s * base_r)[:, None] * (np.cos(phi)[:, None] * u + np.sin(phi)[:, None] * v)
    spike = (apex_h - s * (apex_h - base_h))[:, None] * d + radial
    pts = np.concatenate([ball, spike])
    if noise:
        pts = pts + rng.normal(scale=noise, size=pts.shape)
    parts = np.concatenate([np.zeros(n_ball, np.int64), np.ones(n_spike, np.int64)])
    order = rng.permutation(n_points)
    return pts[order], parts[order]
