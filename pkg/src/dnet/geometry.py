"""Point clouds: normalization, neighbor search, sampling, synthesis and I/O."""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import _kernels
from .errors import DimensionError, GeometryError, ParameterError, ParseError

SHAPE_KINDS = ("sphere", "cube", "cylinder", "cone", "torus", "pyramid", "plane-cross", "capsule")


@dataclass
class PointCloud:
    points: np.ndarray
    normals: Optional[np.ndarray] = None
    label: Optional[int] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or len(self.points) < 1:
            raise DimensionError(f"points must be N x 3 with N >= 1, got {self.points.shape}")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64)
            if self.normals.shape != self.points.shape:
                raise DimensionError(
                    f"normals shape {self.normals.shape} != points shape {self.points.shape}"
                )

    def __len__(self):
        return len(self.points)

    def features(self, use_normals: bool = False) -> np.ndarray:
        """Per-point input features: ``xyz`` or ``xyz + normal``."""
        if not use_normals:
            return self.points
        if self.normals is None:
            raise ParameterError("normals requested but the cloud has none")
        return np.concatenate([self.points, self.normals], axis=1)

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx)
        normals = None if self.normals is None else self.normals[idx]
        return PointCloud(self.points[idx], normals, self.label)


@dataclass
class NeighborGraph:
    k: int
    indices: np.ndarray  # N x k
    metric_space: str = "coordinate"


def normalize_unit_sphere(cloud: PointCloud) -> PointCloud:
    """Center at the centroid and scale so the farthest point has norm 1."""
    centered = cloud.points - cloud.points.mean(axis=0)
    radius = np.sqrt((centered ** 2).sum(axis=1)).max()
    if radius <= 1e-12:
        raise GeometryError("cannot normalize a cloud whose points all coincide")
    return replace(cloud, points=centered / radius)


def pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distances via explicit differences."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.empty((len(a), len(b)))
    # chunked to bound memory at N x chunk x D
    chunk = max(1, 2 ** 22 // max(1, len(b) * a.shape[1]))
    for s in range(0, len(a), chunk):
        diff = a[s:s + chunk, None, :] - b[None, :, :]
        out[s:s + chunk] = (diff * diff).sum(axis=-1)
    return out


def knn(features, k: int, exclude_self: bool = True, metric_space: str = "coordinate") -> NeighborGraph:
    """k nearest rows by Euclidean distance, ascending, ties toward lower index."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"knn expects an N x D array, got {x.shape}")
    n = len(x)
    limit = n - 1 if exclude_self else n
    if not 1 <= k <= limit:
        raise ParameterError(f"k={k} must satisfy 1 <= k <= {limit} for N={n}")
    d = pairwise_sq_dists(x, x)
    if exclude_self:
        np.fill_diagonal(d, np.inf)
    order = np.argsort(d, axis=1, kind="stable")[:, :k]
    return NeighborGraph(k, order, metric_space)


def batched_knn(features: np.ndarray, k: int) -> np.ndarray:
    """Neighbor indices for a batch ``B x N x D`` (self excluded).

    Uses the Gram-matrix distance form, which is fast but can misorder
    near-equal distances at rounding level; training does not depend on
    exact tie behavior. Returns ``B x N x k``.
    """
    x = np.asarray(features)
    n = x.shape[-2]
    if not 1 <= k < n:
        raise ParameterError(f"k={k} must satisfy 1 <= k < N={n}")
    lead = x.shape[:-2]
    x = x.reshape((-1,) + x.shape[-2:])
    gram = np.ascontiguousarray(x @ np.swapaxes(x, -1, -2))
    sq = np.ascontiguousarray((x * x).sum(-1))
    return _kernels.knn_from_gram(gram, sq, k).reshape(lead + (n, k))


def fps(points, m: int, start: int = 0) -> np.ndarray:
    """Greedy farthest-point order; ties go to the lowest index."""
    p = np.asarray(points, dtype=np.float64)
    n = len(p)
    if not 1 <= m <= n:
        raise ParameterError(f"fps: need 1 <= m <= N, got m={m}, N={n}")
    if not 0 <= start < n:
        raise ParameterError(f"fps: start {start} out of range for N={n}")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = start
    mind = ((p - p[start]) ** 2).sum(axis=1)
    for j in range(1, m):
        nxt = int(np.argmax(mind))
        chosen[j] = nxt
        mind = np.minimum(mind, ((p - p[nxt]) ** 2).sum(axis=1))
    return chosen


def batched_fps(points: np.ndarray, m: int) -> np.ndarray:
    """:func:`fps` with ``start=0`` over a ``B x N x 3`` batch."""
    p = np.asarray(points, dtype=np.float64)
    b, n, _ = p.shape
    if not 1 <= m <= n:
        raise ParameterError(f"fps: need 1 <= m <= N, got m={m}, N={n}")
    rows = np.arange(b)
    chosen = np.zeros((b, m), dtype=np.int64)
    mind = ((p - p[:, :1]) ** 2).sum(-1)
    for j in range(1, m):
        nxt = np.argmax(mind, axis=1)
        chosen[:, j] = nxt
        mind = np.minimum(mind, ((p - p[rows, nxt][:, None]) ** 2).sum(-1))
    return chosen


def random_sample(points, m: int, seed) -> np.ndarray:
    """``m`` distinct uniformly drawn indices, reproducible per seed."""
    n = len(points)
    if not 0 <= m <= n:
        raise ParameterError(f"random_sample: need m <= N, got m={m}, N={n}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.permutation(n)[:m]


# -- synthetic shapes --------------------------------------------------------
def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _pick_by_area(rng, areas, n):
    areas = np.asarray(areas, dtype=np.float64)
    return rng.choice(len(areas), size=n, p=areas / areas.sum())


def _sphere(rng, n, radius=1.0):
    v = _unit(rng.normal(size=(n, 3)))
    return radius * v, v


def _disk(rng, n, radius, z, up):
    r = radius * np.sqrt(rng.random(n))
    t = rng.uniform(0, 2 * np.pi, n)
    pts = np.stack([r * np.cos(t), r * np.sin(t), np.full(n, z)], axis=1)
    nor = np.tile([0.0, 0.0, 1.0 if up else -1.0], (n, 1))
    return pts, nor


def _tube(rng, n, radius, z0, z1):
    t = rng.uniform(0, 2 * np.pi, n)
    z = rng.uniform(z0, z1, n)
    nor = np.stack([np.cos(t), np.sin(t), np.zeros(n)], axis=1)
    return np.stack([radius * np.cos(t), radius * np.sin(t), z], axis=1), nor


def _compose(rng, n, parts):
    """Sample ``n`` points from weighted surface parts ``(area, sampler)``."""
    which = _pick_by_area(rng, [a for a, _ in parts], n)
    pts = np.empty((n, 3))
    nor = np.empty((n, 3))
    for i, (_, sampler) in enumerate(parts):
        sel = np.flatnonzero(which == i)
        if len(sel):
            pts[sel], nor[sel] = sampler(len(sel))
    return pts, nor


def _triangle(rng, n, a, b, c, outward):
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    pts = a + u[:, None] * (b - a) + v[:, None] * (c - a)
    normal = _unit(np.cross(b - a, c - a))
    if np.dot(normal, outward) < 0:
        normal = -normal
    return pts, np.tile(normal, (n, 1))


def surface_samples(kind: str, n: int, rng: np.random.Generator, params: Optional[dict] = None):
    """Uniform surface samples and analytic normals of a primitive, in its
    own frame (before noise, rotation and normalization).

    ``params`` holds the shape dimensions; missing entries are drawn from
    ``rng`` with mild per-instance jitter. Returns ``(points, normals, params)``.
    """
    p = dict(params or {})

    def get(key, lo, hi):
        if key not in p:
            p[key] = float(rng.uniform(lo, hi))
        return p[key]

    if kind == "sphere":
        r = get("radius", 0.8, 1.2)
        pts, nor = _sphere(rng, n, r)
    elif kind == "cube":
        ext = np.array([get("ex", 0.85, 1.15), get("ey", 0.85, 1.15), get("ez", 0.85, 1.15)])
        half = ext / 2
        areas = []
        faces = []
        for axis in range(3):
            others = [a for a in range(3) if a != axis]
            area = ext[others[0]] * ext[others[1]]
            for sign in (-1.0, 1.0):
                areas.append(area)
                faces.append((axis, sign, others))

        def face(i):
            axis, sign, others = faces[i]

            def sample(m):
                pts = np.empty((m, 3))
                pts[:, axis] = sign * half[axis]
                for o in others:
                    pts[:, o] = rng.uniform(-half[o], half[o], m)
                nor = np.zeros((m, 3))
                nor[:, axis] = sign
                return pts, nor

            return sample

        pts, nor = _compose(rng, n, [(areas[i], face(i)) for i in range(6)])
    elif kind == "cylinder":
        r = get("radius", 0.4, 0.6)
        h = get("height", 1.6, 2.2)
        pts, nor = _compose(rng, n, [
            (2 * np.pi * r * h, lambda m: _tube(rng, m, r, -h / 2, h / 2)),
            (np.pi * r * r, lambda m: _disk(rng, m, r, h / 2, True)),
            (np.pi * r * r, lambda m: _disk(rng, m, r, -h / 2, False)),
        ])
    elif kind == "cone":
        r = get("radius", 0.7, 1.0)
        h = get("height", 1.4, 2.0)
        slant = np.hypot(r, h)

        def lateral(m):
            # area-uniform: radius fraction ~ sqrt(U)
            s = np.sqrt(rng.random(m))
            t = rng.uniform(0, 2 * np.pi, m)
            pts = np.stack([s * r * np.cos(t), s * r * np.sin(t), h / 2 - s * h], axis=1)
            nor = _unit(np.stack([h * np.cos(t), h * np.sin(t), np.full(m, r)], axis=1))
            return pts, nor

        pts, nor = _compose(rng, n, [
            (np.pi * r * slant, lateral),
            (np.pi * r * r, lambda m: _disk(rng, m, r, -h / 2, False)),
        ])
    elif kind == "torus":
        big = get("major", 0.9, 1.1)
        small = get("minor", 0.25, 0.4)
        # rejection sampling on the tube angle gives area-uniform samples
        out_t, out_s = [], []
        need = n
        while need > 0:
            t = rng.uniform(0, 2 * np.pi, 2 * need + 8)
            s = rng.uniform(0, 2 * np.pi, 2 * need + 8)
            keep = rng.random(len(t)) < (big + small * np.cos(s)) / (big + small)
            out_t.append(t[keep])
            out_s.append(s[keep])
            need -= int(keep.sum())
        t = np.concatenate(out_t)[:n]
        s = np.concatenate(out_s)[:n]
        nor = np.stack([np.cos(s) * np.cos(t), np.cos(s) * np.sin(t), np.sin(s)], axis=1)
        pts = np.stack([(big + small * np.cos(s)) * np.cos(t),
                        (big + small * np.cos(s)) * np.sin(t),
                        small * np.sin(s)], axis=1)
    elif kind == "pyramid":
        a = get("base", 1.4, 1.8) / 2
        h = get("height", 1.2, 1.7)
        apex = np.array([0.0, 0.0, h / 2])
        corners = np.array([[a, a, -h / 2], [-a, a, -h / 2], [-a, -a, -h / 2], [a, -a, -h / 2]])
        parts = []
        for i in range(4):
            b, c = corners[i], corners[(i + 1) % 4]
            area = 0.5 * np.linalg.norm(np.cross(b - apex, c - apex))
            outward = (b + c) / 2 - np.array([0, 0, -h / 2])
            outward[2] = 0.0
            parts.append((area, lambda m, b=b, c=c, o=outward: _triangle(rng, m, apex, b, c, o)))

        def base(m):
            pts = np.stack([rng.uniform(-a, a, m), rng.uniform(-a, a, m), np.full(m, -h / 2)], axis=1)
            return pts, np.tile([0.0, 0.0, -1.0], (m, 1))

        parts.append((4 * a * a, base))
        pts, nor = _compose(rng, n, parts)
    elif kind == "plane-cross":
        w = get("width", 1.6, 2.0) / 2
        hh = get("height", 1.6, 2.0) / 2

        def plane(axis):
            def sample(m):
                u = rng.uniform(-w, w, m)
                z = rng.uniform(-hh, hh, m)
                pts = np.zeros((m, 3))
                pts[:, 1 - axis] = u
                pts[:, 2] = z
                sign = np.where(rng.random(m) < 0.5, -1.0, 1.0)
                nor = np.zeros((m, 3))
                nor[:, axis] = sign
                return pts, nor
            return sample

        pts, nor = _compose(rng, n, [(1.0, plane(0)), (1.0, plane(1))])
    elif kind == "capsule":
        r = get("radius", 0.35, 0.5)
        h = get("height", 1.0, 1.4)

        def cap(sign):
            def sample(m):
                v = _unit(rng.normal(size=(m, 3)))
                v[:, 2] = sign * np.abs(v[:, 2])
                pts = r * v
                pts[:, 2] += sign * h / 2
                return pts, v
            return sample

        pts, nor = _compose(rng, n, [
            (2 * np.pi * r * h, lambda m: _tube(rng, m, r, -h / 2, h / 2)),
            (2 * np.pi * r * r, cap(1.0)),
            (2 * np.pi * r * r, cap(-1.0)),
        ])
    else:
        raise ParameterError(f"unknown shape kind {kind!r}; expected one of {SHAPE_KINDS}")
    return pts, nor, p


def random_rotation(rng: np.random.Generator, mode: str = "z") -> np.ndarray:
    """Rotation matrix: about the vertical axis (``z``), uniform (``so3``), or identity."""
    if mode == "none":
        return np.eye(3)
    if mode == "z":
        t = rng.uniform(0, 2 * np.pi)
        c, s = np.cos(t), np.sin(t)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    if mode == "so3":
        q, r = np.linalg.qr(rng.normal(size=(3, 3)))
        q = q * np.sign(np.diag(r))
        if np.linalg.det(q) < 0:
            q[:, 0] = -q[:, 0]
        return q
    raise ParameterError(f"unknown rotation mode {mode!r}")


def synth_generate(kind: str, n_points: int, noise_sigma: float, seed, rotation: str = "z",
                   label: Optional[int] = None) -> PointCloud:
    """Noisy, rotated, unit-sphere-normalized surface samples of a primitive."""
    if kind not in SHAPE_KINDS:
        raise ParameterError(f"unknown shape kind {kind!r}; expected one of {SHAPE_KINDS}")
    if n_points < 8:
        raise ParameterError(f"n_points must be >= 8, got {n_points}")
    if noise_sigma < 0:
        raise ParameterError("noise_sigma must be non-negative")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pts, nor, _ = surface_samples(kind, n_points, rng)
    pts = pts + rng.normal(scale=noise_sigma, size=pts.shape) if noise_sigma else pts
    rot = random_rotation(rng, rotation)
    cloud = PointCloud(pts @ rot.T, nor @ rot.T, label)
    return normalize_unit_sphere(cloud)


# -- file I/O ------------------------------------------------------------------
def save_cloud(cloud: PointCloud, path) -> None:
    """One point per line: ``x y z`` or ``x y z nx ny nz``."""
    data = cloud.points if cloud.normals is None else np.hstack([cloud.points, cloud.normals])
    lines = [" ".join(f"{v:.9f}" for v in row) for row in data]
    with open(path, "w", encoding="utf-8") as f:
        if cloud.label is not None:
            f.write(f"# label {cloud.label}\n")
        f.write("\n".join(lines) + "\n")


def load_cloud(path, label: Optional[int] = None) -> PointCloud:
    rows = []
    width = None
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split(" ")
            if len(parts) not in (3, 6):
                raise ParseError(f"expected 3 or 6 columns, got {len(parts)}", path, lineno)
            if width is None:
                width = len(parts)
            elif len(parts) != width:
                raise ParseError(f"column count changed from {width} to {len(parts)}", path, lineno)
            try:
                rows.append([float(v) for v in parts])
            except ValueError:
                raise ParseError(f"malformed number in {text!r}", path, lineno) from None
    if not rows:
        raise ParseError("file holds no points", path)
    arr = np.array(rows)
    normals = None
    if width == 6:
        normals = arr[:, 3:]
        norm = np.linalg.norm(normals, axis=1, keepdims=True)
        if np.any(norm == 0):
            raise ParseError("zero-length normal", path)
        normals = normals / norm
    return PointCloud(arr[:, :3], normals, label)


PLY_SCALAR = "distinction"


def export_ply_scalar(cloud: PointCloud, scores, path) -> None:
    """ASCII PLY with ``x y z`` and one float scalar per vertex."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(scores) != len(cloud):
        raise ParameterError(f"{len(scores)} scores for {len(cloud)} points")
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property float x",
        "property float y",
        "property float z",
        f"property float {PLY_SCALAR}",
        "end_header",
    ]
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(header) + "\n")
        for (x, y, z), s in zip(cloud.points, scores):
            f.write(f"{x:.9f} {y:.9f} {z:.9f} {s:.9f}\n")


def read_ply(path):
    """Parse an ASCII PLY vertex list; returns ``(points, {property: values})``."""
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic line", path, 1)
    count = None
    props = []
    body = None
    for i, line in enumerate(lines[1:], 2):
        words = line.split()
        if not words:
            continue
        if words[0] == "format" and words[1:2] != ["ascii"]:
            raise ParseError(f"unsupported format {' '.join(words[1:])}", path, i)
        if words[0] == "element" and words[1] == "vertex":
            count = int(words[2])
        elif words[0] == "property" and count is not None:
            props.append(words[-1])
        elif words[0] == "end_header":
            body = i
            break
    if count is None or body is None:
        raise ParseError("incomplete PLY header", path)
    rows = []
    for j, line in enumerate(lines[body:body + count], body + 1):
        parts = line.split()
        if len(parts) != len(props):
            raise ParseError(f"expected {len(props)} values, got {len(parts)}", path, j)
        try:
            rows.append([float(v) for v in parts])
        except ValueError:
            raise ParseError(f"malformed number in {line!r}", path, j) from None
    if len(rows) != count:
        raise ParseError(f"header declares {count} vertices, found {len(rows)}", path)
    arr = np.array(rows).reshape(count, len(props))
    columns = {name: arr[:, i] for i, name in enumerate(props)}
    points = np.stack([columns["x"], columns["y"], columns["z"]], axis=1)
    return points, columns


def ensure_dir(path) -> None:
    os.makedirs(path, exist_ok=True)
