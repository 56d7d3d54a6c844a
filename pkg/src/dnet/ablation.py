"""Ablation grid and parameter sweeps with seed-averaged CSV reporting.

The harness only reports; it never asserts an ordering between cells.
"""

from __future__ import annotations

import csv
import io
import itertools
import re
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .config import apply_overrides, flatten, format_value
from .data import Split
from .fusion import FUSION_MODES
from .model import SAMPLING_MODES, DNet, ModelConfig, sets_label
from .training import accuracy, train_epochs

ABLATION_HEADER = ("cell_id", "sampling", "gate", "fusion", "sets", "k", "n1_ratio",
                   "seed_count", "mean_acc", "std_acc")
GRID_SETS = ("P_R", "P_R+P_H", "P_H", "P_H+P_L", "ALL")
K_VALUES = (5, 10, 15, 20, 25, 30)
N1_RATIOS = (0.125, 0.1875, 0.25, 0.3125, 0.375)
TABLES = ("grid", "k", "n1")
# Published ModelNet40 reference points (instance accuracy, %), kept as
# annotations only; desk-scale numbers are not comparable in absolute terms.
REFERENCE_NOTES = (
    ("k", "k=20", 93.15),
    ("n1", "N1=320 of 1024 (ratio 0.3125)", 93.15),
    ("grid", "fusion=max", 92.34),
    ("grid", "sets=ALL", 93.15),
)


@dataclass(frozen=True)
class Cell:
    cell_id: str
    table: str
    sampling: str
    gating: bool
    fusion: str
    sets: str
    k: int
    n1_ratio: float

    def overrides(self) -> dict:
        return {"sampling": self.sampling, "sgc.gating": self.gating, "fusion": self.fusion,
                "sets": self.sets, "sgc.k": self.k, "n1_ratio": self.n1_ratio, "n1": None}


@dataclass
class CellResult:
    cell: Cell
    accuracies: list
    error: Optional[str] = None

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies)) if self.accuracies and not self.error else float("nan")

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies)) if self.accuracies and not self.error else float("nan")


def build_cells(base: ModelConfig, tables=TABLES) -> list:
    """Grid cells (sampling x gate x fusion x sets) then the k and N1 sweeps.

    Sweeps vary one parameter around ``base``; the grid keeps ``base``'s k
    and N1 ratio.
    """
    k0, r0 = base.sgc.k, base.n1_ratio
    s0, f0, g0 = base.sampling, base.fusion, base.sgc.gating
    sets0 = sets_label(base.sets)
    cells = []
    if "grid" in tables:
        for sampling, gating, fusion, sets in itertools.product(SAMPLING_MODES, (True, False),
                                                                FUSION_MODES, GRID_SETS):
            cid = f"grid/{sampling}/{'gate' if gating else 'nogate'}/{fusion}/{sets}"
            cells.append(Cell(cid, "grid", sampling, gating, fusion, sets, k0, r0))
    if "k" in tables:
        cells += [Cell(f"k/{k}", "k", s0, g0, f0, sets0, k, r0) for k in K_VALUES]
    if "n1" in tables:
        cells += [Cell(f"n1/{r}", "n1", s0, g0, f0, sets0, k0, r) for r in N1_RATIOS]
    return cells


def filter_cells(cells, pattern: Optional[str]) -> list:
    """Keep cells whose id matches the regular expression ``pattern``."""
    if not pattern:
        return list(cells)
    rx = re.compile(pattern)
    return [c for c in cells if rx.search(c.cell_id)]


def run_cell(cell: Cell, base: ModelConfig, train: Split, test: Split, seeds, epochs: int,
             batch_size: int = 16, lr: float = 1e-3) -> CellResult:
    """Train one fresh model per seed; any exception marks the cell failed."""
    accs = []
    try:
        for seed in seeds:
            cfg = apply_overrides(base, dict(cell.overrides(), seed=int(seed)))
            model = DNet(cfg)
            train_epochs(model, train, test, epochs, batch_size, lr, seed=int(seed))
            accs.append(accuracy(model, test))
    except Exception as e:  # recorded in the table; the run continues
        return CellResult(cell, accs, f"{type(e).__name__}: {e}")
    return CellResult(cell, accs)


def provenance_rows(values: dict) -> list:
    return [f"# {k} = {format_value(v)}" for k, v in values.items()]


def format_table(results, provenance: dict, tables=TABLES) -> str:
    """CSV text: provenance and reference comment rows, header, one row per cell,
    then ``# failed`` rows for cells that raised."""
    buf = io.StringIO()
    for line in provenance_rows(provenance):
        buf.write(line + "\n")
    for table, what, acc in REFERENCE_NOTES:
        if table in tables:
            buf.write(f"# reference {table}: {what} -> {acc:.2f}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_HEADER)
    for r in results:
        c = r.cell
        w.writerow([c.cell_id, c.sampling, "on" if c.gating else "off", c.fusion, c.sets, c.k,
                    repr(c.n1_ratio), len(r.accuracies) if not r.error else 0,
                    f"{r.mean:.6f}", f"{r.std:.6f}"])
    for r in results:
        if r.error:
            buf.write(f"# failed {r.cell.cell_id}: {r.error}\n")
    return buf.getvalue()


def run_ablation(base: ModelConfig, train: Split, test: Split, seeds, epochs: int,
                 batch_size: int = 16, lr: float = 1e-3, tables=TABLES, pattern: Optional[str] = None,
                 progress: Optional[Callable[[CellResult], None]] = None) -> list:
    results = []
    for cell in filter_cells(build_cells(base, tables), pattern):
        res = run_cell(cell, base, train, test, seeds, epochs, batch_size, lr)
        results.append(res)
        if progress is not None:
            progress(res)
    return results


def resolved_provenance(base: ModelConfig, extra: dict) -> dict:
    out = dict(extra)
    out.update({f"model.{k}": v for k, v in flatten(base).items()})
    return out
