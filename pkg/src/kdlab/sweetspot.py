"""Batch-size × epoch sweeps of teacher training and sweet-spot selection.

Every grid cell trains a fresh teacher; its mean soft-label entropy at the
reference temperature is measured on the training split and its accuracy on
the test split. A sweet spot is a feasible cell (accuracy at or above the
floor) with high entropy. Ranking is by entropy, descending; ties go to the
smaller batch, then to fewer epochs.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .analysis import entropy_curve
from .errors import InfeasibleError, KDLabError
from .tensor import derive_seed
from .train import TrainConfig, evaluate, save_checkpoint, train_teacher

DEFAULT_FLOOR_MARGIN = 0.02


@dataclass(frozen=True)
class SweepGrid:
    batch_sizes: tuple
    epoch_counts: tuple
    T_ref: float = 9.0
    min_accuracy: float | None = None  # None: best grid accuracy minus DEFAULT_FLOOR_MARGIN
    base: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        object.__setattr__(self, "batch_sizes", tuple(int(b) for b in self.batch_sizes))
        object.__setattr__(self, "epoch_counts", tuple(int(e) for e in self.epoch_counts))
        for name in ("batch_sizes", "epoch_counts"):
            vals = getattr(self, name)
            if not vals:
                raise ValueError(f"{name} must be non-empty")
            if any(b <= a for a, b in zip(vals, vals[1:])):
                raise ValueError(f"{name} must be strictly increasing, got {vals}")
        if self.batch_sizes[0] < 1 or self.epoch_counts[0] < 0:
            raise ValueError("batch sizes must be >= 1 and epoch counts >= 0")
        if self.min_accuracy is not None and not 0.0 < self.min_accuracy <= 1.0:
            raise ValueError(f"min_accuracy must lie in (0, 1], got {self.min_accuracy}")
        if not self.T_ref > 0:
            raise ValueError(f"T_ref must be > 0, got {self.T_ref}")

    def cells(self):
        return [(b, e) for b in self.batch_sizes for e in self.epoch_counts]

    def cell_config(self, batch, epochs) -> TrainConfig:
        seed = derive_seed(self.base.seed, batch, epochs) % 2**63
        return replace(self.base, batch_size=batch, epochs=epochs, seed=seed)

    def to_dict(self):
        return {"batch_sizes": list(self.batch_sizes), "epoch_counts": list(self.epoch_counts),
                "T_ref": self.T_ref, "min_accuracy": self.min_accuracy, "base": self.base.to_dict()}


@dataclass
class SurfaceCell:
    batch: int
    epochs: int
    entropy: float = math.nan
    accuracy: float = math.nan
    checkpoint: str = ""
    error: str = ""

    @property
    def ok(self):
        return not self.error

    @property
    def key(self):
        return (self.batch, self.epochs)


@dataclass
class EntropySurface:
    grid: SweepGrid
    cells: dict  # (batch, epochs) -> SurfaceCell; refinement may add off-grid cells
    checkpoints: dict = field(default_factory=dict, repr=False)  # (batch, epochs) -> Checkpoint, if kept

    def _matrix(self, attr):
        g = self.grid
        return np.array([[getattr(self.cells[(b, e)], attr) for e in g.epoch_counts] for b in g.batch_sizes])

    @property
    def entropy(self):
        """|batch_sizes| × |epoch_counts| matrix of mean entropies (NaN for failed cells)."""
        return self._matrix("entropy")

    @property
    def accuracy(self):
        return self._matrix("accuracy")

    def failed(self):
        return [c for c in self.cells.values() if not c.ok]

    def floor(self):
        if self.grid.min_accuracy is not None:
            return self.grid.min_accuracy
        acc = [c.accuracy for c in self.cells.values() if c.ok]
        if not acc:
            raise InfeasibleError("every cell of the sweep failed")
        return max(acc) - DEFAULT_FLOOR_MARGIN

    def trends(self):
        """Spearman rho of entropy along each row (batch varies) and column (epochs vary)."""
        g = self.grid
        H = self.entropy

        def rho(x, y):
            ok = np.isfinite(y)
            if ok.sum() < 2:
                return math.nan
            return float(spearmanr(np.asarray(x)[ok], y[ok]).statistic)

        return {
            "batch": {e: rho(g.batch_sizes, H[:, j]) for j, e in enumerate(g.epoch_counts)},
            "epochs": {b: rho(g.epoch_counts, H[i, :]) for i, b in enumerate(g.batch_sizes)},
        }

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["batch", "epochs", "entropy", "accuracy", "checkpoint"])
            for key in sorted(self.cells):
                c = self.cells[key]
                w.writerow([c.batch, c.epochs, repr(float(c.entropy)), repr(float(c.accuracy)), c.checkpoint])
        return path

    @classmethod
    def from_csv(cls, path, grid: SweepGrid):
        cells = {}
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                c = SurfaceCell(int(row["batch"]), int(row["epochs"]), float(row["entropy"]),
                                float(row["accuracy"]), row["checkpoint"])
                if not math.isfinite(c.entropy):
                    c.error = "failed"
                cells[c.key] = c
        return cls(grid, cells)


def _run_cell(spec, train_ds, test_ds, grid: SweepGrid, batch, epochs, out_dir=None):
    cfg = grid.cell_config(batch, epochs)
    try:
        ckpt, _ = train_teacher(spec, train_ds, cfg)
    except KDLabError as exc:  # divergence and friends: record, carry on
        return SurfaceCell(batch, epochs, error=f"{type(exc).__name__}: {exc}"), None
    ckpt.test_accuracy = evaluate(ckpt, test_ds)[0]
    H = entropy_curve(ckpt, train_ds, (grid.T_ref,)).mean[0]
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / f"teacher_b{batch}_e{epochs}.kdlb", ckpt)
    return SurfaceCell(batch, epochs, float(H), float(ckpt.test_accuracy), ckpt.id), ckpt


def cell_evaluator(spec, train_ds, test_ds, grid: SweepGrid, out_dir=None, keep=None):
    """Callable ``(batch, epochs) -> SurfaceCell`` used for grid cells and refinement."""

    def run(batch, epochs):
        cell, ckpt = _run_cell(spec, train_ds, test_ds, grid, batch, epochs, out_dir)
        if keep is not None and ckpt is not None:
            keep[(batch, epochs)] = ckpt
        return cell

    return run


def entropy_surface(spec, train_ds, test_ds, grid: SweepGrid, out_dir=None, keep_checkpoints=False,
                    workers=1) -> EntropySurface:
    """Train one teacher per grid cell and record (entropy at T_ref, test accuracy, checkpoint id).

    With ``workers > 1`` cells run in separate processes; per-cell seeds make
    the result identical to a serial run.
    """
    keep = {} if keep_checkpoints else None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    cells = {}
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            futures = {k: pool.submit(_run_cell, spec, train_ds, test_ds, grid, *k, out_dir) for k in grid.cells()}
            for k, fut in futures.items():
                cells[k], ckpt = fut.result()
                if keep is not None and ckpt is not None:
                    keep[k] = ckpt
    else:
        run = cell_evaluator(spec, train_ds, test_ds, grid, out_dir, keep)
        for k in grid.cells():
            cells[k] = run(*k)
    return EntropySurface(grid, cells, keep or {})


# -- selection -------------------------------------------------------------


@dataclass(frozen=True)
class RefineConfig:
    iterations: int = 0  # rounds of midpoint insertion around the current best cell

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")


@dataclass(frozen=True)
class SweetSpot:
    rank: int
    batch: int
    epochs: int
    entropy: float
    accuracy: float
    checkpoint: str = ""

    def to_dict(self):
        return asdict(self)


def rank_cells(cells, floor):
    feasible = [c for c in cells if c.ok and c.accuracy >= floor]
    feasible.sort(key=lambda c: (-c.entropy, c.batch, c.epochs))
    return [SweetSpot(i + 1, c.batch, c.epochs, c.entropy, c.accuracy, c.checkpoint)
            for i, c in enumerate(feasible)]


def _neighbours(values, v):
    vals = sorted(values)
    i = vals.index(v)
    return vals[i - 1] if i > 0 else None, vals[i + 1] if i + 1 < len(vals) else None


def _midpoints(surface, best):
    """Integer midpoints between the best cell and its neighbours along each axis."""
    batches = {b for b, _ in surface.cells}
    epochs = {e for _, e in surface.cells}
    out = []
    for n in _neighbours(batches, best.batch):
        if n is not None and abs(n - best.batch) > 1:
            out.append(((n + best.batch) // 2, best.epochs))
    for n in _neighbours(epochs, best.epochs):
        if n is not None and abs(n - best.epochs) > 1:
            out.append((best.batch, (n + best.epochs) // 2))
    return [k for k in out if k not in surface.cells]


def find_sweet_spot(surface: EntropySurface, refine: RefineConfig = RefineConfig(), evaluate_cell=None):
    """Feasible cells ranked by entropy (descending).

    The accuracy floor is fixed from the grid before refinement. Each
    refinement round evaluates the midpoints around the current best cell
    with ``evaluate_cell(batch, epochs)`` and adds them to ``surface``.
    Raises :class:`InfeasibleError` (carrying the most accurate cell) when
    nothing meets the floor.
    """
    if not surface.cells:
        raise ValueError("empty surface")
    floor = surface.floor()
    spots = rank_cells(surface.cells.values(), floor)
    if not spots:
        ok = [c for c in surface.cells.values() if c.ok]
        best = max(ok, key=lambda c: (c.accuracy, -c.batch, -c.epochs)) if ok else None
        acc = f"{best.accuracy:.4f}" if best else "n/a"
        raise InfeasibleError(f"no cell reaches the accuracy floor {floor:.4f} (best: {acc})", best)
    if refine.iterations and evaluate_cell is None:
        raise ValueError("refinement needs an evaluate_cell callable")
    for _ in range(refine.iterations):
        new = _midpoints(surface, spots[0])
        if not new:
            break
        for b, e in new:
            surface.cells[(b, e)] = evaluate_cell(b, e)
        spots = rank_cells(surface.cells.values(), floor)
    return spots


def write_summary(path, surface: EntropySurface, spots):
    """JSON summary: grid, floor, ranked spots, trends and failed cells."""
    trends = surface.trends()
    doc = {
        "grid": surface.grid.to_dict(),
        "floor": surface.floor(),
        "spots": [s.to_dict() for s in spots],
        "trends": {axis: {str(k): v for k, v in t.items()} for axis, t in trends.items()},
        "failed": [{"batch": c.batch, "epochs": c.epochs, "error": c.error} for c in surface.failed()],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=True))
    return path
