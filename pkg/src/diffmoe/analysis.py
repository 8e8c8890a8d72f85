"""Capacity reports, the toy quality proxy and the threshold sweep.

CSV schemas (floats with 9 significant digits):

* ``capacity_trace.csv``: ``eval,t,capacity``
* ``layer_expert_capacity.csv``: ``eval,t,layer,block,expert,capacity``
* ``class_ranking.csv``: ``rank,class,name,capacity,n_samples`` (descending capacity)
* ``activated_params.csv``: ``quantity,value``
* ``sweep.csv``: ``mode,gamma,capacity,quality,feasible,selected``
"""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import CLASS_NAMES
from .model import Model, count_parameters, estimate_activated_parameters, exact_activated_parameters
from .predictor import InfeasibleError, SweepRow, ThresholdSet, interval_search
from .sampling import EvalRecord, SampleRequest, generate

DEFAULT_GRID = (0.999, 0.99, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.01, 0.0)


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return x
    return f"{float(x):.9g}"


def write_csv(path: str | Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])


# ---------------------------------------------------------------------------
# Quality proxy
# ---------------------------------------------------------------------------


def sliced_histogram_distance(a: np.ndarray, b: np.ndarray, n_projections: int = 32, bins: int = 32,
                              seed: int = 0) -> float:
    """Mean total-variation distance between 1-D histograms of random projections.

    Both sets are flattened per sample.  Bins span the joint range of each
    projection, so identical empirical distributions give exactly zero.
    """
    a = np.asarray(a, dtype=float).reshape(len(a), -1)
    b = np.asarray(b, dtype=float).reshape(len(b), -1)
    if a.shape[1] != b.shape[1]:
        raise ValueError("sample sets differ in dimension")
    if len(a) == 0 or len(b) == 0:
        raise ValueError("empty sample set")
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((a.shape[1], n_projections))
    dirs /= np.linalg.norm(dirs, axis=0, keepdims=True)
    pa, pb = a @ dirs, b @ dirs
    total = 0.0
    for j in range(n_projections):
        lo = min(pa[:, j].min(), pb[:, j].min())
        hi = max(pa[:, j].max(), pb[:, j].max())
        if hi <= lo:
            continue
        ha, _ = np.histogram(pa[:, j], bins=bins, range=(lo, hi))
        hb, _ = np.histogram(pb[:, j], bins=bins, range=(lo, hi))
        total += 0.5 * np.abs(ha / len(a) - hb / len(b)).sum()
    return float(total / n_projections)


# ---------------------------------------------------------------------------
# Capacity report
# ---------------------------------------------------------------------------


@dataclass
class CapacityReport:
    trace: list[EvalRecord]
    labels: np.ndarray
    sample_capacity: np.ndarray  # per-sample capacity averaged over the trace
    blocks: tuple[int, ...]
    param_counts: dict[str, int]
    n_experts: int
    exact_activated: float

    @property
    def average_capacity(self) -> float:
        return float(np.mean([r.capacity for r in self.trace]))

    @property
    def activated_estimate(self) -> float:
        return estimate_activated_parameters(self.param_counts, self.average_capacity, self.n_experts)

    def class_ranking(self, num_classes: int) -> list[tuple[int, float, int]]:
        """``(class, C_avg, n_samples)`` for every class, hardest first; ties broken by class id."""
        per_sample = self.sample_capacity
        rows = []
        for c in range(num_classes):
            mask = self.labels == c
            cap = float(per_sample[mask].mean()) if mask.any() else float("nan")
            rows.append((c, cap, int(mask.sum())))
        return sorted(rows, key=lambda r: (-(r[1] if np.isfinite(r[1]) else -np.inf), r[0]))

    def write(self, out_dir: str | Path, num_classes: int) -> dict[str, Path]:
        out = Path(out_dir)
        paths = {k: out / f"{k}.csv" for k in ("capacity_trace", "layer_expert_capacity", "class_ranking", "activated_params")}
        write_csv(paths["capacity_trace"], ["eval", "t", "capacity"],
                  [(i, r.t, r.capacity) for i, r in enumerate(self.trace)])
        rows = []
        for i, r in enumerate(self.trace):
            for layer, block in enumerate(self.blocks):
                for e in range(r.layer_expert.shape[1]):
                    rows.append((i, r.t, layer, block, e, r.layer_expert[layer, e]))
        write_csv(paths["layer_expert_capacity"], ["eval", "t", "layer", "block", "expert", "capacity"], rows)
        ranking = self.class_ranking(num_classes)
        write_csv(paths["class_ranking"], ["rank", "class", "name", "capacity", "n_samples"],
                  [(k + 1, c, CLASS_NAMES[c] if c < len(CLASS_NAMES) else str(c), cap, n)
                   for k, (c, cap, n) in enumerate(ranking)])
        pc = self.param_counts
        write_csv(paths["activated_params"], ["quantity", "value"], [
            ("capacity_avg", self.average_capacity),
            ("n_experts", self.n_experts),
            ("ffn", pc["ffn"]), ("attention", pc["attention"]), ("adaln", pc["adaln"]), ("other", pc["other"]),
            ("total", pc["total"]),
            ("activated_estimate", self.activated_estimate),
            ("activated_exact", self.exact_activated),
        ])
        return paths


def build_report(model: Model, trace: list[EvalRecord], labels: np.ndarray,
                 sample_capacity: np.ndarray | None = None) -> CapacityReport:
    cfg = model.config
    if not trace:
        raise ValueError("empty capacity trace")
    if sample_capacity is None:
        sample_capacity = np.mean([r.sample_capacity for r in trace], axis=0)
    counts = count_parameters(model)
    n = cfg.n_experts if cfg.is_moe else 1
    cap = float(np.mean([r.capacity for r in trace]))
    return CapacityReport(trace, np.asarray(labels), np.asarray(sample_capacity, dtype=float), cfg.moe_blocks,
                          counts, n, exact_activated_parameters(model, cap))


# ---------------------------------------------------------------------------
# Threshold sweep
# ---------------------------------------------------------------------------


@dataclass
class SweepResult:
    rows: list[SweepRow]
    dynamic: SweepRow | None
    best_gamma: float | None

    def write(self, path: str | Path) -> None:
        out = []
        for r in self.rows:
            out.append(("static", r.gamma, r.capacity, r.quality, r.feasible, r.gamma == self.best_gamma))
        if self.dynamic is not None:
            d = self.dynamic
            out.append(("dynamic", float("nan"), d.capacity, d.quality, d.feasible, False))
        write_csv(path, ["mode", "gamma", "capacity", "quality", "feasible", "selected"], out)


def run_sweep(model: Model, reference: np.ndarray, req: SampleRequest, grid: Sequence[float],
              dynamic: ThresholdSet | None = None, workers: int = 1) -> SweepResult:
    """Evaluate static thresholds over ``grid`` and, when given, the dynamic thresholds."""
    grid = list(grid)
    if not grid:
        raise ValueError("empty threshold grid")
    cfg = model.config
    if cfg.routing != "diffmoe":
        raise ValueError("threshold sweeps need a diffmoe model")
    L, N = len(cfg.moe_blocks), cfg.n_experts

    def evaluate(th: ThresholdSet) -> tuple[float, float]:
        res = generate(model, req, th)
        return sliced_histogram_distance(res.images, reference), res.average_capacity

    def point(g: float) -> tuple[float, float]:
        return evaluate(ThresholdSet.static(g, L, N))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = dict(zip(grid, pool.map(point, grid)))
    else:
        results = {g: point(g) for g in grid}
    try:
        best, rows = interval_search(lambda g: results[g], grid)
    except InfeasibleError:
        best = None
        rows = [SweepRow(float(g), results[g][1], results[g][0], results[g][1] <= 1.0) for g in grid]
    dyn = None
    if dynamic is not None:
        q, c = evaluate(dynamic)
        dyn = SweepRow(float("nan"), c, q, c <= 1.0)
    return SweepResult(rows, dyn, best)
