"""Wall time and peak allocation of analytic vs finite-difference metric derivatives."""
from __future__ import annotations

import time
import tracemalloc
from dataclasses import asdict, dataclass

import numpy as np

from .geometry import metric_derivative, module_derivatives, pullback_metric
from .net import init_conditioned
from .oracle import FdConfig, compare_tensors, fd_metric_with_derivative

METRIC_GUARD = 1e-4


@dataclass
class BenchRow:
    dim: int
    batch: int
    analytic_time: float
    numeric_time: float
    analytic_peak_bytes: int
    numeric_peak_bytes: int
    time_ratio: float  # numeric / analytic
    memory_ratio: float  # numeric / analytic
    g_max_rel_err: float
    dg_max_rel_err: float


@dataclass
class BenchReport:
    rows: list[BenchRow]
    repetitions: int
    n_layers: int
    seed: int

    def row(self, dim: int, batch: int) -> BenchRow:
        for r in self.rows:
            if (r.dim, r.batch) == (dim, batch):
                return r
        raise KeyError((dim, batch))

    def to_dict(self) -> dict:
        return {
            "repetitions": self.repetitions,
            "n_layers": self.n_layers,
            "seed": self.seed,
            "rows": [asdict(r) for r in self.rows],
        }


def analytic_metric(mlp, Z):
    out = []
    for z in Z:
        _, stack = module_derivatives(mlp, z, order=2)
        out.append((pullback_metric(stack.J), metric_derivative(stack)))
    return out


def numeric_metric(mlp, Z, cfg: FdConfig | None = None):
    return [fd_metric_with_derivative(mlp, z, cfg) for z in Z]


def _timed(fn, repetitions):
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        result = fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times)), result


def _peak(fn) -> int:
    tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        fn()
        return int(tracemalloc.get_traced_memory()[1])
    finally:
        tracemalloc.stop()


def bench(dims=(2, 4, 8), batches=(1, 10, 30), repetitions: int = 3, n_layers: int = 3, seed: int = 0) -> BenchReport:
    """Time and peak transient allocation of g and dg at ``batch`` points per ``dim``.

    Both pipelines run on the same points; the metric values must agree within
    1e-4 relative or the run is rejected, so a fast but wrong path cannot win.
    """
    if any(d < 2 for d in dims):
        raise ValueError("dims must be at least 2")
    if repetitions < 1:
        raise ValueError("repetitions must be positive")
    rows = []
    for dim in dims:
        rng = np.random.default_rng([seed, dim])
        mlp = init_conditioned(dim, n_layers, rng)
        for batch in batches:
            Z = 0.5 * rng.normal(size=(batch, dim))
            ta, ana = _timed(lambda: analytic_metric(mlp, Z), repetitions)
            tn, num = _timed(lambda: numeric_metric(mlp, Z), repetitions)
            g_err = max(compare_tensors("g", a[0], n[0], METRIC_GUARD).max_rel_err for a, n in zip(ana, num))
            dg_err = max(compare_tensors("dg", a[1], n[1], METRIC_GUARD).max_rel_err for a, n in zip(ana, num))
            if g_err > METRIC_GUARD:
                raise RuntimeError(f"metric mismatch {g_err:.3g} at dim {dim}, batch {batch}")
            pa = _peak(lambda: analytic_metric(mlp, Z))
            pn = _peak(lambda: numeric_metric(mlp, Z))
            rows.append(BenchRow(dim, batch, ta, tn, pa, pn, tn / ta, pn / pa, g_err, dg_err))
    return BenchReport(rows, repetitions, n_layers, seed)
