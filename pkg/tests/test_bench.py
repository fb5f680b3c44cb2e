import numpy as np

from gear.bench import bench


def test_bench_rows_and_consistency():
    rep = bench(dims=(2, 3), batches=(1, 2), repetitions=1, n_layers=2)
    assert len(rep.rows) == 4
    for r in rep.rows:
        assert r.analytic_time > 0 and r.numeric_time > 0
        assert r.analytic_peak_bytes > 0 and r.numeric_peak_bytes > 0
        assert np.isclose(r.time_ratio, r.numeric_time / r.analytic_time)
        assert np.isclose(r.memory_ratio, r.numeric_peak_bytes / r.analytic_peak_bytes)
        assert r.g_max_rel_err <= 1e-4
    assert rep.row(3, 2).dim == 3
    d = rep.to_dict()
    assert list(d["rows"][0]) == ["dim", "batch", "analytic_time", "numeric_time", "analytic_peak_bytes",
                                  "numeric_peak_bytes", "time_ratio", "memory_ratio", "g_max_rel_err", "dg_max_rel_err"]


def test_bench_rejects_small_dims():
    import pytest

    with pytest.raises(ValueError):
        bench(dims=(1,))
