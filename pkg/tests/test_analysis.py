import math

import numpy as np
import pytest

from revft.analysis import (
    SWEEP_COLUMNS,
    TOLERANCES,
    Check,
    GradReport,
    ReconConfig,
    SweepSpec,
    finite_diff_grad,
    gradcheck_blocks,
    gradcheck_meft,
    memory_ledger_capture,
    reconstruction_error_report,
    relative_error,
    roundtrip_error,
    sweep_run,
    worker_threads,
)
from revft.exceptions import NonFiniteError
from revft.model import ModelDims, SegmentPlan, assemble_model
from revft.reversible import MeftKind
from revft.tensor import make_rng

TINY = ReconConfig(d_model=8, heads=2, r=2, batch=1, seq_len=4)


# --- finite differences ----------------------------------------------------


def test_fd_of_square():
    w = np.array([3.0])
    g = finite_diff_grad(lambda: float(w[0] ** 2), {"w": w})
    assert g["w"][0] == pytest.approx(6.0, abs=1e-9)
    assert w[0] == 3.0  # restored


def test_fd_of_constant_and_cubic():
    w = np.array([[1.0, -2.0], [0.5, 0.0]])
    assert not finite_diff_grad(lambda: 4.0, {"w": w})["w"].any()
    g = finite_diff_grad(lambda: float(np.sum(w**3)), {"w": w})["w"]
    # central differences on a cubic are off by exactly eps^2
    np.testing.assert_allclose(g, 3 * w**2 + 1e-10, atol=1e-9)


def test_fd_requires_double_and_finite_loss():
    with pytest.raises(TypeError):
        finite_diff_grad(lambda: 0.0, {"w": np.zeros(2, dtype=np.float32)})
    with pytest.raises(ValueError):
        finite_diff_grad(lambda: 0.0, {"w": np.zeros(2)}, epsilon=0.0)
    w = np.zeros(1)
    with pytest.raises(NonFiniteError):
        finite_diff_grad(lambda: math.inf if w[0] > 0 else 0.0, {"w": w})


def test_relative_error():
    a = {"x": np.array([1.0, 0.0]), "y": np.array([3.0, 4.0])}
    n = {"x": np.array([1.0, 0.0]), "y": np.array([3.0, 4.5])}
    assert relative_error(a, n) == pytest.approx(0.5 / np.linalg.norm([3.0, 4.5]))
    assert relative_error({"z": np.zeros(3)}, {"z": np.zeros(3)}) == 0.0
    # rounding-level noise on a gradient that is zero in exact arithmetic
    assert relative_error({"z": np.array([3e-18])}, {"z": np.zeros(1)}) < 1e-7


def test_check_line_and_nan():
    assert Check("a", 1e-7, 1e-6).passed
    assert Check("a", 1e-7, 1e-6).line().startswith("PASS a:")
    assert not Check("b", 2e-6, 1e-6).passed
    assert not Check("c", float("nan"), 1.0).passed


def test_grad_report_invariants():
    a = {"p": np.array([1.0, 2.0]), "q": np.array([[0.5]])}
    b = {"p": np.array([1.5, 2.0]), "q": np.array([[0.25]])}
    rep = GradReport.compare(a, b)
    assert rep.max_abs == 0.5 and rep.n_params == 3
    assert rep.mean_abs == pytest.approx(0.25)
    assert rep.max_abs >= rep.mean_abs


# --- gradcheck suites ------------------------------------------------------


def test_block_gradchecks_pass():
    checks = gradcheck_blocks(seed=3)
    names = {c.name for c in checks}
    assert {"adapter", "embedding", "head_classify"} <= names
    for c in checks:
        assert c.passed, c.line()


@pytest.mark.parametrize("kind", list(MeftKind))
def test_meft_gradchecks_pass(kind):
    for c in gradcheck_meft(kind, seed=1):
        assert c.passed, c.line()


# --- reconstruction error --------------------------------------------------


@pytest.mark.parametrize("prec", ["single", "double"])
def test_unit_scaling_equivalence_and_roundtrip(prec):
    cfg = ReconConfig(depth=4, d_model=16, precision=prec, lam=1.0, beta=1.0)
    rep = reconstruction_error_report(cfg, 0, probe="all")
    assert rep.max_abs <= TOLERANCES[f"grad_equiv_{prec}"]
    assert roundtrip_error(cfg, 0) <= TOLERANCES[f"roundtrip_{prec}"]


def test_error_larger_at_small_scaling():
    big = reconstruction_error_report(ReconConfig(depth=4, d_model=16, lam=1.0, beta=1.0), 0).max_abs
    small = reconstruction_error_report(ReconConfig(depth=4, d_model=16, lam=0.5, beta=0.5), 0).max_abs
    assert small > big


def test_sigma_raises_error():
    lo = [reconstruction_error_report(ReconConfig(depth=8, sigma=0.02), s).max_abs for s in range(2)]
    hi = [reconstruction_error_report(ReconConfig(depth=8, sigma=0.2), s).max_abs for s in range(2)]
    assert np.mean(hi) > np.mean(lo)


# --- sweeps ----------------------------------------------------------------


def test_sweep_cell_order_and_beta_tie():
    spec = SweepSpec(depth=(2, 4), lam=(1.0, 0.5), beta=None, seeds=(0, 1, 2), base=TINY)
    cells = list(spec.cells())
    assert len(cells) == 12
    assert [(c.depth, c.lam, s) for c, s in cells[:4]] == [(2, 1.0, 0), (2, 1.0, 1), (2, 1.0, 2), (2, 0.5, 0)]
    assert all(c.beta == c.lam for c, _ in cells)
    spec2 = SweepSpec(depth=(2,), lam=(1.0,), beta=(0.5, 0.25), seeds=(0,), base=TINY)
    assert [c.beta for c, _ in spec2.cells()] == [0.5, 0.25]
    with pytest.raises(ValueError):
        SweepSpec(depth=())


def test_sweep_deterministic_and_thread_independent():
    spec = SweepSpec(depth=(2, 4), lam=(1.0, 0.5), beta=None, seeds=(0, 1, 2), base=TINY)
    a = [r.as_record() for r in sweep_run(spec, threads=1)]
    b = [r.as_record() for r in sweep_run(spec, threads=3)]
    assert len(a) == 12
    assert a == b
    assert set(a[0]) == set(SWEEP_COLUMNS)


def test_sweep_marks_degenerate_cell_and_continues():
    spec = SweepSpec(depth=(2,), lam=(0.0, 1.0), beta=None, seeds=(0,), base=TINY)
    bad, good = sweep_run(spec)
    assert bad.error.startswith("ScalingDegenerate:")
    assert "ScalingDegenerate: ScalingDegenerate" not in bad.error
    assert math.isnan(bad.as_record()["max_abs"])
    assert good.error is None and good.report.max_abs < 1e-6


def test_worker_threads_env(monkeypatch):
    monkeypatch.setenv("REVFT_THREADS", "4")
    assert worker_threads() == 4
    monkeypatch.setenv("REVFT_THREADS", "zero")
    assert worker_threads() == 1
    monkeypatch.delenv("REVFT_THREADS")
    assert worker_threads() == 1


# --- memory ----------------------------------------------------------------


def test_vanilla_cache_bytes_scale_with_depth():
    dims = ModelDims(vocab=8, max_len=8, d_model=16, heads=4)
    toks = make_rng(0).integers(0, 8, size=(2, 8))

    def caches(depth, mode):
        m = assemble_model(SegmentPlan(0, depth, 0), MeftKind.MEFT2, dims, r=2, rng=make_rng(0))
        return memory_ledger_capture(m, toks, mode).persistent_bytes

    v2, v4 = caches(2, "vanilla"), caches(4, "vanilla")
    assert v4["vanilla_caches"] == 2 * v2["vanilla_caches"]
    r2, r4 = caches(2, "reversible"), caches(4, "reversible")
    assert r2["reversible_boundary"] == r4["reversible_boundary"] == 2 * 2 * 8 * 16 * 8
    assert r2["vanilla_caches"] == r4["vanilla_caches"] == 0
