import numpy as np

from intent_cir import gradcheck as gc


def test_central_difference_on_cubic():
    x = np.array([0.5, -1.0, 2.0])
    g = gc.central_difference(lambda: float((x**3).sum()), x, 1e-5)
    assert np.allclose(g, 3 * x**2, rtol=1e-8)
    assert np.array_equal(x, [0.5, -1.0, 2.0])  # restored after perturbation


def test_compare_floor_and_tolerance():
    assert gc.compare(np.array([1e-9, 1.0]), np.array([5e-8, 1.0]))[2]  # below the absolute floor
    assert not gc.compare(np.array([1.0]), np.array([1.01]))[2]
    abs_err, rel_err, ok = gc.compare(np.array([1.0, 2.0]), np.array([1.0 + 5e-4, 2.0]))
    assert ok and abs(abs_err - 5e-4) < 1e-12 and 0 < rel_err < 1e-3


def test_single_loss_case_passes():
    results = gc.check_loss("sod", 2, seed=1)
    assert len(results) == 8 and all(r.passed for r in results)


def test_check_detects_a_wrong_gradient(monkeypatch):
    real = gc.total_loss

    def skewed(*args, **kwargs):
        out = real(*args, **kwargs)
        if kwargs.get("with_grads", True):
            out.grads["b2"] = out.grads["b2"] * 1.1
        return out

    monkeypatch.setattr(gc, "total_loss", skewed)
    results = {r.parameter: r.passed for r in gc.check_loss("robust", 2, seed=0)}
    assert not results["b2"] and results["w1"]


def test_format_results():
    lines = gc.format_results([gc.GradCheckResult("sod", 2, "w1", 1e-9, 2e-6, True)])
    assert lines == ["ok   loss=sod B=2 param=w1 abs=1.00e-09 rel=2.00e-06"]
