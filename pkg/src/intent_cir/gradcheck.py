"""Finite-difference verification of every training loss through the composer.

Each case builds a seeded toy composer and batch, evaluates one loss (or the
weighted total) with ``total_loss`` and compares every parameter gradient with
central differences.  An element passes when its absolute error is below the
floor or its relative error ``|a - n| / max(|a|, |n|)`` is below the limit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import composer as cmp
from .objectives import AblationToggles, Batch, LossWeights, total_loss

REL_TOL = 1e-3
ABS_FLOOR = 1e-7

# loss name -> (weights, toggles) isolating that term
LOSS_SETUPS = {
    "robust": (LossWeights(mu=0.0, alpha=0.0), AblationToggles(enable_sod=False, enable_vic=False)),
    "sod": (LossWeights(mu=1.0, alpha=0.0), AblationToggles(enable_robust=False, enable_vic=False)),
    "caco": (LossWeights(mu=0.0, alpha=1.0), AblationToggles(enable_robust=False, enable_sod=False)),
    "total": (LossWeights(), AblationToggles()),
}


@dataclass(frozen=True)
class GradCheckResult:
    loss: str
    batch_size: int
    parameter: str
    max_abs_err: float
    max_rel_err: float
    passed: bool


def central_difference(f, x: np.ndarray, eps: float) -> np.ndarray:
    """Numerical gradient of scalar ``f()`` w.r.t. ``x``, perturbing ``x`` in place."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + eps
        up = f()
        x[i] = orig - eps
        down = f()
        x[i] = orig
        g[i] = (up - down) / (2.0 * eps)
    return g


def compare(analytic: np.ndarray, numeric: np.ndarray, rel_tol: float = REL_TOL, abs_floor: float = ABS_FLOOR):
    """Return (max abs error, max relative error among entries above the floor, pass flag)."""
    err = np.abs(analytic - numeric)
    rel = err / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), abs_floor)
    rel = np.where(err > abs_floor, rel, 0.0)
    return float(err.max(initial=0.0)), float(rel.max(initial=0.0)), bool(np.all(rel < rel_tol))


def random_instance(batch_size: int, seed: int, n_queries: int = 3, dim: int = 4, image_size: int = 16, vocab_size: int = 17):
    """Seeded composer parameters plus a batch with counterfactuals."""
    rng = np.random.default_rng(seed)
    cfg = cmp.ComposerConfig(
        image_size=image_size, patch_size=8, vocab_size=vocab_size, n_queries=n_queries, dim=dim, hidden=6, seed=seed
    )
    params = cmp.ComposerParams.init(cfg)
    # spread the features so the softmax terms are away from uniform
    params = cmp.ComposerParams(cfg, {n: a * 3.0 for n, a in params.arrays.items()})
    shape = (batch_size, image_size, image_size, 3)
    tokens = [tuple(int(v) for v in rng.choice(vocab_size, size=rng.integers(1, 4), replace=False)) for _ in range(batch_size)]
    batch = Batch(rng.uniform(size=shape), tokens, rng.uniform(size=shape), rng.uniform(size=shape))
    return params, batch


def check_loss(
    loss: str, batch_size: int, seed: int = 0, tau: float = 0.07, eps: float = 1e-6, n_queries: int = 3, dim: int = 4
) -> list[GradCheckResult]:
    weights, toggles = LOSS_SETUPS[loss]
    params, batch = random_instance(batch_size, seed, n_queries, dim)
    analytic = total_loss(batch, params, weights, toggles, tau).grads
    value = lambda: total_loss(batch, params, weights, toggles, tau, with_grads=False).total  # noqa: E731
    out = []
    for name in cmp.PARAM_NAMES:
        numeric = central_difference(value, params.arrays[name], eps)
        abs_err, rel_err, ok = compare(analytic[name], numeric)
        out.append(GradCheckResult(loss, batch_size, name, abs_err, rel_err, ok))
    return out


def run_suite(batch_sizes=(2, 3, 4), losses=tuple(LOSS_SETUPS), seed: int = 0, n_queries: int = 3, dim: int = 4):
    """All (loss, B, parameter) cases; returns (results, elapsed seconds)."""
    t0 = time.perf_counter()
    results = []
    for loss in losses:
        for b in batch_sizes:
            results.extend(check_loss(loss, b, seed=seed + b, n_queries=n_queries, dim=dim))
    return results, time.perf_counter() - t0


def format_results(results: list[GradCheckResult]) -> list[str]:
    return [
        f"{'ok  ' if r.passed else 'FAIL'} loss={r.loss} B={r.batch_size} param={r.parameter} "
        f"abs={r.max_abs_err:.2e} rel={r.max_rel_err:.2e}"
        for r in results
    ]
