"""Consistency, contrastive and loyalty-degree objectives with analytic gradients.

Conventions: ``composed`` and ``targets`` are ``(B, D)`` pooled unit vectors,
so their dot product is the cosine similarity. Feature batches for the
consistency terms are ``(B, Q, D)``. Every loss returns its value together
with gradients with respect to its array inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import composer as cmp

EPS = 1e-8
CACO_METRICS = ("cka", "mse", "l1", "l2")


@dataclass(frozen=True)
class LossWeights:
    mu: float = 0.2
    alpha: float = 0.6

    def __post_init__(self):
        if not (np.isfinite(self.mu) and np.isfinite(self.alpha)) or self.mu < 0 or self.alpha < 0:
            raise ValueError(f"loss weights must be finite and non-negative, got mu={self.mu}, alpha={self.alpha}")


@dataclass(frozen=True)
class AblationToggles:
    enable_vic: bool = True
    enable_pwr: bool = True
    enable_nwr: bool = True
    enable_robust: bool = True
    mask_diagonal: bool = True
    enable_sod: bool = True
    caco_metric: str = "cka"
    literal_robust: bool = False  # debug: summand exactly as typeset (positive probability)
    stop_reward_grad: bool = False

    def __post_init__(self):
        if self.caco_metric not in CACO_METRICS:
            raise ValueError(f"unknown caco metric {self.caco_metric!r}; expected one of {CACO_METRICS}")


# ---------------------------------------------------------------------------
# Causal consistency
# ---------------------------------------------------------------------------


def gram(feature: np.ndarray) -> np.ndarray:
    return feature @ np.swapaxes(feature, -1, -2)


def centering_matrix(q: int) -> np.ndarray:
    return np.eye(q) - np.full((q, q), 1.0 / q)


def center_gram(k: np.ndarray) -> np.ndarray:
    h = centering_matrix(k.shape[-1])
    return h @ k @ h


@dataclass
class ConsistencyResult:
    value: float
    grad_f: np.ndarray
    grad_fhat: np.ndarray
    degenerate: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def cka_loss(batch_f: np.ndarray, batch_fhat: np.ndarray) -> ConsistencyResult:
    """Mean over the batch of ``1 - <Kc, Lc>_F / (|Kc|_F |Lc|_F + eps)``.

    A sample whose centred Gram matrix vanishes on either side carries no
    structure to align: it contributes exactly 1, no gradient, and is flagged
    in ``degenerate``.
    """
    f = np.asarray(batch_f, dtype=np.float64)
    fh = np.asarray(batch_fhat, dtype=np.float64)
    if f.shape != fh.shape or f.ndim != 3:
        raise ValueError(f"expected two (B, Q, D) batches of equal shape, got {f.shape} and {fh.shape}")
    b, q, _ = f.shape
    h = centering_matrix(q)
    kc = h @ gram(f) @ h
    lc = h @ gram(fh) @ h
    inner = np.einsum("bij,bij->b", kc, lc)
    nk = np.sqrt(np.einsum("bij,bij->b", kc, kc))
    nl = np.sqrt(np.einsum("bij,bij->b", lc, lc))
    degenerate = (nk < 1e-12) | (nl < 1e-12)
    den = nk * nl + EPS
    per_sample = np.where(degenerate, 1.0, 1.0 - inner / den)

    live = (~degenerate)[:, None, None] / b
    nk_safe = np.where(degenerate, 1.0, nk)[:, None, None]
    nl_safe = np.where(degenerate, 1.0, nl)[:, None, None]
    den3, inner3 = den[:, None, None], inner[:, None, None]
    d_kc = -(lc / den3 - inner3 * nl_safe * kc / (nk_safe * den3**2)) * live
    d_lc = -(kc / den3 - inner3 * nk_safe * lc / (nl_safe * den3**2)) * live
    # K = F F^T with symmetric upstream gradient G: dF = 2 G F; centring is H G H
    grad_f = 2.0 * (h @ d_kc @ h) @ f
    grad_fh = 2.0 * (h @ d_lc @ h) @ fh
    return ConsistencyResult(float(per_sample.mean()), grad_f, grad_fh, degenerate)


def caco_variant(batch_f: np.ndarray, batch_fhat: np.ndarray, metric: str = "cka") -> ConsistencyResult:
    f = np.asarray(batch_f, dtype=np.float64)
    fh = np.asarray(batch_fhat, dtype=np.float64)
    if metric == "cka":
        return cka_loss(f, fh)
    if f.shape != fh.shape or f.ndim != 3:
        raise ValueError(f"expected two (B, Q, D) batches of equal shape, got {f.shape} and {fh.shape}")
    diff = fh - f
    if metric == "mse":
        value = float(np.mean(diff**2))
        g = 2.0 * diff / diff.size
    elif metric == "l1":
        value = float(np.mean(np.abs(diff)))
        g = np.sign(diff) / diff.size
    elif metric == "l2":
        norms = np.sqrt(np.einsum("bqd,bqd->b", diff, diff))
        value = float(norms.mean())
        safe = np.where(norms > 0, norms, 1.0)[:, None, None]
        g = np.where(norms[:, None, None] > 0, diff / safe, 0.0) / f.shape[0]
    else:
        raise ValueError(f"unknown caco metric {metric!r}; expected one of {CACO_METRICS}")
    return ConsistencyResult(value, -g, g, np.zeros(f.shape[0], dtype=bool))


# ---------------------------------------------------------------------------
# Similarity, robust contrastive loss
# ---------------------------------------------------------------------------


def _check_tau(tau: float):
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")


def row_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    return p * (dp - (dp * p).sum(axis=1, keepdims=True))


def cosine_matrix(composed: np.ndarray, targets: np.ndarray) -> np.ndarray:
    return np.asarray(composed, dtype=np.float64) @ np.asarray(targets, dtype=np.float64).T


def similarity_matrix(composed: np.ndarray, targets: np.ndarray, tau: float = 0.07) -> np.ndarray:
    _check_tau(tau)
    if len(composed) < 2:
        raise ValueError("similarity matrix needs a batch of at least 2")
    return row_softmax(cosine_matrix(composed, targets) / tau)


@dataclass
class PairLossResult:
    value: float
    grad_composed: np.ndarray
    grad_targets: np.ndarray
    p_plus: np.ndarray | None = None
    p_minus: np.ndarray | None = None


def _logit_grads(d_logits: np.ndarray, composed: np.ndarray, targets: np.ndarray, tau: float):
    d_raw = d_logits / tau
    return d_raw @ targets, d_raw.T @ composed


def robust_contrastive_loss(
    composed: np.ndarray,
    targets: np.ndarray,
    tau: float = 0.07,
    mask_diagonal: bool = True,
    literal: bool = False,
) -> PairLossResult:
    """``-(1/B) sum_i sum_{j in J_i} log(1 - p_ij)`` with ``J_i`` the negatives of row i.

    ``mask_diagonal=False`` also penalises the positive. ``literal=True`` uses
    the positive probability ``p_ii`` in every summand (kept for comparison).
    """
    _check_tau(tau)
    c = np.asarray(composed, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    b = c.shape[0]
    if b < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    p = row_softmax(c @ t.T / tau)
    sel = ~np.eye(b, dtype=bool) if mask_diagonal else np.ones((b, b), dtype=bool)
    if literal:
        diag = np.diag(p)
        counts = sel.sum(axis=1)
        arg = 1.0 - diag
        live = arg > EPS
        value = -float((counts * np.log(np.maximum(arg, EPS))).sum()) / b
        dp = np.zeros_like(p)
        dp[np.diag_indices(b)] = np.where(live, counts / (b * np.where(live, arg, 1.0)), 0.0)
    else:
        arg = 1.0 - p
        live = sel & (arg > EPS)
        value = -float(np.log(np.maximum(arg, EPS))[sel].sum()) / b
        dp = np.where(live, 1.0 / (b * np.where(live, arg, 1.0)), 0.0)
    dc, dt = _logit_grads(softmax_backward(p, dp), c, t, tau)
    return PairLossResult(value, dc, dt)


# ---------------------------------------------------------------------------
# Matching likelihoods, rewards, loyalty, soft discriminative loss
# ---------------------------------------------------------------------------


def check_pseudo_labels(y: np.ndarray, b: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (b, b) or not np.all((y == 0) | (y == 1)) or not np.all(y.sum(axis=1) == 1):
        raise ValueError("pseudo-label matrix must be BxB 0/1 with exactly one 1 per row")
    return y


def matching_likelihoods(s: np.ndarray, y: np.ndarray | None = None):
    """Row-wise max positive / max negative similarity and their argmax columns."""
    s = np.asarray(s, dtype=np.float64)
    y = np.eye(len(s)) if y is None else check_pseudo_labels(y, len(s))
    pos, neg = s * y, s * (1.0 - y)
    a_plus, a_minus = pos.argmax(axis=1), neg.argmax(axis=1)
    rows = np.arange(len(s))
    return pos[rows, a_plus], neg[rows, a_minus], a_plus, a_minus


@dataclass
class Loyalty:
    s: np.ndarray
    n: np.ndarray
    r: np.ndarray
    raw: np.ndarray
    l: np.ndarray
    p_plus: np.ndarray
    p_minus: np.ndarray
    a_plus: np.ndarray
    a_minus: np.ndarray
    y: np.ndarray


def loyalty(s: np.ndarray, y: np.ndarray | None = None, enable_pwr: bool = True, enable_nwr: bool = True) -> Loyalty:
    s = np.asarray(s, dtype=np.float64)
    y = np.eye(len(s)) if y is None else check_pseudo_labels(y, len(s))
    p_plus, p_minus, a_plus, a_minus = matching_likelihoods(s, y)
    n = (1.0 - p_plus)[:, None] * (1.0 - y) if enable_nwr else np.zeros_like(s)
    r = (1.0 - p_minus)[:, None] * y if enable_pwr else np.zeros_like(s)
    raw = (s + n + r) / 2.0
    return Loyalty(s, n, r, raw, np.clip(raw, EPS, 1.0), p_plus, p_minus, a_plus, a_minus, y)


def loyalty_matrix(s: np.ndarray, y: np.ndarray | None = None, enable_pwr: bool = True, enable_nwr: bool = True) -> np.ndarray:
    return loyalty(s, y, enable_pwr, enable_nwr).l


def soft_discriminative_from_similarity(
    s: np.ndarray,
    y: np.ndarray | None = None,
    enable_pwr: bool = True,
    enable_nwr: bool = True,
    stop_reward_grad: bool = False,
) -> tuple[float, np.ndarray, Loyalty]:
    """Loss value, gradient w.r.t. the similarity matrix, and the loyalty breakdown.

    Gradients pass through the rewards via the row maxima (subgradient on the
    first argmax) unless ``stop_reward_grad``; clamped loyalty entries pass none.
    """
    lo = loyalty(s, y, enable_pwr, enable_nwr)
    b = len(lo.s)
    y = lo.y
    value = -float((y * np.log(lo.l)).sum()) / b
    inside = (lo.raw > EPS) & (lo.raw < 1.0)
    d_raw = np.where(inside, -y / (b * lo.l), 0.0)
    ds = d_raw / 2.0
    if not stop_reward_grad:
        rows = np.arange(b)
        if enable_nwr:
            d_pplus = -(d_raw / 2.0 * (1.0 - y)).sum(axis=1)
            np.add.at(ds, (rows, lo.a_plus), d_pplus)
        if enable_pwr:
            d_pminus = -(d_raw / 2.0 * y).sum(axis=1)
            np.add.at(ds, (rows, lo.a_minus), d_pminus)
    return value, ds, lo


def soft_discriminative_loss(l: np.ndarray, y: np.ndarray | None = None) -> float:
    """Loss value from an already-built loyalty matrix."""
    l = np.asarray(l, dtype=np.float64)
    y = np.eye(len(l)) if y is None else check_pseudo_labels(y, len(l))
    return -float((y * np.log(np.clip(l, EPS, 1.0))).sum()) / len(l)


def sod_loss(
    composed: np.ndarray,
    targets: np.ndarray,
    tau: float = 0.07,
    enable_pwr: bool = True,
    enable_nwr: bool = True,
    stop_reward_grad: bool = False,
) -> PairLossResult:
    c = np.asarray(composed, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    s = similarity_matrix(c, t, tau)
    value, ds, lo = soft_discriminative_from_similarity(s, None, enable_pwr, enable_nwr, stop_reward_grad)
    dc, dt = _logit_grads(softmax_backward(s, ds), c, t, tau)
    return PairLossResult(value, dc, dt, lo.p_plus, lo.p_minus)


# ---------------------------------------------------------------------------
# Full objective through the composer
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    references: np.ndarray  # (B, H, W, C)
    tokens: list
    targets: np.ndarray  # (B, H, W, C)
    counterfactuals: np.ndarray | None = None


@dataclass
class LossBreakdown:
    total: float
    robust: float
    sod: float
    caco: float
    p_plus_mean: float
    p_minus_mean: float
    grads: dict
    component_grads: dict | None = None
    caco_degenerate: int = 0


def total_loss(
    batch: Batch,
    params: cmp.ComposerParams,
    weights: LossWeights = LossWeights(),
    toggles: AblationToggles = AblationToggles(),
    tau: float = 0.07,
    with_components: bool = False,
    with_grads: bool = True,
) -> LossBreakdown:
    """``robust + mu * sod + alpha * caco`` and its parameter gradients."""
    pool_mode = params.config.pool
    f_c, cache_c = cmp.forward(params, batch.references, batch.tokens)
    f_t, cache_t = cmp.forward(params, batch.targets, [()] * len(batch.targets))
    c, pstate_c = cmp.pool_forward(f_c, pool_mode)
    t, pstate_t = cmp.pool_forward(f_t, pool_mode)
    zeros_c, zeros_t = np.zeros_like(f_c), np.zeros_like(f_t)

    parts = {}  # name -> (value, weight, dF_c, dF_t, dF_hat)
    if toggles.enable_robust:
        r = robust_contrastive_loss(c, t, tau, toggles.mask_diagonal, toggles.literal_robust)
        parts["robust"] = (r.value, 1.0, cmp.pool_backward(pstate_c, r.grad_composed), cmp.pool_backward(pstate_t, r.grad_targets), None)
    s_res = sod_loss(c, t, tau, toggles.enable_pwr, toggles.enable_nwr, toggles.stop_reward_grad)
    if toggles.enable_sod and weights.mu != 0:
        parts["sod"] = (s_res.value, weights.mu, cmp.pool_backward(pstate_c, s_res.grad_composed), cmp.pool_backward(pstate_t, s_res.grad_targets), None)
    degenerate = 0
    cache_h = None
    if toggles.enable_vic and weights.alpha != 0:
        if batch.counterfactuals is None:
            raise ValueError("consistency term enabled but the batch has no counterfactual images")
        f_h, cache_h = cmp.forward(params, batch.counterfactuals, batch.tokens)
        k = caco_variant(f_c, f_h, toggles.caco_metric)
        degenerate = int(k.degenerate.sum())
        parts["caco"] = (k.value, weights.alpha, k.grad_f, zeros_t, k.grad_fhat)

    def param_grads(names):
        d_c, d_t, d_h = zeros_c.copy(), zeros_t.copy(), None
        for name in names:
            _, w, gc, gt, gh = parts[name]
            d_c += w * gc
            d_t += w * gt
            if gh is not None:
                d_h = w * gh if d_h is None else d_h + w * gh
        grads = cmp.add_grads(cmp.backward(params, cache_c, d_c), cmp.backward(params, cache_t, d_t))
        if d_h is not None:
            cmp.add_grads(grads, cmp.backward(params, cache_h, d_h))
        return grads

    grads = param_grads(list(parts)) if with_grads else {}
    components = None
    if with_components:
        components = {name: param_grads([name]) for name in parts}
    value = lambda n: parts[n][0] if n in parts else 0.0  # noqa: E731
    total = sum(parts[n][0] * parts[n][1] for n in parts)
    return LossBreakdown(
        total=float(total),
        robust=value("robust"),
        sod=value("sod"),
        caco=value("caco"),
        p_plus_mean=float(s_res.p_plus.mean()),
        p_minus_mean=float(s_res.p_minus.mean()),
        grads=grads,
        component_grads=components,
        caco_degenerate=degenerate,
    )
