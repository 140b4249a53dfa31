"""Training loop: counterfactual generation, composition, loss assembly, updates."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import composer as cmp
from . import fourier
from .data import TripletDataset, subset_candidates
from .evaluation import rank_rows, recall_at_k, subset_recall_at_k, pooled_gallery, pooled_queries
from .objectives import AblationToggles, Batch, LossWeights, total_loss
from .objectives import cosine_matrix

log = logging.getLogger(__name__)

INTERVENTIONS = ("fft_mix", "random_mask", "patch_shuffle", "gaussian_blur", "grayscale", "none")
OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 10
    learning_rate: float = 0.003
    tau: float = 0.07
    weights: LossWeights = field(default_factory=LossWeights)
    lam_max: float = 1.0
    crop_ratio: float = 0.25
    intervention_op: str = "fft_mix"
    optimizer: str = "adam"
    weight_decay: float = 0.0
    seed: int = 0
    # composer shape
    n_queries: int = 8
    dim: int = 32
    hidden: int = 64
    patch_size: int = 8
    pool: str = "mean"
    # baseline intervention settings
    mask_patch: int = 8
    mask_fraction: float = 0.5
    shuffle_grid: int = 4
    blur_sigma: float = 1.5
    blur_radius: int = 4
    subset_size: int = 6

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (contrastive terms need negatives)")
        if self.epochs < 0 or self.learning_rate < 0:
            raise ValueError("epochs and learning_rate must be non-negative")
        if self.intervention_op not in INTERVENTIONS:
            raise ValueError(f"unknown intervention {self.intervention_op!r}; expected one of {INTERVENTIONS}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}; expected one of {OPTIMIZERS}")
        if not 0.0 <= self.lam_max <= 1.0:
            raise ValueError(f"lam_max must lie in [0, 1], got {self.lam_max}")

    def composer_config(self, image_size: int, channels: int, vocab_size: int) -> cmp.ComposerConfig:
        return cmp.ComposerConfig(
            image_size=image_size,
            channels=channels,
            patch_size=self.patch_size,
            vocab_size=vocab_size,
            n_queries=self.n_queries,
            dim=self.dim,
            hidden=self.hidden,
            pool=self.pool,
            seed=int(np.random.SeedSequence([self.seed, 0]).generate_state(1)[0]),
        )


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, state: dict):
        super().__init__(message)
        self.state = state


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


def _check_grads(params: cmp.ComposerParams, grads: dict):
    for name, a in params.arrays.items():
        if grads[name].shape != a.shape:
            raise ValueError(f"gradient shape mismatch for {name}: {grads[name].shape} vs {a.shape}")
        if not np.all(np.isfinite(grads[name])):
            raise ValueError(f"non-finite gradient for {name}")


def sgd_step(params: cmp.ComposerParams, grads: dict, learning_rate: float) -> cmp.ComposerParams:
    _check_grads(params, grads)
    return cmp.ComposerParams(params.config, {n: a - learning_rate * grads[n] for n, a in params.arrays.items()})


class Adam:
    """Adaptive-moment updates (bias corrected) with optional decoupled weight decay."""

    def __init__(
        self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0
    ):
        self.lr, self.beta1, self.beta2, self.eps = learning_rate, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m: dict | None = None
        self.v: dict | None = None
        self.t = 0

    def step(self, params: cmp.ComposerParams, grads: dict) -> cmp.ComposerParams:
        _check_grads(params, grads)
        if self.m is None:
            self.m = {n: np.zeros_like(a) for n, a in params.arrays.items()}
            self.v = {n: np.zeros_like(a) for n, a in params.arrays.items()}
        self.t += 1
        out = {}
        for n, a in params.arrays.items():
            self.m[n] = self.beta1 * self.m[n] + (1 - self.beta1) * grads[n]
            self.v[n] = self.beta2 * self.v[n] + (1 - self.beta2) * grads[n] ** 2
            m_hat = self.m[n] / (1 - self.beta1**self.t)
            v_hat = self.v[n] / (1 - self.beta2**self.t)
            out[n] = a - self.lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * a)
        return cmp.ComposerParams(params.config, out)


# ---------------------------------------------------------------------------
# Counterfactuals
# ---------------------------------------------------------------------------


def intervene(references: np.ndarray, config: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """One counterfactual per reference; distractors come from the other in-batch references."""
    b = len(references)
    op = config.intervention_op
    if op == "fft_mix":
        partners, lams = np.empty(b, dtype=np.int64), np.empty(b)
        for i in range(b):
            j = int(rng.integers(b - 1))
            partners[i] = j + (j >= i)
            lams[i] = rng.uniform(0.0, config.lam_max)
        return fourier.make_counterfactual_batch(references, references[partners], lams, config.crop_ratio)
    out = np.empty_like(references)
    for i in range(b):
        x = references[i]
        if op == "random_mask":
            out[i] = fourier.random_mask(x, config.mask_patch, config.mask_fraction, int(rng.integers(2**31)))
        elif op == "patch_shuffle":
            out[i] = fourier.patch_shuffle(x, config.shuffle_grid, int(rng.integers(2**31)))
        elif op == "gaussian_blur":
            out[i] = fourier.gaussian_blur(x, config.blur_sigma, config.blur_radius)
        elif op == "grayscale":
            out[i] = fourier.grayscale(x)
        else:
            out[i] = x
    return out


# ---------------------------------------------------------------------------
# Evaluation hook
# ---------------------------------------------------------------------------


def validation_metrics(params: cmp.ComposerParams, dataset: TripletDataset, subset_size: int = 6, subsets=None) -> dict:
    val = dataset.validation
    if not val:
        return {"R@1": float("nan"), "R@5": float("nan"), "R_sub@1": float("nan")}
    q = pooled_queries(params, np.stack([t.reference for t in val]), [t.tokens for t in val])
    g = pooled_gallery(params, dataset.gallery)
    rankings = rank_rows(cosine_matrix(q, g))
    truths = [t.true_target_index for t in val]
    k5 = min(5, rankings.shape[1])
    if subsets is None:
        subsets = subset_candidates(dataset, min(subset_size, len(dataset.gallery)))
    return {
        "R@1": recall_at_k(rankings, truths, 1),
        "R@5": recall_at_k(rankings, truths, k5),
        "R_sub@1": subset_recall_at_k(rankings, subsets, truths, 1),
    }


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


STEP_FIELDS = ("epoch", "step", "L_robust", "L_sod", "L_caco", "total", "mean_p_plus", "mean_p_minus")
EPOCH_FIELDS = ("epoch", "step", "L_robust", "L_sod", "L_caco", "total", "R@1", "R@5", "R_sub@1")


@dataclass
class TrainResult:
    params: cmp.ComposerParams
    initial_params: cmp.ComposerParams
    step_log: list = field(default_factory=list)
    epoch_log: list = field(default_factory=list)
    final_metrics: dict = field(default_factory=dict)
    runtime_s: float = 0.0


def init_params(dataset: TripletDataset, config: TrainConfig) -> cmp.ComposerParams:
    size = dataset.config.image_size
    channels = dataset.gallery.shape[-1]
    return cmp.ComposerParams.init(config.composer_config(size, channels, dataset.config.cards.vocab_size))


def train(
    dataset: TripletDataset,
    config: TrainConfig = TrainConfig(),
    toggles: AblationToggles = AblationToggles(),
    eval_every_epoch: bool = True,
    dump_dir: str | Path | None = None,
) -> TrainResult:
    n = len(dataset.triplets)
    if n < config.batch_size:
        raise ValueError(f"dataset has {n} training triplets, fewer than batch_size={config.batch_size}")
    t0 = time.perf_counter()
    params = init_params(dataset, config)
    result = TrainResult(params=params, initial_params=params.copy())
    data_seq, aug_seq = np.random.SeedSequence([config.seed, 1]), np.random.SeedSequence([config.seed, 2])
    data_rng, aug_rng = np.random.default_rng(data_seq), np.random.default_rng(aug_seq)
    adam = Adam(config.learning_rate, weight_decay=config.weight_decay) if config.optimizer == "adam" else None
    refs = np.stack([t.reference for t in dataset.triplets])
    targets = np.stack([t.target for t in dataset.triplets])
    tokens = [t.tokens for t in dataset.triplets]
    need_cf = toggles.enable_vic and config.weights.alpha != 0
    subsets = subset_candidates(dataset, min(config.subset_size, len(dataset.gallery))) if dataset.validation else None
    step = 0
    for epoch in range(config.epochs):
        order = data_rng.permutation(n)
        sums = np.zeros(4)
        n_batches = n // config.batch_size
        for b in range(n_batches):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            batch = Batch(refs[idx], [tokens[i] for i in idx], targets[idx])
            if need_cf:
                batch.counterfactuals = intervene(batch.references, config, aug_rng)
            out = total_loss(batch, params, config.weights, toggles, config.tau)
            row = dict(zip(STEP_FIELDS, (epoch, step, out.robust, out.sod, out.caco, out.total, out.p_plus_mean, out.p_minus_mean)))
            if not np.isfinite(out.total) or not all(np.all(np.isfinite(g)) for g in out.grads.values()):
                state = {"row": row, "config": asdict(config), "toggles": asdict(toggles), "batch_indices": idx.tolist()}
                if dump_dir is not None:
                    Path(dump_dir).mkdir(parents=True, exist_ok=True)
                    (Path(dump_dir) / "diverged.json").write_text(json.dumps(state, default=str, indent=2))
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}", state)
            result.step_log.append(row)
            sums += (out.robust, out.sod, out.caco, out.total)
            params = (adam.step(params, out.grads) if adam else sgd_step(params, out.grads, config.learning_rate)).snapped()
            step += 1
        means = sums / max(n_batches, 1)
        metrics = validation_metrics(params, dataset, config.subset_size, subsets) if eval_every_epoch or epoch == config.epochs - 1 else {}
        result.epoch_log.append(
            dict(zip(EPOCH_FIELDS, (epoch, step, *means, metrics.get("R@1"), metrics.get("R@5"), metrics.get("R_sub@1"))))
        )
        log.debug("epoch %d total=%.4f R@1=%s", epoch, means[3], metrics.get("R@1"))
    result.params = params
    result.final_metrics = validation_metrics(params, dataset, config.subset_size, subsets)
    result.runtime_s = time.perf_counter() - t0
    return result


def write_log_csv(path: str | Path, rows: list, fields: tuple) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for row in rows:
            w.writerow(["" if row[f] is None else repr(row[f]) if isinstance(row[f], float) else row[f] for f in fields])
