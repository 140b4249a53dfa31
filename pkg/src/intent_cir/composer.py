"""A small attention composer with hand-written reverse-mode gradients.

Forward pass for a batch of images and (padded) token sequences::

    patches   = patchify(image) - 0.5                   (B, P, p*p*C)
    keys      = [patches @ W_patch + pos ; tok_emb[tokens]]  (B, M, D)
    attn      = softmax(queries @ keys^T / sqrt(D))      (B, Q, M)   padded tokens masked
    z         = attn @ keys                              (B, Q, D)
    out       = z + tanh(z @ W1 + b1) @ W2 + b2           (B, Q, D)

Targets are encoded with an empty token sequence. All arithmetic is float64;
parameters are kept float32-representable so checkpoints reload bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

PARAM_NAMES = ("patch_proj", "pos_emb", "tok_emb", "queries", "w1", "b1", "w2", "b2")
CHECKPOINT_MAGIC = b"ICKP"
PIXEL_CENTER = 0.5  # background grey maps to the zero vector


@dataclass(frozen=True)
class ComposerConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 8
    vocab_size: int = 17
    n_queries: int = 8
    dim: int = 32
    hidden: int = 64
    pool: str = "mean"
    seed: int = 0

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def shapes(self) -> dict[str, tuple[int, ...]]:
        d = self.dim
        return {
            "patch_proj": (self.patch_dim, d),
            "pos_emb": (self.n_patches, d),
            "tok_emb": (self.vocab_size, d),
            "queries": (self.n_queries, d),
            "w1": (d, self.hidden),
            "b1": (self.hidden,),
            "w2": (self.hidden, d),
            "b2": (d,),
        }


class ComposerParams:
    """Named parameter arrays plus the config that fixes their shapes."""

    def __init__(self, config: ComposerConfig, arrays: dict[str, np.ndarray]):
        self.config = config
        shapes = config.shapes()
        for name in PARAM_NAMES:
            if arrays[name].shape != shapes[name]:
                raise ValueError(f"{name}: expected shape {shapes[name]}, got {arrays[name].shape}")
        self.arrays = {name: np.asarray(arrays[name], dtype=np.float64) for name in PARAM_NAMES}

    @classmethod
    def init(cls, config: ComposerConfig) -> "ComposerParams":
        rng = np.random.default_rng(config.seed)
        bound = 1.0 / np.sqrt(config.dim)
        arrays = {}
        for name, shape in config.shapes().items():
            if name.startswith("b"):
                arrays[name] = np.zeros(shape)
            else:
                arrays[name] = rng.uniform(-bound, bound, size=shape)
        return cls(config, arrays).snapped()

    @classmethod
    def zeros(cls, config: ComposerConfig) -> "ComposerParams":
        return cls(config, {n: np.zeros(s) for n, s in config.shapes().items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def copy(self) -> "ComposerParams":
        return ComposerParams(self.config, {n: a.copy() for n, a in self.arrays.items()})

    def snapped(self) -> "ComposerParams":
        """Round every entry to float32 precision (the checkpoint storage type)."""
        return ComposerParams(self.config, {n: a.astype(np.float32).astype(np.float64) for n, a in self.arrays.items()})

    def num_parameters(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[n].ravel() for n in PARAM_NAMES])

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays.values())

    def equals(self, other: "ComposerParams") -> bool:
        return all(np.array_equal(self.arrays[n], other.arrays[n]) for n in PARAM_NAMES)


def zeros_like_grads(params: ComposerParams) -> dict[str, np.ndarray]:
    return {n: np.zeros_like(a) for n, a in params.arrays.items()}


def add_grads(acc: dict[str, np.ndarray], other: dict[str, np.ndarray], scale: float = 1.0) -> dict[str, np.ndarray]:
    for n in acc:
        acc[n] += scale * other[n]
    return acc


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, H, W, C) -> (B, n_patches, patch_size * patch_size * C), row-major patches."""
    b, h, w, c = images.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} is not divisible into {patch_size}x{patch_size} patches")
    gh, gw = h // patch_size, w // patch_size
    x = images.reshape(b, gh, patch_size, gw, patch_size, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, gh * gw, patch_size * patch_size * c)


def pad_tokens(token_lists) -> tuple[np.ndarray, np.ndarray]:
    token_lists = [tuple(t) for t in token_lists]
    t_max = max((len(t) for t in token_lists), default=0)
    ids = np.zeros((len(token_lists), t_max), dtype=np.int64)
    mask = np.zeros((len(token_lists), t_max), dtype=bool)
    for i, toks in enumerate(token_lists):
        ids[i, : len(toks)] = toks
        mask[i, : len(toks)] = True
    return ids, mask


@dataclass
class ForwardCache:
    patches: np.ndarray
    ids: np.ndarray
    tmask: np.ndarray
    keys: np.ndarray
    attn: np.ndarray
    z: np.ndarray
    hidden: np.ndarray


def _check_batch(params: ComposerParams, images: np.ndarray) -> np.ndarray:
    cfg = params.config
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    if images.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
        raise ValueError(
            f"composer expects {cfg.image_size}x{cfg.image_size}x{cfg.channels} images, got {images.shape[1:]}"
        )
    return images


def forward(params: ComposerParams, images: np.ndarray, token_lists) -> tuple[np.ndarray, ForwardCache]:
    cfg = params.config
    images = _check_batch(params, images)
    if len(token_lists) != images.shape[0]:
        raise ValueError("one token sequence per image required")
    ids, tmask = pad_tokens(token_lists)
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ValueError(f"token id outside vocabulary of size {cfg.vocab_size}")
    p = params.arrays
    patches = patchify(images, cfg.patch_size) - PIXEL_CENTER
    img_keys = patches @ p["patch_proj"] + p["pos_emb"]
    txt_keys = p["tok_emb"][ids] * tmask[..., None]
    keys = np.concatenate([img_keys, txt_keys], axis=1)
    valid = np.concatenate([np.ones(img_keys.shape[:2], dtype=bool), tmask], axis=1)

    scores = (keys @ p["queries"].T).transpose(0, 2, 1) / np.sqrt(cfg.dim)
    scores = np.where(valid[:, None, :], scores, -np.inf)
    scores = scores - scores.max(axis=2, keepdims=True)
    e = np.exp(scores)
    attn = e / e.sum(axis=2, keepdims=True)
    z = attn @ keys
    hidden = np.tanh(z @ p["w1"] + p["b1"])
    out = z + hidden @ p["w2"] + p["b2"]
    return out, ForwardCache(patches, ids, tmask, keys, attn, z, hidden)


def _flat2(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-1])


def backward(params: ComposerParams, cache: ForwardCache, out_grad: np.ndarray) -> dict[str, np.ndarray]:
    """Exact parameter gradients of ``sum(out * out_grad)``."""
    cfg = params.config
    p = params.arrays
    g = {}
    g["b2"] = out_grad.sum(axis=(0, 1))
    g["w2"] = _flat2(cache.hidden).T @ _flat2(out_grad)
    d_pre = (out_grad @ p["w2"].T) * (1.0 - cache.hidden**2)
    g["b1"] = d_pre.sum(axis=(0, 1))
    g["w1"] = _flat2(cache.z).T @ _flat2(d_pre)
    dz = out_grad + d_pre @ p["w1"].T

    d_attn = dz @ cache.keys.transpose(0, 2, 1)
    d_keys = cache.attn.transpose(0, 2, 1) @ dz
    d_scores = cache.attn * (d_attn - (d_attn * cache.attn).sum(axis=2, keepdims=True))
    d_scores /= np.sqrt(cfg.dim)
    g["queries"] = (d_scores @ cache.keys).sum(axis=0)
    d_keys += d_scores.transpose(0, 2, 1) @ p["queries"]

    n_p = cache.patches.shape[1]
    d_img = d_keys[:, :n_p]
    g["patch_proj"] = _flat2(cache.patches).T @ _flat2(d_img)
    g["pos_emb"] = d_img.sum(axis=0)
    d_txt = d_keys[:, n_p:] * cache.tmask[..., None]
    tok = np.zeros_like(p["tok_emb"])
    np.add.at(tok, cache.ids[cache.tmask], d_txt[cache.tmask])
    g["tok_emb"] = tok
    return {n: g[n] for n in PARAM_NAMES}


def compose(params: ComposerParams, image: np.ndarray, tokens) -> np.ndarray:
    """Single (image, modification) -> (Q, D) composed feature."""
    out, _ = forward(params, np.asarray(image)[None], [tuple(tokens)])
    return out[0]


def encode_target(params: ComposerParams, image: np.ndarray) -> np.ndarray:
    return compose(params, image, ())


def encode_batch(params: ComposerParams, images: np.ndarray, token_lists=None, chunk: int = 256) -> np.ndarray:
    images = np.asarray(images)
    if token_lists is None:
        token_lists = [()] * len(images)
    outs = [forward(params, images[i:i + chunk], token_lists[i:i + chunk])[0] for i in range(0, len(images), chunk)]
    return np.concatenate(outs, axis=0)


# ---------------------------------------------------------------------------
# Pooling
# ---------------------------------------------------------------------------


def pool(features: np.ndarray, mode: str = "mean") -> np.ndarray:
    """(…, Q, D) -> (…, D) unit vectors."""
    return pool_forward(features, mode)[0]


def pool_forward(features: np.ndarray, mode: str = "mean"):
    if mode == "mean":
        m = features.mean(axis=-2)
        arg = None
    elif mode == "max_query":
        arg = features.argmax(axis=-2)
        m = np.take_along_axis(features, arg[..., None, :], axis=-2)[..., 0, :]
    else:
        raise ValueError(f"unknown pool mode {mode!r}")
    norm = np.linalg.norm(m, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("cannot pool an all-zero feature (undefined direction)")
    return m / norm, (features.shape, mode, arg, m / norm, norm)


def pool_backward(state, grad: np.ndarray) -> np.ndarray:
    shape, mode, arg, u, norm = state
    dm = (grad - u * (u * grad).sum(axis=-1, keepdims=True)) / norm
    if mode == "mean":
        return np.broadcast_to(dm[..., None, :] / shape[-2], shape).copy()
    out = np.zeros(shape)
    np.put_along_axis(out, arg[..., None, :], dm[..., None, :], axis=-2)
    return out


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(params: ComposerParams, path: str | Path) -> None:
    """Layout: magic, uint32 LE header length, UTF-8 JSON header, float32 LE payload."""
    header = {
        "config": asdict(params.config),
        "order": list(PARAM_NAMES),
        "shapes": {n: list(params.arrays[n].shape) for n in PARAM_NAMES},
        "seed": params.config.seed,
        "dtype": "<f4",
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = params.flat().astype("<f4").tobytes()
    Path(path).write_bytes(CHECKPOINT_MAGIC + struct.pack("<I", len(hbytes)) + hbytes + payload)


def load_checkpoint(path: str | Path) -> ComposerParams:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a composer checkpoint")
    (hlen,) = struct.unpack("<I", buf[4:8])
    header = json.loads(buf[8:8 + hlen].decode("utf-8"))
    flat = np.frombuffer(buf, dtype="<f4", offset=8 + hlen).astype(np.float64)
    config = ComposerConfig(**header["config"])
    arrays, pos = {}, 0
    for name in header["order"]:
        shape = tuple(header["shapes"][name])
        size = int(np.prod(shape)) if shape else 1
        arrays[name] = flat[pos:pos + size].reshape(shape)
        pos += size
    if pos != flat.size:
        raise ValueError(f"checkpoint payload has {flat.size} values, header describes {pos}")
    return ComposerParams(config, arrays)
