"""Frequency-domain counterfactuals and baseline image perturbations.

Images are ``float64`` arrays of shape ``(H, W, C)`` with values in ``[0, 1]``.
Spectra are kept in the shifted layout (zero frequency at ``(H // 2, W // 2)``)
so that "central region" means literally the middle of the grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import fft as sp_fft
from scipy import ndimage

LUMA = np.array([0.299, 0.587, 0.114])


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def check_image(image: np.ndarray, min_size: int = 8) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] not in (1, 3):
        raise ValueError(f"image must be HxWxC with C in (1, 3), got shape {image.shape}")
    if image.shape[0] < min_size or image.shape[1] < min_size:
        raise ValueError(f"image must be at least {min_size}x{min_size}, got {image.shape[:2]}")
    if not np.all(np.isfinite(image)) or image.min() < 0.0 or image.max() > 1.0:
        raise ValueError("pixel values must be finite and within [0, 1]")
    return image


@dataclass(frozen=True)
class Spectrum:
    amplitude: np.ndarray  # (H, W, C), >= 0, shifted
    phase: np.ndarray  # (H, W, C), in (-pi, pi], shifted


@dataclass(frozen=True)
class MixParams:
    lam: float = 0.5
    crop_ratio: float = 0.25
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        if not 0.0 < self.crop_ratio <= 1.0:
            raise ValueError(f"crop_ratio must lie in (0, 1], got {self.crop_ratio}")

    def window_side(self, height: int, width: int) -> int:
        return max(1, round_half_up(self.crop_ratio * min(height, width)))


def central_window(height: int, width: int, side: int) -> tuple[slice, slice]:
    """Row/column slices of the ``side``-wide window centred on the DC bin."""
    r0 = height // 2 - side // 2
    c0 = width // 2 - side // 2
    return slice(r0, r0 + side), slice(c0, c0 + side)


def forward_fft(image: np.ndarray) -> Spectrum:
    image = check_image(image)
    spec = sp_fft.fftshift(sp_fft.fft2(image, axes=(0, 1)), axes=(0, 1))
    return Spectrum(amplitude=np.abs(spec), phase=np.angle(spec))


def mix_central_amplitude(a_ref: np.ndarray, a_dist: np.ndarray, params: MixParams) -> np.ndarray:
    """Blend the centred crop of ``a_dist`` into ``a_ref`` with weight ``params.lam``."""
    if a_ref.shape != a_dist.shape:
        raise ValueError(f"amplitude shape mismatch: {a_ref.shape} vs {a_dist.shape}")
    out = np.array(a_ref, dtype=np.float64, copy=True)
    rows, cols = central_window(a_ref.shape[0], a_ref.shape[1], params.window_side(*a_ref.shape[:2]))
    lam = params.lam
    out[rows, cols] = lam * a_dist[rows, cols] + (1.0 - lam) * a_ref[rows, cols]
    return out


def inverse_fft_complex(amplitude: np.ndarray, phase: np.ndarray) -> np.ndarray:
    """Unclamped real-part reconstruction; used for phase diagnostics."""
    if amplitude.shape != phase.shape:
        raise ValueError(f"amplitude/phase shape mismatch: {amplitude.shape} vs {phase.shape}")
    spec = sp_fft.ifftshift(amplitude * np.exp(1j * phase), axes=(0, 1))
    return np.real(sp_fft.ifft2(spec, axes=(0, 1)))


def inverse_fft(amplitude: np.ndarray, phase: np.ndarray) -> np.ndarray:
    return np.clip(inverse_fft_complex(amplitude, phase), 0.0, 1.0)


def make_counterfactual(x_ref: np.ndarray, x_dist: np.ndarray, params: MixParams) -> np.ndarray:
    """Swap low-level statistics of ``x_dist`` into ``x_ref`` while keeping its phase."""
    if np.shape(x_ref) != np.shape(x_dist):
        raise ValueError(f"image shape mismatch: {np.shape(x_ref)} vs {np.shape(x_dist)}")
    ref = forward_fft(x_ref)
    dist = forward_fft(x_dist)
    mixed = mix_central_amplitude(ref.amplitude, dist.amplitude, params)
    return inverse_fft(mixed, ref.phase)


def make_counterfactual_batch(x_ref: np.ndarray, x_dist: np.ndarray, lams, crop_ratio: float) -> np.ndarray:
    """Vectorised ``make_counterfactual`` over a leading batch axis, one ``lam`` per image."""
    x_ref, x_dist = np.asarray(x_ref, dtype=np.float64), np.asarray(x_dist, dtype=np.float64)
    if x_ref.shape != x_dist.shape or x_ref.ndim != 4:
        raise ValueError(f"expected two equal (B, H, W, C) stacks, got {x_ref.shape} and {x_dist.shape}")
    lams = np.asarray(lams, dtype=np.float64).reshape(-1, 1, 1, 1)
    if len(lams) != len(x_ref) or np.any(lams < 0) or np.any(lams > 1):
        raise ValueError("need one lam in [0, 1] per image")
    for img in (*x_ref, *x_dist):
        check_image(img)
    axes = (1, 2)
    ref = sp_fft.fftshift(sp_fft.fft2(x_ref, axes=axes), axes=axes)
    dist = sp_fft.fftshift(sp_fft.fft2(x_dist, axes=axes), axes=axes)
    amp, phase = np.abs(ref), np.angle(ref)
    h, w = x_ref.shape[1:3]
    rows, cols = central_window(h, w, MixParams(0.0, crop_ratio).window_side(h, w))
    amp[:, rows, cols] = lams * np.abs(dist[:, rows, cols]) + (1.0 - lams) * amp[:, rows, cols]
    out = np.real(sp_fft.ifft2(sp_fft.ifftshift(amp * np.exp(1j * phase), axes=axes), axes=axes))
    return np.clip(out, 0.0, 1.0)


def _check_tiling(image: np.ndarray, step_h: int, step_w: int, what: str):
    h, w = image.shape[:2]
    if step_h <= 0 or step_w <= 0 or h % step_h or w % step_w:
        raise ValueError(f"{what} does not tile a {h}x{w} image")


def random_mask(image: np.ndarray, patch_size: int, mask_fraction: float, seed: int) -> np.ndarray:
    image = check_image(image)
    _check_tiling(image, patch_size, patch_size, f"patch_size={patch_size}")
    if not 0.0 <= mask_fraction <= 1.0:
        raise ValueError(f"mask_fraction must lie in [0, 1], got {mask_fraction}")
    gh, gw = image.shape[0] // patch_size, image.shape[1] // patch_size
    n_mask = round_half_up(mask_fraction * gh * gw)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(gh * gw, size=n_mask, replace=False)
    out = image.copy()
    for k in chosen:
        r, c = divmod(int(k), gw)
        out[r * patch_size:(r + 1) * patch_size, c * patch_size:(c + 1) * patch_size] = 0.0
    return out


def patch_shuffle(image: np.ndarray, grid: int, seed: int) -> np.ndarray:
    image = check_image(image)
    if grid <= 0 or image.shape[0] % grid or image.shape[1] % grid:
        raise ValueError(f"grid={grid} does not tile a {image.shape[0]}x{image.shape[1]} image")
    ph, pw = image.shape[0] // grid, image.shape[1] // grid
    perm = np.random.default_rng(seed).permutation(grid * grid)
    out = np.empty_like(image)
    for dst, src in enumerate(perm):
        dr, dc = divmod(dst, grid)
        sr, sc = divmod(int(src), grid)
        out[dr * ph:(dr + 1) * ph, dc * pw:(dc + 1) * pw] = image[sr * ph:(sr + 1) * ph, sc * pw:(sc + 1) * pw]
    return out


def gaussian_kernel(sigma: float, radius: int) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(image: np.ndarray, sigma: float, kernel_radius: int) -> np.ndarray:
    image = check_image(image)
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if kernel_radius < 1:
        raise ValueError(f"kernel_radius must be >= 1, got {kernel_radius}")
    k = gaussian_kernel(sigma, kernel_radius)
    out = ndimage.correlate1d(image, k, axis=0, mode="reflect")
    out = ndimage.correlate1d(out, k, axis=1, mode="reflect")
    return np.clip(out, 0.0, 1.0)


def grayscale(image: np.ndarray) -> np.ndarray:
    image = check_image(image)
    if image.shape[2] != 3:
        raise ValueError(f"grayscale needs 3 channels, got {image.shape[2]}")
    lum = image @ LUMA
    return np.repeat(lum[..., None], 3, axis=2)
