"""SpecAugment-style views: time mask, frequency mask and time warp.

Each augmentation is applied to the original spectrogram independently;
nothing is composed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

N_VIEWS = 4


@dataclass(frozen=True)
class AugmentConfig:
    time_mask_max: int = 20
    freq_mask_max: int = 8
    warp_w: int = 5
    eval_augment: bool = True

    def validate(self, n_mels: int, n_frames: int) -> None:
        if not 0 <= self.time_mask_max <= n_frames:
            raise ContractError(f"time_mask_max={self.time_mask_max} outside [0, {n_frames}]")
        if not 0 <= self.freq_mask_max <= n_mels:
            raise ContractError(f"freq_mask_max={self.freq_mask_max} outside [0, {n_mels}]")
        if not (0 <= self.warp_w and 2 * self.warp_w < n_frames):
            raise ContractError(f"warp_w={self.warp_w} must satisfy 0 <= warp_w < {n_frames}/2")

    @property
    def is_identity(self) -> bool:
        return self.time_mask_max == 0 and self.freq_mask_max == 0 and self.warp_w == 0


def _mask(x: np.ndarray, max_width: int, axis: int, rng: np.random.Generator) -> np.ndarray:
    size = x.shape[axis]
    if not 0 <= max_width <= size:
        raise ContractError(f"mask width {max_width} outside [0, {size}]")
    out = x.copy()
    width = int(rng.integers(0, max_width + 1))
    start = int(rng.integers(0, size - width + 1))
    if axis == 0:
        out[start:start + width, :] = 0
    else:
        out[:, start:start + width] = 0
    return out


def time_mask(x: np.ndarray, max_width: int, rng: np.random.Generator) -> np.ndarray:
    """Zero one run of ``w ~ U{0..max_width}`` consecutive time columns."""
    return _mask(x, max_width, 1, rng)


def freq_mask(x: np.ndarray, max_width: int, rng: np.random.Generator) -> np.ndarray:
    """Zero one run of ``w ~ U{0..max_width}`` consecutive mel rows."""
    return _mask(x, max_width, 0, rng)


def warp_columns(x: np.ndarray, anchor: int, target: int) -> np.ndarray:
    """Piecewise-linear time remap sending column ``anchor`` to ``target``.

    Columns 0 and T-1 stay fixed; each output column is linearly interpolated
    from the two nearest source columns.
    """
    n_frames = x.shape[1]
    out_pos = np.arange(n_frames, dtype=np.float64)
    src_pos = np.interp(out_pos, [0.0, float(target), n_frames - 1.0],
                        [0.0, float(anchor), n_frames - 1.0])
    left = np.clip(np.floor(src_pos).astype(np.int64), 0, n_frames - 1)
    right = np.minimum(left + 1, n_frames - 1)
    frac = (src_pos - left)[None, :]
    a = x[:, left]
    # a + f*(b - a) keeps constant regions bit-exact
    return a + frac * (x[:, right] - a)


def time_warp(x: np.ndarray, warp_w: int, rng: np.random.Generator) -> np.ndarray:
    n_frames = x.shape[1]
    if not (0 <= warp_w and 2 * warp_w < n_frames):
        raise ContractError(f"warp_w={warp_w} must satisfy 0 <= warp_w < {n_frames}/2")
    if warp_w == 0:
        return x.copy()
    anchor = int(rng.integers(warp_w, n_frames - warp_w))
    shift = int(rng.integers(-warp_w, warp_w + 1))
    # keep both linear pieces non-degenerate
    target = min(max(anchor + shift, 1), n_frames - 2)
    if target == anchor:
        return x.copy()
    return warp_columns(x, anchor, target)


def augment_views(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Stack [original, time-masked, freq-masked, time-warped] as (4, F, T)."""
    x = np.asarray(x)
    cfg.validate(*x.shape)
    return np.stack([
        x.copy(),
        time_mask(x, cfg.time_mask_max, rng),
        freq_mask(x, cfg.freq_mask_max, rng),
        time_warp(x, cfg.warp_w, rng),
    ])


def sample_rng(seed: int, episode_index: int, sample_id: int, stream: int = 0) -> np.random.Generator:
    """Per-sample stream, independent of processing order."""
    return np.random.default_rng([seed, stream, episode_index, sample_id])
