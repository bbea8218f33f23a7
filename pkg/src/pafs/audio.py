"""Audio loading, log-mel features, segmentation, global standardization and
the binary spectrogram cache."""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.io import wavfile

from ._io import atomic_write
from .errors import (
    CacheCorruptionError,
    CacheFormatError,
    ContractError,
    EmptyInputError,
    ManifestError,
)

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
STD_FLOOR = 1e-8

CACHE_MAGIC = b"PAFSCACH"
CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<8sIIIIff")
_RECORD_LABEL = struct.Struct("<I")


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ContractError("AudioClip samples must be one-dimensional")
        if self.samples.size == 0:
            raise EmptyInputError("AudioClip has no samples")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class Spectrogram:
    values: np.ndarray
    standardized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ContractError(f"spectrogram must be 2-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ContractError("spectrogram contains NaN or Inf")

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = SAMPLE_RATE
    n_fft: int = 512
    win_length: int = 400
    hop_length: int = 160
    n_mels: int = 64
    log_eps: float = 1e-10
    f_min: float = 0.0
    f_max: float | None = None

    def n_frames(self, n_samples: int) -> int:
        """Frame count under centered framing."""
        return 1 + n_samples // self.hop_length


@dataclass
class GlobalStats:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise ContractError("GlobalStats.std must be positive")


# ---------------------------------------------------------------------------
# loading


def _pcm_to_float(data: np.ndarray) -> np.ndarray:
    if data.dtype == np.uint8:
        return (data.astype(np.float64) - 128.0) / 128.0
    if np.issubdtype(data.dtype, np.integer):
        return data.astype(np.float64) / float(-np.iinfo(data.dtype).min)
    return data.astype(np.float64)


def resample_linear(samples: np.ndarray, source_rate: int, target_rate: int) -> np.ndarray:
    if source_rate == target_rate:
        return np.asarray(samples, dtype=np.float64)
    n_out = max(1, int(round(len(samples) * target_rate / source_rate)))
    t_out = np.arange(n_out) * (source_rate / target_rate)
    return np.interp(t_out, np.arange(len(samples)), samples)


def load_audio(path, target_rate: int = SAMPLE_RATE) -> AudioClip:
    """Read a WAV file as a mono clip at ``target_rate``.

    Multi-channel audio is averaged to mono; other rates are resampled by
    linear interpolation.
    """
    try:
        rate, data = wavfile.read(str(path))
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read audio file {path}: {exc}") from exc
    samples = _pcm_to_float(np.asarray(data))
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if samples.size == 0:
        raise EmptyInputError(f"{path} contains no audio")
    samples = resample_linear(samples, int(rate), target_rate)
    return AudioClip(samples, target_rate)


def write_wav(path, clip: AudioClip) -> None:
    with atomic_write(path, "wb") as fh:
        wavfile.write(fh, clip.sample_rate, clip.samples.astype(np.float32))


# ---------------------------------------------------------------------------
# features


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular filters on the HTK mel scale, shape (n_mels, n_fft//2 + 1)."""
    f_max = cfg.f_max if cfg.f_max is not None else cfg.sample_rate / 2
    fft_freqs = np.linspace(0.0, cfg.sample_rate / 2, cfg.n_fft // 2 + 1)
    mel_pts = np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(f_max), cfg.n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    lower = hz_pts[:-2, None]
    center = hz_pts[1:-1, None]
    upper = hz_pts[2:, None]
    rising = (fft_freqs[None, :] - lower) / (center - lower)
    falling = (upper - fft_freqs[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def mel_band_centers(cfg: MelConfig) -> np.ndarray:
    f_max = cfg.f_max if cfg.f_max is not None else cfg.sample_rate / 2
    mel_pts = np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(f_max), cfg.n_mels + 2)
    return mel_to_hz(mel_pts[1:-1])


def _frames(samples: np.ndarray, cfg: MelConfig) -> np.ndarray:
    pad = cfg.n_fft // 2
    padded = np.pad(samples, (pad, pad))
    n_frames = 1 + (padded.size - cfg.n_fft) // cfg.hop_length
    idx = np.arange(cfg.n_fft)[None, :] + cfg.hop_length * np.arange(n_frames)[:, None]
    return padded[idx]


def power_spectrogram(clip: AudioClip, cfg: MelConfig) -> np.ndarray:
    """|STFT|^2 with a centered Hann window, shape (n_fft//2 + 1, n_frames)."""
    window = np.zeros(cfg.n_fft)
    offset = (cfg.n_fft - cfg.win_length) // 2
    window[offset:offset + cfg.win_length] = np.hanning(cfg.win_length + 1)[:-1]
    spec = np.fft.rfft(_frames(clip.samples, cfg) * window, n=cfg.n_fft, axis=1)
    return (spec.real ** 2 + spec.imag ** 2).T


def mel_spectrogram(clip: AudioClip, cfg: MelConfig | None = None) -> Spectrogram:
    cfg = cfg or MelConfig()
    if clip.sample_rate != cfg.sample_rate:
        raise ContractError(f"clip rate {clip.sample_rate} != config rate {cfg.sample_rate}")
    if clip.samples.size < cfg.win_length:
        raise EmptyInputError(
            f"clip of {clip.samples.size} samples is shorter than one window ({cfg.win_length})")
    mel = mel_filterbank(cfg) @ power_spectrogram(clip, cfg)
    return Spectrogram(np.log(mel + cfg.log_eps))


def segment_clip(clip: AudioClip, seconds: float) -> list[AudioClip]:
    """Cut into consecutive non-overlapping segments, zero-padding the tail."""
    if seconds <= 0:
        raise ContractError("segment length must be positive")
    seg_len = int(round(seconds * clip.sample_rate))
    n_segments = max(1, -(-clip.samples.size // seg_len))
    padded = np.zeros(n_segments * seg_len)
    padded[:clip.samples.size] = clip.samples
    return [AudioClip(padded[i * seg_len:(i + 1) * seg_len].copy(), clip.sample_rate)
            for i in range(n_segments)]


# ---------------------------------------------------------------------------
# standardization


def compute_stats(spectrograms: Iterable[Spectrogram]) -> GlobalStats:
    """Pooled population mean/std over every cell of every spectrogram.

    Streams one matrix at a time, merging per-matrix moments with Chan's
    pairwise update.
    """
    count = 0
    mean = 0.0
    m2 = 0.0
    for spec in spectrograms:
        if spec.standardized:
            raise ContractError("compute_stats expects raw (unstandardized) spectrograms")
        x = np.asarray(spec.values, dtype=np.float64).ravel()
        n_b = x.size
        if n_b == 0:
            continue
        mean_b = x.mean()
        m2_b = np.sum((x - mean_b) ** 2)
        total = count + n_b
        delta = mean_b - mean
        mean += delta * n_b / total
        m2 += m2_b + delta * delta * count * n_b / total
        count = total
    if count == 0:
        raise EmptyInputError("no spectrogram cells to compute statistics from")
    std = float(np.sqrt(m2 / count))
    return GlobalStats(float(mean), max(std, STD_FLOOR))


def standardize(spec: Spectrogram, stats: GlobalStats) -> Spectrogram:
    if spec.standardized:
        raise ContractError("spectrogram is already standardized")
    return replace(spec, values=(spec.values - stats.mean) / stats.std, standardized=True)


# ---------------------------------------------------------------------------
# manifest


@dataclass
class ManifestRow:
    path: str
    label: str
    split: str


SPLITS = ("train", "val", "test")


def read_manifest(path) -> list[ManifestRow]:
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"path", "label", "split"} - set(reader.fieldnames or ())
        if missing:
            raise ManifestError(f"{path}: missing columns {sorted(missing)}")
        for lineno, rec in enumerate(reader, start=2):
            split = (rec["split"] or "").strip()
            if split not in SPLITS:
                raise ManifestError(f"{path}:{lineno}: unknown split {split!r}")
            if not rec["path"] or not rec["label"]:
                raise ManifestError(f"{path}:{lineno}: empty path or label")
            rows.append(ManifestRow(rec["path"].strip(), rec["label"].strip(), split))
    return rows


def write_manifest(path, rows: Sequence[ManifestRow]) -> None:
    with atomic_write(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "label", "split"])
        for row in rows:
            writer.writerow([row.path, row.label, row.split])


# ---------------------------------------------------------------------------
# cache


@dataclass
class SpectrogramCache:
    n_mels: int
    n_frames: int
    stats: GlobalStats
    class_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint32))
    matrices: np.ndarray | None = None

    def __post_init__(self):
        if self.matrices is None:
            self.matrices = np.zeros((0, self.n_mels, self.n_frames), dtype=np.float32)

    def __len__(self):
        return len(self.class_ids)


def write_cache(path, records: Sequence[tuple[int, np.ndarray]], stats: GlobalStats,
                n_mels: int | None = None, n_frames: int | None = None) -> None:
    """Serialize ``(class_id, matrix)`` records as little-endian float32."""
    if records:
        shape = np.shape(records[0][1])
        n_mels = shape[0] if n_mels is None else n_mels
        n_frames = shape[1] if n_frames is None else n_frames
    if n_mels is None or n_frames is None:
        raise ContractError("an empty cache needs explicit n_mels and n_frames")
    with atomic_write(path, "wb") as fh:
        fh.write(_CACHE_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, n_mels, n_frames,
                                    len(records), stats.mean, stats.std))
        for class_id, matrix in records:
            matrix = np.asarray(matrix)
            if matrix.shape != (n_mels, n_frames):
                raise ContractError(
                    f"record shape {matrix.shape} differs from cache shape {(n_mels, n_frames)}")
            fh.write(_RECORD_LABEL.pack(int(class_id)))
            fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def read_cache(path) -> SpectrogramCache:
    data = Path(path).read_bytes()
    if len(data) < _CACHE_HEADER.size:
        raise CacheCorruptionError(f"{path}: truncated header")
    magic, version, n_mels, n_frames, count, mean, std = _CACHE_HEADER.unpack_from(data)
    if magic != CACHE_MAGIC:
        raise CacheFormatError(f"{path}: bad magic {magic!r}")
    if version != CACHE_VERSION:
        raise CacheFormatError(f"{path}: unsupported cache version {version}")
    cells = n_mels * n_frames
    rec_size = _RECORD_LABEL.size + 4 * cells
    body = len(data) - _CACHE_HEADER.size
    if body != count * rec_size:
        raise CacheCorruptionError(
            f"{path}: header declares {count} records but payload holds {body / rec_size:.2f}")
    if not std > 0:
        raise CacheCorruptionError(f"{path}: non-positive std in header")
    dt = np.dtype([("label", "<u4"), ("values", "<f4", (n_mels, n_frames))])
    recs = np.frombuffer(data, dtype=dt, count=count, offset=_CACHE_HEADER.size)
    return SpectrogramCache(
        n_mels=n_mels,
        n_frames=n_frames,
        stats=GlobalStats(float(mean), float(std)),
        class_ids=recs["label"].astype(np.uint32),
        matrices=np.array(recs["values"], dtype=np.float32),
    )
