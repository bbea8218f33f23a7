"""Class-partitioned dataset index, n-way k-shot episode sampling and the
synthetic harmonic-tone corpus used for desk-scale runs."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .audio import SAMPLE_RATE, SPLITS, AudioClip, ManifestRow, hz_to_mel, mel_to_hz, write_manifest, write_wav
from .errors import ConfigError, ContractError, ManifestError, SamplingError

logger = logging.getLogger(__name__)


@dataclass
class DatasetIndex:
    """Manifest rows grouped by class and split.

    Sample ids are row positions in the manifest; class ids are dense
    integers assigned in first-seen label order.
    """

    label_names: list[str]
    sample_class: np.ndarray
    class_split: dict[int, str]
    class_samples: dict[int, list[int]]
    unusable: set[int] = field(default_factory=set)

    @property
    def partition(self) -> dict[str, list[int]]:
        out: dict[str, list[int]] = {s: [] for s in SPLITS}
        for c, split in sorted(self.class_split.items()):
            out[split].append(c)
        return out

    def usable_classes(self, split: str) -> list[int]:
        return [c for c in self.partition[split] if c not in self.unusable]

    def split_samples(self, split: str) -> dict[int, list[int]]:
        return {c: self.class_samples[c] for c in self.usable_classes(split)}

    def split_pool(self, split: str) -> dict[int, list[int]]:
        """All classes of a split; the sampler applies its own size threshold."""
        return {c: self.class_samples[c] for c in self.partition[split]}


def build_index(rows: Sequence[ManifestRow], k_shot: int = 5, q_queries: int = 5) -> DatasetIndex:
    label_ids: dict[str, int] = {}
    class_split: dict[int, str] = {}
    class_samples: dict[int, list[int]] = {}
    sample_class = np.empty(len(rows), dtype=np.int64)
    for i, row in enumerate(rows):
        c = label_ids.setdefault(row.label, len(label_ids))
        prev = class_split.setdefault(c, row.split)
        if prev != row.split:
            raise ManifestError(f"class {row.label!r} appears in both {prev!r} and {row.split!r}")
        class_samples.setdefault(c, []).append(i)
        sample_class[i] = c
    for split in SPLITS:
        if split not in class_split.values():
            raise ConfigError(f"split {split!r} has no classes")
    need = k_shot + q_queries
    unusable = {c for c, ids in class_samples.items() if len(ids) < need}
    if unusable:
        logger.warning("%d classes have fewer than %d samples and are excluded from episodes",
                       len(unusable), need)
    return DatasetIndex(list(label_ids), sample_class, class_split, class_samples, unusable)


def prune_manifest(rows: Sequence[ManifestRow], durations: Sequence[float] | None = None,
                   min_samples_per_class: int = 0, max_duration: float = 0.0) -> list[ManifestRow]:
    """Drop clips longer than ``max_duration`` seconds, then classes left with
    fewer than ``min_samples_per_class`` clips. Zero disables a filter."""
    keep = list(range(len(rows)))
    if max_duration > 0:
        if durations is None:
            raise ContractError("max_duration filtering needs clip durations")
        keep = [i for i in keep if durations[i] <= max_duration]
    if min_samples_per_class > 0:
        counts: dict[str, int] = {}
        for i in keep:
            counts[rows[i].label] = counts.get(rows[i].label, 0) + 1
        keep = [i for i in keep if counts[rows[i].label] >= min_samples_per_class]
    return [rows[i] for i in keep]


@dataclass
class Episode:
    n_way: int
    k_shot: int
    q_queries: int
    classes: np.ndarray
    support_ids: np.ndarray
    support_labels: np.ndarray
    query_ids: np.ndarray
    query_labels: np.ndarray


def sample_episode(class_samples: Mapping[int, Sequence[int]], n_way: int, k_shot: int,
                   q_queries: int, rng: np.random.Generator) -> Episode:
    """Draw n classes, then k+q distinct samples per class (first k to support).

    Episode-local labels follow class draw order.
    """
    if n_way < 1 or k_shot < 1 or q_queries < 0:
        raise SamplingError(f"invalid episode shape {n_way}-way {k_shot}-shot {q_queries}-query")
    need = k_shot + q_queries
    pool = sorted(c for c, ids in class_samples.items() if len(ids) >= need)
    if len(pool) < n_way:
        raise SamplingError(f"{n_way}-way episode needs {n_way} classes with >= {need} samples, "
                            f"only {len(pool)} available")
    classes = np.asarray(pool)[rng.choice(len(pool), size=n_way, replace=False)]
    support, query = [], []
    for c in classes:
        ids = np.asarray(class_samples[int(c)])
        drawn = ids[rng.choice(len(ids), size=need, replace=False)]
        support.append(drawn[:k_shot])
        query.append(drawn[k_shot:])
    local = np.arange(n_way)
    return Episode(
        n_way=n_way,
        k_shot=k_shot,
        q_queries=q_queries,
        classes=classes,
        support_ids=np.concatenate(support),
        support_labels=np.repeat(local, k_shot),
        query_ids=np.concatenate(query) if q_queries else np.zeros(0, dtype=np.int64),
        query_labels=np.repeat(local, q_queries),
    )


def episode_stream(class_samples, n_way, k_shot, q_queries, seed, stream_id=0):
    """Infinite generator of episodes from an independent seeded stream."""
    rng = np.random.default_rng([seed, stream_id])
    while True:
        yield sample_episode(class_samples, n_way, k_shot, q_queries, rng)


# ---------------------------------------------------------------------------
# synthetic corpus

HARMONIC_AMPLITUDES = (0.5, 0.25, 0.125)


@dataclass(frozen=True)
class SynthSpec:
    n_classes: int = 25
    clips_per_class: int = 30
    duration_s: float = 1.0
    noise_level: float = 0.1
    f_low: float = 120.0
    f_high: float = 2400.0
    rng_seed: int = 0
    sample_rate: int = SAMPLE_RATE

    def validate(self):
        if self.n_classes < 3:
            raise ConfigError("synthetic corpus needs at least 3 classes for a 3-way split")
        if self.clips_per_class < 1 or self.duration_s <= 0 or self.noise_level < 0:
            raise ConfigError("invalid synthetic corpus parameters")
        if not 0 < self.f_low < self.f_high < self.sample_rate / 2:
            raise ConfigError("synthetic fundamentals must lie in (0, nyquist)")

    def fundamentals(self) -> np.ndarray:
        """Class fundamentals, evenly spaced on the mel scale."""
        mels = np.linspace(hz_to_mel(self.f_low), hz_to_mel(self.f_high), self.n_classes)
        return mel_to_hz(mels)


def synth_clip(f0: float, spec: SynthSpec, rng: np.random.Generator) -> AudioClip:
    n = int(round(spec.duration_s * spec.sample_rate))
    t = np.arange(n) / spec.sample_rate
    phases = rng.uniform(0.0, 2 * np.pi, size=len(HARMONIC_AMPLITUDES))
    x = np.zeros(n)
    nyquist = spec.sample_rate / 2
    for h, (amp, phase) in enumerate(zip(HARMONIC_AMPLITUDES, phases), start=1):
        if h * f0 < nyquist:
            x += amp * np.sin(2 * np.pi * h * f0 * t + phase)
    if spec.noise_level > 0:
        x += spec.noise_level * rng.standard_normal(n)
    return AudioClip(x, spec.sample_rate)


def split_classes(n_classes: int, rng: np.random.Generator,
                  fractions=(0.6, 0.2, 0.2)) -> list[str]:
    n_train = int(round(fractions[0] * n_classes))
    n_val = int(round(fractions[1] * n_classes))
    order = rng.permutation(n_classes)
    split = [""] * n_classes
    for rank, c in enumerate(order):
        split[c] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return split


def generate_synthetic(spec: SynthSpec, out_dir) -> list[ManifestRow]:
    """Write one WAV per clip plus ``manifest.csv`` (paths relative to out_dir)."""
    spec.validate()
    out_dir = Path(out_dir)
    split = split_classes(spec.n_classes, np.random.default_rng([spec.rng_seed, 0xC1A55]))
    rows = []
    for c, f0 in enumerate(spec.fundamentals()):
        label = f"tone{c:03d}"
        for j in range(spec.clips_per_class):
            rng = np.random.default_rng([spec.rng_seed, c, j])
            rel = f"{label}/{label}_{j:04d}.wav"
            write_wav(out_dir / rel, synth_clip(float(f0), spec, rng))
            rows.append(ManifestRow(rel, label, split[c]))
    write_manifest(out_dir / "manifest.csv", rows)
    logger.info("wrote %d synthetic clips to %s", len(rows), out_dir)
    return rows


@dataclass
class SpectrogramStore:
    """Standardized spectrogram records addressed by sample (clip) id.

    A clip longer than one segment owns several records; one of them is
    picked uniformly per draw.
    """

    matrices: np.ndarray
    clip_records: list[np.ndarray]

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.matrices.shape[1:])

    def __len__(self):
        return len(self.clip_records)

    def matrix(self, sample_id: int, rng: np.random.Generator) -> np.ndarray:
        recs = self.clip_records[int(sample_id)]
        pick = int(rng.integers(0, len(recs)))
        return self.matrices[recs[pick]]

    @classmethod
    def single_segment(cls, matrices: np.ndarray) -> "SpectrogramStore":
        return cls(np.asarray(matrices), [np.array([i]) for i in range(len(matrices))])
