"""Manifest -> standardized spectrogram cache, and loading it back for
episodic training."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._io import atomic_write
from .audio import (ManifestRow, MelConfig, Spectrogram, compute_stats, load_audio, mel_spectrogram,
                    read_cache, read_manifest, segment_clip, standardize, write_cache)
from .episodes import DatasetIndex, SpectrogramStore, build_index, prune_manifest
from .errors import CacheCorruptionError

logger = logging.getLogger(__name__)

CACHE_NAME = "cache.bin"
INDEX_NAME = "index.json"


def clip_spectrograms(path, mel: MelConfig, segment_seconds: float):
    clip = load_audio(path, mel.sample_rate)
    specs = [mel_spectrogram(seg, mel) for seg in segment_clip(clip, segment_seconds)]
    return clip.duration, specs


def prepare_dataset(manifest_path, out_dir, mel: MelConfig, segment_seconds: float,
                    data_root=None, k_shot: int = 5, q_queries: int = 5,
                    min_samples_per_class: int = 0, max_duration: float = 0.0,
                    workers: int = 1) -> dict:
    """Featurize every manifest clip and write ``cache.bin`` + ``index.json``.

    Statistics come from the train split only. Records are written in
    manifest order regardless of ``workers``.
    """
    manifest_path = Path(manifest_path)
    root = Path(data_root) if data_root else manifest_path.parent
    rows = read_manifest(manifest_path)

    def work(row: ManifestRow):
        return clip_spectrograms(root / row.path, mel, segment_seconds)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(work, rows))

    durations = [r[0] for r in results]
    kept = prune_manifest(rows, durations, min_samples_per_class, max_duration)
    keep_ids = {id(r) for r in kept}
    results = [res for row, res in zip(rows, results) if id(row) in keep_ids]
    index = build_index(kept, k_shot, q_queries)

    train_specs = (s for row, (_, specs) in zip(kept, results) if row.split == "train" for s in specs)
    stats = compute_stats(train_specs)

    records, clip_records = [], []
    for i, (_, specs) in enumerate(results):
        start = len(records)
        cid = int(index.sample_class[i])
        records.extend((cid, standardize(s, stats).values.astype(np.float32)) for s in specs)
        clip_records.append([start, len(specs)])

    out_dir = Path(out_dir)
    write_cache(out_dir / CACHE_NAME, records, stats, n_mels=mel.n_mels,
                n_frames=mel.n_frames(int(round(segment_seconds * mel.sample_rate))))
    meta = {
        "rows": [[r.path, r.label, r.split] for r in kept],
        "clip_records": clip_records,
        "label_names": index.label_names,
        "stats": {"mean": stats.mean, "std": stats.std},
        "mel": {"sample_rate": mel.sample_rate, "n_fft": mel.n_fft, "win_length": mel.win_length,
                "hop_length": mel.hop_length, "n_mels": mel.n_mels, "log_eps": mel.log_eps},
        "segment_seconds": segment_seconds,
    }
    with atomic_write(out_dir / INDEX_NAME, "w") as fh:
        json.dump(meta, fh, indent=1)
    logger.info("prepared %d clips / %d records (mean %.4f, std %.4f)",
                len(kept), len(records), stats.mean, stats.std)
    return meta


@dataclass
class PreparedData:
    index: DatasetIndex
    store: SpectrogramStore
    meta: dict


def load_prepared(data_dir, k_shot: int = 5, q_queries: int = 5) -> PreparedData:
    data_dir = Path(data_dir)
    cache = read_cache(data_dir / CACHE_NAME)
    meta = json.loads((data_dir / INDEX_NAME).read_text())
    rows = [ManifestRow(*r) for r in meta["rows"]]
    spans = meta["clip_records"]
    if sum(n for _, n in spans) != len(cache):
        raise CacheCorruptionError(f"{data_dir}: index and cache disagree on record count")
    index = build_index(rows, k_shot, q_queries)
    for i, (start, n) in enumerate(spans):
        if np.any(cache.class_ids[start:start + n] != index.sample_class[i]):
            raise CacheCorruptionError(f"{data_dir}: class id mismatch for clip {i}")
    store = SpectrogramStore(cache.matrices, [np.arange(s, s + n) for s, n in spans])
    return PreparedData(index, store, meta)
