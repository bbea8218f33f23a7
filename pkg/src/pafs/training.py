"""Episodic training with validation-based model selection, prediction and
evaluation over sampled tasks."""

from __future__ import annotations

import contextlib
import copy
import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from ._io import atomic_write
from .config import RunConfig
from .episodes import Episode, sample_episode
from .errors import SamplingError, TrainingError
from .losses import (APLConfig, CPLConfig, LossReport, apl_batch, apl_loss, compute_prototypes,
                     cpl_loss, draw_cpl_negatives, few_shot_loss, mine_triplets, proto_distances,
                     total_loss)
from .model import (EmbeddingBatch, EmbeddingModel, build_model, embed_episode, l2_normalize_rows,
                    load_into, model_to_checkpoint, save_checkpoint)
from .specaugment import AugmentConfig

logger = logging.getLogger(__name__)

# RNG stream tags keep train, validation and evaluation draws independent
TRAIN_STREAM, VAL_STREAM, EVAL_STREAM, CPL_STREAM = 1, 2, 3, 4

CHECKPOINT_NAME = "checkpoint.pafs"
TRAIN_LOG_NAME = "train_log.csv"
VAL_LOG_NAME = "val_log.csv"

_flush_depth = 0


@contextlib.contextmanager
def flush_denormals():
    """Flush float32 subnormals to zero while training or evaluating.

    Small activations drifting into the subnormal range slow CPU kernels by
    2x or more. Re-entrant; the default mode is restored on the outermost exit.
    """
    global _flush_depth
    if _flush_depth == 0:
        # numpy caches these on first use and warns if that happens under flush-to-zero
        np.finfo(np.float32), np.finfo(np.float64)
        torch.set_flush_denormal(True)
    _flush_depth += 1
    try:
        yield
    finally:
        _flush_depth -= 1
        if _flush_depth == 0:
            torch.set_flush_denormal(False)


@dataclass(frozen=True)
class LossConfig:
    kind: str = "fs+apl"
    lam: float = 0.3
    squared: bool = True
    literal_prefactor: bool = False
    project_queries: bool = True
    cpl: CPLConfig = field(default_factory=CPLConfig)
    apl: APLConfig = field(default_factory=APLConfig)

    @classmethod
    def from_run(cls, cfg: RunConfig) -> "LossConfig":
        return cls(kind=cfg["loss.kind"], lam=cfg["loss.lambda"], squared=cfg["fs.squared"],
                   literal_prefactor=cfg["fs.literal_prefactor"],
                   project_queries=cfg["contrastive.project_queries"],
                   cpl=CPLConfig(cfg["cpl.temperature"], cfg["cpl.m"]),
                   apl=APLConfig(cfg["apl.alpha_deg"], cfg["apl.anchor_mode"]))


def episode_loss(model: EmbeddingModel, batch: EmbeddingBatch, cfg: LossConfig,
                 rng: np.random.Generator | None = None, negatives=None,
                 triplets: torch.Tensor | None = None) -> LossReport:
    """Few-shot loss plus the configured contrastive term, as tensors.

    ``negatives`` (CPL) and ``triplets`` (APL) replace the random draw and the
    miner when given, so the loss can be re-evaluated on a frozen selection.
    """
    n = int(batch.support_labels.max()) + 1
    protos = compute_prototypes(batch.support, batch.support_labels, n)
    l_fs = few_shot_loss(batch.query, batch.query_labels, protos, cfg.squared, cfg.literal_prefactor)
    if cfg.kind == "fs":
        return total_loss(l_fs, torch.zeros((), dtype=l_fs.dtype), cfg.lam)
    p_hat = model.project(protos)
    q_hat = model.project(batch.query) if cfg.project_queries else l2_normalize_rows(batch.query)
    if cfg.kind == "fs+cpl":
        if negatives is None:
            rng = rng if rng is not None else np.random.default_rng()
            negatives = draw_cpl_negatives(batch.query_labels.numpy(), cfg.cpl.m, rng)
        return total_loss(l_fs, cpl_loss(p_hat, q_hat, batch.query_labels, negatives,
                                         cfg.cpl.temperature), cfg.lam)
    x, labels, is_proto = apl_batch(p_hat, q_hat, batch.query_labels)
    trip = triplets if triplets is not None else \
        mine_triplets(x, labels, is_proto, cfg.apl.alpha_deg, cfg.apl.anchor_mode)
    return total_loss(l_fs, apl_loss(x, trip, cfg.apl.alpha_deg), cfg.lam, len(trip))


# ---------------------------------------------------------------------------
# prediction / evaluation


def predict_from_embeddings(support, support_labels, query, squared: bool = True) -> np.ndarray:
    """Nearest-prototype labels; exact ties go to the lowest label."""
    n = int(torch.as_tensor(support_labels).max()) + 1
    protos = compute_prototypes(support, support_labels, n)
    d = proto_distances(query, protos, squared).detach().cpu().numpy()
    return np.argmin(d, axis=1)


@torch.no_grad()
def predict_episode(model: EmbeddingModel, episode: Episode, store, aug: AugmentConfig,
                    seed: int = 0, episode_index: int = 0, squared: bool = True,
                    stream: int = EVAL_STREAM) -> np.ndarray:
    was_training = model.training
    model.eval()
    try:
        batch = embed_episode(model, episode, store, aug, seed, episode_index, training=False,
                              stream=stream)
        return predict_from_embeddings(batch.support, batch.support_labels, batch.query, squared)
    finally:
        model.train(was_training)


def ci95(accuracies: Sequence[float]) -> float:
    """1.96 * sample std / sqrt(N); zero for fewer than two values."""
    acc = np.asarray(accuracies, dtype=np.float64)
    if acc.size < 2:
        return 0.0
    return float(1.96 * acc.std(ddof=1) / math.sqrt(acc.size))


@dataclass
class EvalResult:
    accuracies: np.ndarray

    @property
    def n_tasks(self) -> int:
        return len(self.accuracies)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def ci95(self) -> float:
        return ci95(self.accuracies)


def evaluate(model: EmbeddingModel, index, store, split: str, n_tasks: int, n_way: int,
             k_shot: int, q_queries: int, seed: int, aug: AugmentConfig, squared: bool = True,
             stream: int = EVAL_STREAM) -> EvalResult:
    """Mean query accuracy over ``n_tasks`` episodes drawn from ``split``."""
    pool = index.split_pool(split)
    rng = np.random.default_rng([seed, stream])
    acc = np.empty(n_tasks)
    with flush_denormals():
        for t in range(n_tasks):
            ep = sample_episode(pool, n_way, k_shot, q_queries, rng)
            pred = predict_episode(model, ep, store, aug, seed, t, squared, stream)
            acc[t] = float(np.mean(pred == ep.query_labels))
    return EvalResult(acc)


def parameter_hash(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class SweepRow:
    shots: int
    seed: int | None
    mean: float
    ci95: float


def kshot_sweep(model, index, store, shots: Sequence[int], seeds: Sequence[int], n_tasks: int,
                n_way: int, q_queries: int, aug: AugmentConfig, split: str = "test",
                squared: bool = True, cache: dict | None = None) -> tuple[list[SweepRow], list[SweepRow]]:
    """Evaluate each shot count under each seed.

    Returns (per-seed rows, summary rows). With one seed the summary is that
    seed's result; with several it is the mean of means with a CI over seeds.
    ``cache`` maps (shots, seed) to an EvalResult already computed.
    """
    cache = {} if cache is None else cache
    per_seed, summary = [], []
    for k in shots:
        if k < 1:
            raise SamplingError("shot counts must be >= 1")
        results = []
        for s in seeds:
            res = cache.get((k, s))
            if res is None:
                res = evaluate(model, index, store, split, n_tasks, n_way, k, q_queries, s, aug, squared)
                cache[(k, s)] = res
            per_seed.append(SweepRow(k, s, res.mean, res.ci95))
            results.append(res)
        if len(results) == 1:
            summary.append(SweepRow(k, None, results[0].mean, results[0].ci95))
        else:
            means = [r.mean for r in results]
            summary.append(SweepRow(k, None, float(np.mean(means)), ci95(means)))
    return per_seed, summary


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: EmbeddingModel
    train_log: list[dict]
    val_log: list[dict]
    best_epoch: int
    best_val: float
    checkpoint_path: Path | None = None


def _write_csv(path, fieldnames, rows):
    with atomic_write(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def _dump_nonfinite(out_dir, epoch, episode_idx, ep: Episode, report: LossReport):
    if out_dir is None:
        return None
    path = Path(out_dir) / "nonfinite_episode.npz"
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, epoch=epoch, episode=episode_idx, classes=ep.classes,
             support_ids=ep.support_ids, query_ids=ep.query_ids,
             l_fs=report.l_fs.item(), l_cm=report.l_cm.item())
    return path


def train(cfg: RunConfig, index, store, out_dir=None, stats=None) -> TrainResult:
    """Episodic training; keeps the parameters with the best validation accuracy.

    One optimizer step per episode; the learning rate decays by ``gamma`` at
    each epoch milestone. Writes the checkpoint and CSV logs when ``out_dir``
    is given.
    """
    with flush_denormals():
        return _train(cfg, index, store, out_dir, stats)


def _train(cfg: RunConfig, index, store, out_dir, stats) -> TrainResult:
    seed = cfg["seed"]
    torch.manual_seed(seed)
    model = build_model(cfg.model(), seed)
    loss_cfg = LossConfig.from_run(cfg)
    aug = cfg.augment()
    n, k, q = cfg["episode.n_way"], cfg["episode.k_shot"], cfg["episode.q_queries"]
    opt = torch.optim.Adam(model.parameters(), lr=cfg["train.lr"])
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=list(cfg["train.milestones"]),
                                                 gamma=cfg["train.gamma"])
    train_pool = index.split_pool("train")
    ep_rng = np.random.default_rng([seed, cfg["episode.seed"], TRAIN_STREAM])
    cpl_rng = np.random.default_rng([seed, CPL_STREAM])

    train_log, val_log = [], []
    best_val, best_epoch, best_state = -1.0, -1, None
    global_ep = 0
    for epoch in range(cfg["train.epochs"]):
        model.train()
        for i in range(cfg["train.episodes_per_epoch"]):
            ep = sample_episode(train_pool, n, k, q, ep_rng)
            batch = embed_episode(model, ep, store, aug, seed, global_ep, training=True,
                                  stream=TRAIN_STREAM)
            report = episode_loss(model, batch, loss_cfg, cpl_rng)
            if not torch.isfinite(report.l_total):
                dump = _dump_nonfinite(out_dir, epoch, i, ep, report)
                raise TrainingError(f"non-finite loss at epoch {epoch} episode {i} "
                                    f"(l_fs={report.l_fs.item()}, l_cm={report.l_cm.item()}); "
                                    f"episode dumped to {dump}")
            opt.zero_grad(set_to_none=True)
            report.l_total.backward()
            lr = opt.param_groups[0]["lr"]
            opt.step()
            train_log.append({"epoch": epoch, "episode": i, "l_fs": report.l_fs.item(),
                              "l_cm": report.l_cm.item(), "l_total": report.l_total.item(),
                              "lr": lr})
            global_ep += 1
        sched.step()

        val = evaluate(model, index, store, "val", cfg["train.val_episodes"], n, k, q, seed, aug,
                       loss_cfg.squared, stream=VAL_STREAM)
        improved = val.mean > best_val
        if improved:
            best_val, best_epoch = val.mean, epoch
            best_state = copy.deepcopy(model.state_dict())
        val_log.append({"epoch": epoch, "val_mean": val.mean, "val_ci95": val.ci95,
                        "best": int(improved)})
        logger.info("epoch %d: mean l_total %.4f, val acc %.4f +- %.4f%s", epoch,
                    np.mean([r["l_total"] for r in train_log[-cfg["train.episodes_per_epoch"]:]]),
                    val.mean, val.ci95, " (best)" if improved else "")

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    result = TrainResult(model, train_log, val_log, best_epoch, best_val)
    if out_dir is not None:
        out_dir = Path(out_dir)
        ckpt = model_to_checkpoint(model, cfg.to_dict(), stats,
                                   meta={"best_epoch": best_epoch, "best_val": best_val})
        result.checkpoint_path = out_dir / CHECKPOINT_NAME
        save_checkpoint(result.checkpoint_path, ckpt)
        _write_csv(out_dir / TRAIN_LOG_NAME, ["epoch", "episode", "l_fs", "l_cm", "l_total", "lr"],
                   train_log)
        _write_csv(out_dir / VAL_LOG_NAME, ["epoch", "val_mean", "val_ci95", "best"], val_log)
    return result


def model_from_checkpoint(ckpt) -> tuple[EmbeddingModel, RunConfig]:
    cfg = RunConfig(ckpt.config)
    model = build_model(cfg.model(), cfg["seed"])
    load_into(model, ckpt)
    model.eval()
    return model, cfg
