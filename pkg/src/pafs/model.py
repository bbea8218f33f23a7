"""Embedding module: CRNN backbone, self-attention fusion over the four
augmented views, and the projection head used by the contrastive losses."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from ._io import atomic_write
from .errors import CacheCorruptionError, CacheFormatError, ContractError
from .specaugment import N_VIEWS


@dataclass(frozen=True)
class ModelConfig:
    n_mels: int = 64
    n_frames: int = 501
    conv_channels: tuple[int, ...] = (64, 64, 64, 64)
    rnn_hidden: int = 64
    rnn_cell: str = "gru"
    pooling: str = "last"
    fusion_ff_dim: int = 256
    fusion_layer_norm: bool = True
    proj_hidden: int = 128
    proj_dim: int = 64
    project_queries: bool = True

    @property
    def embedding_dim(self) -> int:
        return self.rnn_hidden

    @property
    def fused_dim(self) -> int:
        return N_VIEWS * self.rnn_hidden

    def conv_output_shape(self) -> tuple[int, int]:
        f, t = self.n_mels, self.n_frames
        for _ in self.conv_channels:
            f, t = f // 2, t // 2
        return f, t

    def validate(self) -> None:
        if self.rnn_cell not in ("gru", "rnn"):
            raise ContractError(f"rnn_cell must be 'gru' or 'rnn', got {self.rnn_cell!r}")
        if self.pooling not in ("last", "mean"):
            raise ContractError(f"pooling must be 'last' or 'mean', got {self.pooling!r}")
        if not self.conv_channels:
            raise ContractError("at least one conv block is required")
        f, t = self.conv_output_shape()
        if f < 1 or t < 1:
            raise ContractError(
                f"input {self.n_mels}x{self.n_frames} too small for {len(self.conv_channels)} pools")
        for name in ("rnn_hidden", "fusion_ff_dim", "proj_hidden", "proj_dim"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")


def conv_block(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        # no conv bias: the batch norm shift makes it redundant
        nn.Conv2d(c_in, c_out, kernel_size=3, stride=1, padding=1, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(),
        nn.MaxPool2d(2),
    )


class Backbone(nn.Module):
    """Conv-4 stack, mean over frequency, then a single-layer RNN."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        chans = (1, *cfg.conv_channels)
        self.convs = nn.Sequential(*[conv_block(a, b) for a, b in zip(chans[:-1], chans[1:])])
        rnn_cls = nn.GRU if cfg.rnn_cell == "gru" else nn.RNN
        self.rnn = rnn_cls(chans[-1], cfg.rnn_hidden, num_layers=1, batch_first=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, F, T) -> (B, D)
        if x.shape[-2:] != (self.cfg.n_mels, self.cfg.n_frames):
            raise ContractError(f"backbone expects (*, {self.cfg.n_mels}, {self.cfg.n_frames}) "
                                f"input, got {tuple(x.shape)}")
        h = x.unsqueeze(1)
        for block in self.convs:
            for layer in block:
                h = layer(h)
                if isinstance(layer, nn.Conv2d):
                    # a 1-channel input leaves the layout ambiguous; channels-last
                    # activations make CPU pooling and batch norm much faster
                    h = h.contiguous(memory_format=torch.channels_last)
        seq = h.mean(dim=2).transpose(1, 2)  # (B, T', C)
        out, _ = self.rnn(seq)
        if self.cfg.pooling == "mean":
            return out.mean(dim=1)
        return out[:, -1]


class AttentionFusion(nn.Module):
    """One single-head encoder layer over the view sequence; outputs are
    concatenated in view order."""

    def __init__(self, dim: int, ff_dim: int, layer_norm: bool = True):
        super().__init__()
        self.dim = dim
        self.q_proj = nn.Linear(dim, dim)
        # a key bias only adds a per-query constant to the scores, which softmax ignores
        self.k_proj = nn.Linear(dim, dim, bias=False)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.ff1 = nn.Linear(dim, ff_dim)
        self.ff2 = nn.Linear(ff_dim, dim)
        self.act = nn.ReLU()
        self.norm1 = nn.LayerNorm(dim) if layer_norm else nn.Identity()
        self.norm2 = nn.LayerNorm(dim) if layer_norm else nn.Identity()

    def attention_weights(self, tokens: torch.Tensor) -> torch.Tensor:
        q, k = self.q_proj(tokens), self.k_proj(tokens)
        return torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.dim), dim=-1)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.dim() != 3 or tokens.shape[1] != N_VIEWS or tokens.shape[2] != self.dim:
            raise ContractError(f"fusion expects (B, {N_VIEWS}, {self.dim}), got {tuple(tokens.shape)}")
        attn = self.attention_weights(tokens) @ self.v_proj(tokens)
        h = self.norm1(tokens + self.out_proj(attn))
        h = self.norm2(h + self.ff2(self.act(self.ff1(h))))
        return h.flatten(1)

    @torch.no_grad()
    def zero_residual_branches_(self) -> None:
        """Silence the attention and feed-forward branches.

        Without layer norm the layer then passes tokens through unchanged.
        """
        for lin in (self.v_proj, self.out_proj, self.ff2):
            lin.weight.zero_()
            lin.bias.zero_()


class ProjectionHead(nn.Module):
    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, out_dim)
        self.act = nn.ReLU()
        self.degenerate_rows = 0

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


def l2_normalize_rows(x: torch.Tensor, counter: ProjectionHead | None = None,
                      eps: float = 1e-12) -> torch.Tensor:
    """Unit-normalize rows; rows with norm <= eps become e1."""
    norms = x.norm(dim=1, keepdim=True)
    bad = norms.squeeze(1) <= eps
    out = x / norms.clamp_min(eps)
    if bool(bad.any()):
        if counter is not None:
            counter.degenerate_rows += int(bad.sum())
        e1 = torch.zeros_like(x[0])
        e1[0] = 1
        out = torch.where(bad[:, None], e1.expand_as(out), out)
    return out


class EmbeddingModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        self.fusion = AttentionFusion(cfg.embedding_dim, cfg.fusion_ff_dim, cfg.fusion_layer_norm)
        self.head = ProjectionHead(cfg.fused_dim, cfg.proj_hidden, cfg.proj_dim)

    def backbone_views(self, views: torch.Tensor, identical_views: bool = False) -> torch.Tensor:
        """(B, 4, F, T) -> (B, 4, D).

        ``identical_views`` skips the redundant passes when all four views are
        copies; batch-norm batch statistics are unchanged by the duplication.
        """
        if views.dim() != 4 or views.shape[1] != N_VIEWS:
            raise ContractError(f"expected (B, {N_VIEWS}, F, T) views, got {tuple(views.shape)}")
        b = views.shape[0]
        if identical_views:
            emb = self.backbone(views[:, 0])
            return emb[:, None, :].expand(b, N_VIEWS, emb.shape[-1])
        emb = self.backbone(views.reshape(b * N_VIEWS, *views.shape[2:]))
        return emb.reshape(b, N_VIEWS, -1)

    def fuse(self, views: torch.Tensor, identical_views: bool = False) -> torch.Tensor:
        return self.fusion(self.backbone_views(views, identical_views))

    def project(self, fused: torch.Tensor) -> torch.Tensor:
        return l2_normalize_rows(self.head(fused), counter=self.head)

    forward = fuse


@torch.no_grad()
def init_parameters(model: nn.Module, seed: int) -> None:
    """Uniform fan-in init for conv/linear/recurrent weights, zero biases."""
    gen = torch.Generator().manual_seed(int(seed))
    for module in model.modules():
        if isinstance(module, (nn.Conv2d, nn.Linear)):
            fan_in = module.weight[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            module.weight.copy_(torch.empty_like(module.weight).uniform_(-bound, bound, generator=gen))
            if module.bias is not None:
                module.bias.zero_()
        elif isinstance(module, nn.RNNBase):
            bound = 1.0 / math.sqrt(module.hidden_size)
            for name, p in module.named_parameters():
                if name.startswith("weight"):
                    p.copy_(torch.empty_like(p).uniform_(-bound, bound, generator=gen))
                else:
                    p.zero_()


def build_model(cfg: ModelConfig, seed: int = 0, dtype=torch.float32) -> EmbeddingModel:
    model = EmbeddingModel(cfg)
    init_parameters(model, seed)
    return model.to(dtype=dtype)


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"PAFSCKPT"
CKPT_VERSION = 1
_CKPT_PREFIX = struct.Struct("<8sII")


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    stats: dict | None = None
    meta: dict = field(default_factory=dict)

    def state_dict(self) -> dict[str, torch.Tensor]:
        return {k: torch.from_numpy(v.copy()) for k, v in self.tensors.items()}


def model_to_checkpoint(model: nn.Module, config: dict, stats=None, meta=None) -> Checkpoint:
    tensors = {k: v.detach().cpu().contiguous().numpy().copy() for k, v in model.state_dict().items()}
    stats_d = asdict(stats) if stats is not None and not isinstance(stats, dict) else stats
    return Checkpoint(tensors, dict(config), stats_d, dict(meta or {}))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    entries = []
    blobs = []
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr, order="C")  # ascontiguousarray would promote 0-d to 1-d
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape)})
        blobs.append(le.tobytes())
    header = json.dumps({"tensors": entries, "config": ckpt.config, "stats": ckpt.stats,
                         "meta": ckpt.meta}, sort_keys=True).encode()
    with atomic_write(path, "wb") as fh:
        fh.write(_CKPT_PREFIX.pack(CKPT_MAGIC, CKPT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < _CKPT_PREFIX.size:
        raise CacheCorruptionError(f"{path}: truncated checkpoint header")
    magic, version, hlen = _CKPT_PREFIX.unpack_from(data)
    if magic != CKPT_MAGIC:
        raise CacheFormatError(f"{path}: bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION:
        raise CacheFormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(data[_CKPT_PREFIX.size:_CKPT_PREFIX.size + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CacheCorruptionError(f"{path}: unreadable checkpoint header") from exc
    offset = _CKPT_PREFIX.size + hlen
    tensors = {}
    for entry in header["tensors"]:
        dt = np.dtype(entry["dtype"])
        n = int(np.prod(entry["shape"], dtype=np.int64))
        end = offset + n * dt.itemsize
        if end > len(data):
            raise CacheCorruptionError(f"{path}: truncated tensor {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(data, dtype=dt, count=n, offset=offset) \
            .reshape(entry["shape"]).astype(dt.newbyteorder("="))
        offset = end
    if offset != len(data):
        raise CacheCorruptionError(f"{path}: {len(data) - offset} trailing bytes")
    return Checkpoint(tensors, header["config"], header["stats"], header.get("meta", {}))


def load_into(model: nn.Module, ckpt: Checkpoint) -> None:
    """Copy checkpoint tensors into ``model`` after validating names and shapes."""
    own = model.state_dict()
    missing = set(own) - set(ckpt.tensors)
    extra = set(ckpt.tensors) - set(own)
    if missing or extra:
        raise ContractError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for name, t in own.items():
        if tuple(t.shape) != ckpt.tensors[name].shape:
            raise ContractError(f"shape mismatch for {name}: model {tuple(t.shape)}, "
                                f"checkpoint {ckpt.tensors[name].shape}")
    model.load_state_dict(ckpt.state_dict())


# ---------------------------------------------------------------------------
# episodes


@dataclass
class EmbeddingBatch:
    support: torch.Tensor
    query: torch.Tensor
    support_labels: torch.Tensor
    query_labels: torch.Tensor


def episode_views(episode, store, aug, seed: int, episode_index: int, augment: bool = True,
                  stream: int = 0):
    """Build the (n_samples, 4, F, T) view stack for support then query.

    Each sample draws its segment and augmentations from its own stream keyed
    by (seed, episode_index, sample_id), so results do not depend on order.
    """
    from .specaugment import augment_views, sample_rng

    ids = np.concatenate([episode.support_ids, episode.query_ids])
    identical = not augment or aug.is_identity
    out = []
    for sid in ids:
        rng = sample_rng(seed, episode_index, int(sid), stream)
        x = store.matrix(int(sid), rng)
        if identical:
            out.append(np.broadcast_to(x, (N_VIEWS, *x.shape)))
        else:
            out.append(augment_views(x, aug, rng))
    return np.stack(out), identical


def embed_episode(model: EmbeddingModel, episode, store, aug, seed: int, episode_index: int,
                  training: bool = False, stream: int = 0) -> EmbeddingBatch:
    """Fused embeddings for every support and query sample of one episode."""
    augment = training or aug.eval_augment
    views, identical = episode_views(episode, store, aug, seed, episode_index, augment, stream)
    dtype = next(model.parameters()).dtype
    fused = model.fuse(torch.from_numpy(views).to(dtype), identical_views=identical)
    n_s = len(episode.support_ids)
    return EmbeddingBatch(
        support=fused[:n_s],
        query=fused[n_s:],
        support_labels=torch.as_tensor(episode.support_labels, dtype=torch.long),
        query_labels=torch.as_tensor(episode.query_labels, dtype=torch.long),
    )
