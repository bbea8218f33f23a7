"""Prototype, few-shot, contrastive-prototype (CPL) and angular-prototype (APL)
losses. All functions are batched torch code and differentiable."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .errors import ContractError

logger = logging.getLogger(__name__)

LOSS_KINDS = ("fs", "fs+cpl", "fs+apl")
ANCHOR_MODES = ("prototypes", "all")


@dataclass(frozen=True)
class CPLConfig:
    temperature: float = 0.1
    m: int = 10

    def validate(self):
        if not self.temperature > 0:
            raise ContractError("CPL temperature must be positive")
        if self.m < 1:
            raise ContractError("CPL needs at least one negative per anchor")


@dataclass(frozen=True)
class APLConfig:
    alpha_deg: float = 15.0
    anchor_mode: str = "prototypes"

    def validate(self):
        if not 0 <= self.alpha_deg < 90:
            raise ContractError(f"APL angle must lie in [0, 90), got {self.alpha_deg}")
        if self.anchor_mode not in ANCHOR_MODES:
            raise ContractError(f"anchor_mode must be one of {ANCHOR_MODES}")


@dataclass
class LossReport:
    l_fs: float
    l_cm: float
    lam: float
    l_total: float
    triplets_mined: int = 0


def total_loss(l_fs, l_cm, lam: float, triplets_mined: int = 0) -> LossReport:
    """``l_fs + lam * l_cm``; accepts floats or tensors."""
    return LossReport(l_fs, l_cm, lam, l_fs + lam * l_cm, triplets_mined)


# ---------------------------------------------------------------------------
# prototypical part


def compute_prototypes(emb: torch.Tensor, labels: torch.Tensor, n_classes: int) -> torch.Tensor:
    """Per-class mean of ``emb`` rows, class order = label order."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    onehot = torch.zeros(n_classes, emb.shape[0], dtype=emb.dtype)
    onehot[labels, torch.arange(emb.shape[0])] = 1
    counts = onehot.sum(dim=1, keepdim=True)
    if bool((counts == 0).any()):
        empty = torch.nonzero(counts.squeeze(1) == 0).flatten().tolist()
        raise ContractError(f"classes {empty} have no support rows")
    return (onehot @ emb) / counts


def squared_euclidean(queries: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
    if queries.shape[-1] != prototypes.shape[-1]:
        raise ContractError(f"dimension mismatch: {queries.shape[-1]} vs {prototypes.shape[-1]}")
    return (queries[:, None, :] - prototypes[None, :, :]).pow(2).sum(-1)


def proto_distances(queries, prototypes, squared: bool = True) -> torch.Tensor:
    d = squared_euclidean(queries, prototypes)
    return d if squared else d.clamp_min(1e-24).sqrt()


def few_shot_loss(queries: torch.Tensor, labels: torch.Tensor, prototypes: torch.Tensor,
                  squared: bool = True, literal_prefactor: bool = False) -> torch.Tensor:
    """Cross-entropy of softmax(-distance) over prototypes.

    Averaged over all n*q queries; ``literal_prefactor`` divides the sum by q
    instead.
    """
    if not (torch.isfinite(queries).all() and torch.isfinite(prototypes).all()):
        raise ContractError("non-finite embeddings passed to few_shot_loss")
    labels = torch.as_tensor(labels, dtype=torch.long)
    logp = torch.log_softmax(-proto_distances(queries, prototypes, squared), dim=1)
    nll = -logp[torch.arange(len(labels)), labels]
    if literal_prefactor:
        q = len(labels) / prototypes.shape[0]
        return nll.sum() / q
    return nll.mean()


# ---------------------------------------------------------------------------
# contrastive prototype loss


def draw_cpl_negatives(query_labels: Sequence[int], m: int, rng: np.random.Generator) -> np.ndarray:
    """Negative query indices for every (class, positive) term, row = positive index.

    Terms are visited class by class, positives in query order; each term
    draws ``m`` indices without replacement from queries of other classes.
    ``m`` is clamped to the smallest available negative pool.
    """
    labels = np.asarray(query_labels)
    classes = np.unique(labels)
    available = min(int(np.sum(labels != c)) for c in classes)
    if m > available:
        logger.warning("CPL m=%d exceeds the %d available negatives; clamping", m, available)
        m = available
    out = np.empty((len(labels), m), dtype=np.int64)
    for c in classes:
        pool = np.flatnonzero(labels != c)
        for i in np.flatnonzero(labels == c):
            out[i] = rng.choice(pool, size=m, replace=False)
    return out


def cpl_loss(prototypes: torch.Tensor, queries: torch.Tensor, query_labels: torch.Tensor,
             negatives, temperature: float) -> torch.Tensor:
    """Supervised contrastive loss with prototypes as anchors.

    ``negatives[i]`` lists the negative query indices for the term whose
    positive is query ``i``. Result is the term sum divided by n*q.
    """
    labels = torch.as_tensor(query_labels, dtype=torch.long)
    neg = torch.as_tensor(np.asarray(negatives), dtype=torch.long)
    anchors = prototypes[labels]                                   # (N, D)
    s_pos = (anchors * queries).sum(-1) / temperature              # (N,)
    s_neg = (anchors[:, None, :] * queries[neg]).sum(-1) / temperature  # (N, m)
    logits = torch.cat([s_pos[:, None], s_neg], dim=1)
    terms = torch.logsumexp(logits, dim=1) - s_pos
    return terms.sum() / len(labels)


# ---------------------------------------------------------------------------
# angular prototype loss


def apl_batch(prototypes: torch.Tensor, queries: torch.Tensor, query_labels) -> tuple:
    """Stack P ∪ Q as rows; returns (x, labels, is_prototype)."""
    n = prototypes.shape[0]
    labels = torch.cat([torch.arange(n), torch.as_tensor(query_labels, dtype=torch.long)])
    is_proto = torch.zeros(len(labels), dtype=torch.bool)
    is_proto[:n] = True
    return torch.cat([prototypes, queries], dim=0), labels, is_proto


def triplet_angles(x: torch.Tensor, a, p, n) -> torch.Tensor:
    """Angle in degrees at the negative vertex: atan(|xp-xa| / (2|xn-xc|)),
    xc the anchor-positive midpoint; 90 where |xn-xc| = 0."""
    xa, xp, xn = x[a], x[p], x[n]
    ap = (xp - xa).norm(dim=-1)
    nc = (xn - 0.5 * (xa + xp)).norm(dim=-1)
    ang = torch.rad2deg(torch.atan(ap / (2 * nc)))
    return torch.where(nc == 0, torch.full_like(ang, 90.0), ang)


@torch.no_grad()
def mine_triplets(x: torch.Tensor, labels, is_proto, alpha_deg: float,
                  anchor_mode: str = "prototypes") -> torch.Tensor:
    """All (a, p, n) with same-label a != p, different-label n, and angle > alpha.

    Returns a (K, 3) long tensor ordered by (a, p, n).
    """
    if anchor_mode not in ANCHOR_MODES:
        raise ContractError(f"anchor_mode must be one of {ANCHOR_MODES}")
    labels = torch.as_tensor(labels, dtype=torch.long)
    b = len(labels)
    same = labels[:, None] == labels[None, :]
    anchor_ok = torch.as_tensor(is_proto) if anchor_mode == "prototypes" else torch.ones(b, dtype=torch.bool)
    pos_ok = same & ~torch.eye(b, dtype=torch.bool) & anchor_ok[:, None]
    ap = torch.nonzero(pos_ok)                                     # (P, 2), sorted
    if len(ap) == 0:
        return torch.zeros((0, 3), dtype=torch.long)
    neg_ok = labels[None, :] != labels[ap[:, 0], None]            # (P, B)
    pair_idx, n_idx = torch.nonzero(neg_ok, as_tuple=True)
    a_idx, p_idx = ap[pair_idx, 0], ap[pair_idx, 1]
    keep = triplet_angles(x.detach(), a_idx, p_idx, n_idx) > alpha_deg
    return torch.stack([a_idx[keep], p_idx[keep], n_idx[keep]], dim=1)


def apl_loss(x: torch.Tensor, triplets: torch.Tensor, alpha_deg: float,
             normalizer: int | None = None) -> torch.Tensor:
    """Angular loss summed over (anchor, positive) pairs, divided by |B|.

    Per pair: log(1 + sum_n exp f_{a,p,n}) with
    f = 4 tan^2(alpha) <xa + xp, xn> - 2 (1 + tan^2(alpha)) <xa, xp>.
    """
    normalizer = x.shape[0] if normalizer is None else normalizer
    if len(triplets) == 0:
        return x.sum() * 0.0
    t2 = math.tan(math.radians(alpha_deg)) ** 2
    a, p, n = triplets[:, 0], triplets[:, 1], triplets[:, 2]
    xa, xp, xn = x[a], x[p], x[n]
    f = 4 * t2 * ((xa + xp) * xn).sum(-1) - 2 * (1 + t2) * (xa * xp).sum(-1)
    _, pair = torch.unique(a * x.shape[0] + p, return_inverse=True)
    n_pairs = int(pair.max()) + 1
    # shifted log(1 + sum exp f) per pair; the shift includes the implicit 0 term
    shift = torch.zeros(n_pairs, dtype=f.dtype).scatter_reduce(
        0, pair, f.detach(), reduce="amax", include_self=True)
    sums = torch.zeros(n_pairs, dtype=f.dtype).index_add(0, pair, torch.exp(f - shift[pair]))
    terms = shift + torch.log(torch.exp(-shift) + sums)
    return terms.sum() / normalizer
