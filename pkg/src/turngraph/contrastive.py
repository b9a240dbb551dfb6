"""Within-video contrastive objective on factorization nodes."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .attention import ModelParams, encode_groups, layout
from .augment import make_views
from .optim import AdamWState, adamw_step
from .records import VideoRecord
from .tensor import Tensor

log = logging.getLogger(__name__)


class NoNegatives(ValueError):
    """A video with fewer than two turns has nothing to contrast against."""


@dataclass
class ContrastiveConfig:
    tau: float = 0.5
    include_positive_in_denominator: bool = False
    symmetric_anchors: bool = True

    def validate(self) -> None:
        if not self.tau > 0:
            raise ValueError(f"contrastive.tau: must be > 0, got {self.tau}")


@dataclass
class ContrastiveBatch:
    """Factor vectors of the two views of one video, [turns, d] each."""

    z1: Tensor
    z2: Tensor
    tau: float = 0.5

    @property
    def num_turns(self) -> int:
        return self.z1.shape[0]


def infonce_turn_loss(batch: ContrastiveBatch, s: int, anchor: int = 1,
                      include_positive: bool = False) -> Tensor:
    """Loss of turn ``s`` with view ``anchor`` as the anchor, one term at a time."""
    S = batch.num_turns
    if S < 2:
        raise NoNegatives(f"need at least 2 turns, got {S}")
    views = (batch.z1, batch.z2)
    a = views[anchor - 1][s]
    pos = T.cosine_similarity(batch.z1[s], batch.z2[s])
    terms = []
    for other in range(S):
        if other == s:
            continue
        for view in views:
            terms.append(T.exp(T.div(T.cosine_similarity(a, view[other]), batch.tau)))
    if include_positive:
        terms.append(T.exp(T.div(pos, batch.tau)))
    return T.sub(T.log(T.sum(T.stack(terms))), T.div(pos, batch.tau))


def _anchor_losses(pos: Tensor, same: Tensor, cross: Tensor, off: np.ndarray,
                   tau: float, include_positive: bool) -> Tensor:
    den = T.sum(T.mul(T.add(T.exp(T.div(same, tau)), T.exp(T.div(cross, tau))), off), axis=1)
    if include_positive:
        den = T.add(den, T.exp(T.div(pos, tau)))
    return T.sub(T.log(den), T.div(pos, tau))


def similarity_stats(batch: ContrastiveBatch) -> tuple[float, float]:
    """Mean positive and mean negative cosine similarity (plain numbers)."""
    with T.no_grad():
        s12 = T.cosine_matrix(batch.z1, batch.z2).data
        s11 = T.cosine_matrix(batch.z1, batch.z1).data
        s22 = T.cosine_matrix(batch.z2, batch.z2).data
    S = batch.num_turns
    pos = float(np.mean(np.diag(s12)))
    if S < 2:
        return pos, float("nan")
    off = ~np.eye(S, dtype=bool)
    neg = float(np.mean(np.concatenate([s12[off], s12.T[off], s11[off], s22[off]])))
    return pos, neg


def video_loss(batch: ContrastiveBatch, include_positive: bool = False,
               symmetric: bool = True) -> Tensor | None:
    """Mean per-turn loss over turns (and both anchors). None when the video
    has a single turn."""
    S = batch.num_turns
    if S < 2:
        return None
    off = (~np.eye(S, dtype=bool)).astype(np.float64)
    s12 = T.cosine_matrix(batch.z1, batch.z2)
    s11 = T.cosine_matrix(batch.z1, batch.z1)
    idx = np.arange(S)
    pos = s12[idx, idx]
    loss = _anchor_losses(pos, s11, s12, off, batch.tau, include_positive)
    if symmetric:
        s22 = T.cosine_matrix(batch.z2, batch.z2)
        loss2 = _anchor_losses(pos, s22, T.transpose(s12), off, batch.tau, include_positive)
        loss = T.concat([loss, loss2])
    return T.mean(loss)


@dataclass
class BatchLoss:
    loss: Tensor
    pos_sim: float
    neg_sim: float
    skipped: int


def batch_loss(z_views: Sequence[tuple[Tensor, Tensor]], cfg: ContrastiveConfig) -> BatchLoss:
    """Average ``video_loss`` over videos; single-turn videos count as 0."""
    losses, pos, neg, skipped = [], [], [], 0
    for z1, z2 in z_views:
        b = ContrastiveBatch(z1, z2, cfg.tau)
        vl = video_loss(b, cfg.include_positive_in_denominator, cfg.symmetric_anchors)
        if vl is None:
            skipped += 1
            losses.append(T.Tensor(0.0))
            continue
        losses.append(vl)
        p, n = similarity_stats(b)
        pos.append(p)
        neg.append(n)
    if skipped:
        log.warning("%d video(s) with a single turn contribute no contrastive loss", skipped)
    return BatchLoss(T.mean(T.stack(losses)),
                     float(np.mean(pos)) if pos else float("nan"),
                     float(np.mean(neg)) if neg else float("nan"), skipped)


def encode_view_pairs(videos: Sequence[VideoRecord], params: ModelParams, cfg,
                      rng: np.random.Generator) -> list[tuple[Tensor, Tensor]]:
    """Augment every graph twice and encode both views.

    In video-level mode the batch's videos play the role of turns, so the
    result is a single (z1, z2) pair over all videos.
    """
    groups1, groups2 = [], []
    for video in videos:
        graphs = layout(video, params, cfg.factor_mode, cfg.max_seq_len)
        pairs = [make_views(g, cfg.aug, rng) for g in graphs]
        groups1.append([p.first for p in pairs])
        groups2.append([p.second for p in pairs])
    zs = encode_groups(groups1 + groups2, params, cfg.factor_mode, cfg.link_factors)
    n = len(videos)
    pairs = list(zip(zs[:n], zs[n:]))
    if cfg.factor_mode == "video_level":
        return [(T.concat([p[0] for p in pairs]), T.concat([p[1] for p in pairs]))]
    return pairs


def pretrain_step(videos: Sequence[VideoRecord], params: ModelParams, opt: AdamWState,
                  cfg, rng: np.random.Generator) -> dict[str, float]:
    """One contrastive update on a minibatch of videos."""
    out = batch_loss(encode_view_pairs(videos, params, cfg, rng), cfg.contrastive)
    if out.loss.requires_grad:
        T.backward(out.loss)
        adamw_step(params.parameters(), opt)
    else:
        log.warning("minibatch has no multi-turn video; parameters not updated")
    return {"loss": out.loss.item(), "pos_sim": out.pos_sim, "neg_sim": out.neg_sim,
            "skipped": out.skipped}
