"""Edge-typed multi-head graph attention and the turn encoder built on it."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .graph import (ENCODER_KINDS, GraphBatch, TurnGraph, assemble, build_turn_graphs,
                    build_video_graph)
from .optim import init_params
from .records import MODALITIES, MODALITY_NAMES, NodeKind, VideoRecord
from .tensor import Tensor

NUM_ENCODER_TYPES = ENCODER_KINDS * ENCODER_KINDS
FACTOR_MODES = ("factorized", "video_level", "mean_readout")


def typed_project(x: Tensor, kinds: np.ndarray, weight: Tensor, num_kinds: int,
                  nodes: np.ndarray, others: np.ndarray, side: str) -> Tensor:
    """Per-edge ``x[nodes[e]] @ weight[type_e]`` where the edge type is
    (kind(node), other) for ``side="src"`` and (other, kind(node)) for ``"dst"``.

    Nodes are grouped by kind so each node meets only the ``num_kinds`` weights
    its kind can use rather than every edge type.
    """
    K = num_kinds
    d_in, d_out = weight.shape[1], weight.shape[2]
    w4 = T.reshape(weight, (K, K, d_in, d_out))
    node_kind = kinds[nodes]
    local = np.zeros(len(kinds), dtype=np.int64)
    base = np.zeros(K, dtype=np.int64)
    size = np.zeros(K, dtype=np.int64)
    parts, offset = [], 0
    for k in np.unique(node_kind):
        rows = np.flatnonzero(kinds == k)
        local[rows] = np.arange(len(rows))
        wk = w4[int(k)] if side == "src" else w4[:, int(k)]
        parts.append(T.reshape(T.einsum("nd,jde->jne", x[rows], wk), (K * len(rows), d_out)))
        base[k], size[k] = offset, len(rows)
        offset += K * len(rows)
    table = parts[0] if len(parts) == 1 else T.concat(parts)
    return table[base[node_kind] + others * size[node_kind] + local[nodes]]


def raw_score_from_projections(e, proj_src, proj_dst, slope: float = T.LEAKY_SLOPE) -> Tensor:
    """LeakyReLU(e . [proj_src || proj_dst])."""
    e = T.as_tensor(e)
    cat = T.concat([proj_src, proj_dst], axis=0)
    if e.shape != cat.shape:
        raise T.ShapeError("raw_score", e.shape, cat.shape)
    return T.leaky_relu(T.sum(T.mul(e, cat)), slope)


def normalize_scores(betas) -> Tensor:
    """Softmax of one node's raw scores over its in-neighbourhood."""
    betas = T.as_tensor(betas)
    if betas.data.size == 0:
        raise ValueError("normalize_scores: empty neighbourhood")
    return T.softmax(betas, axis=-1)


@dataclass
class AttentionLayerParams:
    """Per edge type: projection ``weight`` [types, d, d] whose column block h
    is head h's projection, and the two halves of each head's attention vector
    (``att_src``, ``att_dst``, [types, d])."""

    weight: Tensor
    att_src: Tensor
    att_dst: Tensor
    heads: int

    @classmethod
    def init(cls, dim: int, heads: int, rng: np.random.Generator,
             num_types: int = NUM_ENCODER_TYPES) -> "AttentionLayerParams":
        if heads < 1 or dim % heads:
            raise ValueError(f"heads ({heads}) must divide dim ({dim})")
        dh = dim // heads
        return cls(
            weight=init_params((num_types, dim, dim), rng=rng, fan=(dim, dh)),
            att_src=init_params((num_types, dim), rng=rng, fan=(2 * dh, 1)),
            att_dst=init_params((num_types, dim), rng=rng, fan=(2 * dh, 1)),
            heads=heads,
        )

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def num_types(self) -> int:
        return self.weight.shape[0]

    def _check_type(self, etype: int) -> None:
        if not 0 <= etype < self.num_types:
            raise KeyError(f"unknown edge type {etype}")

    def head_slice(self, head: int) -> slice:
        return slice(head * self.head_dim, (head + 1) * self.head_dim)

    def project(self, x, etype: int, head: int) -> Tensor:
        self._check_type(etype)
        return T.matmul(x, self.weight[etype, :, self.head_slice(head)])

    def attention_vector(self, etype: int, head: int) -> Tensor:
        self._check_type(etype)
        hs = self.head_slice(head)
        return T.concat([self.att_src[etype, hs], self.att_dst[etype, hs]], axis=0)

    def raw_score(self, src, dst, etype: int, head: int) -> Tensor:
        return raw_score_from_projections(self.attention_vector(etype, head),
                                          self.project(src, etype, head),
                                          self.project(dst, etype, head))

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.att_src": self.att_src,
                f"{prefix}.att_dst": self.att_dst}

    def forward(self, x: Tensor, batch: GraphBatch) -> tuple[Tensor, np.ndarray]:
        """Synchronous update of every node; returns new embeddings and alpha [E, H]."""
        n, d = x.shape
        H, dh = self.heads, self.head_dim
        E = batch.num_edges
        K = batch.num_kinds
        p_src = typed_project(x, batch.kinds, self.weight, K, batch.src, batch.kinds[batch.dst], "src")
        # e . P(x) per head equals x . (P e): fold the attention vectors into
        # the projections so the destination side never needs per-edge vectors
        w = T.reshape(self.weight, (self.num_types, d, H, dh))
        u_src = T.einsum("tdhc,thc->thd", w, T.reshape(self.att_src, (self.num_types, H, dh)))
        u_dst = T.einsum("tdhc,thc->thd", w, T.reshape(self.att_dst, (self.num_types, H, dh)))
        s_src = T.einsum("nd,thd->tnh", x, u_src)
        s_dst = T.einsum("nd,thd->tnh", x, u_dst)
        beta = T.leaky_relu(T.add(s_src[batch.etype, batch.src], s_dst[batch.etype, batch.dst]))
        alpha = T.segment_softmax(beta, batch.dst, n)
        msg = T.mul(T.reshape(p_src, (E, H, dh)), T.reshape(alpha, (E, H, 1)))
        out = T.segment_sum(T.reshape(msg, (E, d)), batch.dst, n)
        return out, alpha.data


@dataclass
class ModelParams:
    """All trainable state of the turn encoder."""

    proj_weight: dict[NodeKind, Tensor]
    proj_bias: dict[NodeKind, Tensor]
    factor_seed: Tensor
    layers: list[AttentionLayerParams]

    @classmethod
    def init(cls, input_dims: dict, dim: int, heads: int, num_layers: int,
             rng: np.random.Generator) -> "ModelParams":
        pw, pb = {}, {}
        for kind in MODALITIES:
            pw[kind] = init_params((int(input_dims[kind]), dim), rng=rng)
            pb[kind] = init_params((dim,), "zeros")
        seed = init_params((dim,), rng=rng, fan=(dim, dim))
        layers = [AttentionLayerParams.init(dim, heads, rng) for _ in range(num_layers)]
        return cls(pw, pb, seed, layers)

    @property
    def dim(self) -> int:
        return self.factor_seed.shape[0]

    @property
    def input_dims(self) -> dict[NodeKind, int]:
        return {k: w.shape[0] for k, w in self.proj_weight.items()}

    def project(self, kind: NodeKind, feats: np.ndarray) -> Tensor:
        w = self.proj_weight[NodeKind(kind)]
        if feats.shape[1] != w.shape[0]:
            raise T.ShapeError(f"project[{MODALITY_NAMES[NodeKind(kind)]}]", feats.shape, w.shape,
                               detail=f"expected feature dim {w.shape[0]}")
        return T.add(T.matmul(feats, w), self.proj_bias[NodeKind(kind)])

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for kind in MODALITIES:
            name = MODALITY_NAMES[kind]
            out[f"encoder.proj.{name}.weight"] = self.proj_weight[kind]
            out[f"encoder.proj.{name}.bias"] = self.proj_bias[kind]
        out["encoder.factor_seed"] = self.factor_seed
        for i, layer in enumerate(self.layers):
            out.update(layer.parameters(f"encoder.layer{i}"))
        return out


def update_nodes(g: TurnGraph, layer: AttentionLayerParams) -> TurnGraph:
    """One attention layer applied to a single turn graph (z included)."""
    batch = assemble([[g]])
    out, _ = layer.forward(batch.x, batch)
    n = g.num_nodes
    return TurnGraph(turn_index=g.turn_index, x=out[:n], kinds=g.kinds, node_ids=g.node_ids,
                     adj=g.adj, z=out[n], to_factor=g.to_factor, from_factor=g.from_factor,
                     turn_of=g.turn_of)


def run_layers(batch: GraphBatch, layers: Sequence[AttentionLayerParams]) -> tuple[Tensor, list[np.ndarray]]:
    x = batch.x
    alphas = []
    for layer in layers:
        x, alpha = layer.forward(x, batch)
        alphas.append(alpha)
    return x, alphas


def layout(video: VideoRecord, params: ModelParams, mode: str,
           max_len: int | None = None) -> list[TurnGraph]:
    """The graphs a video is encoded from under ``mode``."""
    if mode == "video_level":
        return [build_video_graph(video, params, max_len)]
    if mode in ("factorized", "mean_readout"):
        return build_turn_graphs(video, params, max_len)
    raise ValueError(f"unknown factor mode {mode!r}")


def encode_groups(groups: Sequence[Sequence[TurnGraph]], params: ModelParams, mode: str,
                  link_factors: bool = True) -> list[Tensor]:
    """Encode each group of graphs (one video view) to its factor vectors [S, d]."""
    if mode not in FACTOR_MODES:
        raise ValueError(f"unknown factor mode {mode!r}")
    if mode == "mean_readout":
        batch = assemble(groups, with_factors=False)
        x, _ = run_layers(batch, params.layers)
        seg = np.empty(batch.num_nodes, dtype=np.int64)
        counts, bounds, k = [], [0], 0
        for rows_per_turn in batch.node_rows:
            for rows in rows_per_turn:
                seg[rows] = k
                counts.append(len(rows))
                k += 1
            bounds.append(k)
        means = T.div(T.segment_sum(x, seg, k), np.asarray(counts, dtype=np.float64)[:, None])
        return [means[bounds[i]:bounds[i + 1]] for i in range(len(groups))]
    batch = assemble(groups, link_factors=link_factors and mode == "factorized")
    x, _ = run_layers(batch, params.layers)
    return [x[rows] for rows in batch.factor_index]


def encode_video(video: VideoRecord, params: ModelParams, mode: str = "factorized",
                 link_factors: bool = True, max_len: int | None = None) -> Tensor:
    """Factor vectors of a video: [turns, d], or [1, d] in video-level mode."""
    return encode_groups([layout(video, params, mode, max_len)], params, mode, link_factors)[0]
