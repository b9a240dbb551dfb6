"""Speaking-turn graphs with factorization nodes.

A :class:`TurnGraph` holds the modality nodes of one turn (or of a whole video
for the video-level variant) plus a single factorization node ``z`` linked to
every modality node in both directions. :func:`assemble` stitches many graphs
into one disjoint edge list so a whole minibatch runs through attention at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Protocol, Sequence

import numpy as np

from . import tensor as T
from .records import MODALITIES, NodeKind, RecordError, VideoRecord
from .tensor import Tensor

FACTOR_ID = -1
ENCODER_KINDS = 4  # text, vision, acoustic, factor


def edge_type(src_kind: int, dst_kind: int, num_kinds: int = ENCODER_KINDS) -> int:
    return int(src_kind) * num_kinds + int(dst_kind)


def edge_type_name(etype: int, num_kinds: int = ENCODER_KINDS) -> str:
    s, d = divmod(int(etype), num_kinds)
    return f"{NodeKind(s).name.lower()}->{NodeKind(d).name.lower()}"


class Projector(Protocol):
    factor_seed: Tensor

    def project(self, kind: NodeKind, feats: np.ndarray) -> Tensor: ...


@dataclass
class TurnGraph:
    """Modality nodes ``x`` [n, d] and factorization node ``z`` [d].

    ``adj[i, j]`` marks the directed modality edge i -> j. ``to_factor`` and
    ``from_factor`` mark the edges m -> z and z -> m; augmentations never clear
    them.
    """

    turn_index: int
    x: Tensor
    kinds: np.ndarray
    node_ids: np.ndarray
    adj: np.ndarray
    z: Tensor
    to_factor: np.ndarray
    from_factor: np.ndarray
    turn_of: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.turn_of is None:
            self.turn_of = np.full(len(self.kinds), self.turn_index, dtype=np.int64)

    @property
    def num_nodes(self) -> int:
        return len(self.kinds)

    @property
    def dim(self) -> int:
        return self.z.shape[0]

    def modality_edge_count(self) -> int:
        return int(self.adj.sum())

    def factor_edge_count(self) -> int:
        return int(self.to_factor.sum() + self.from_factor.sum())

    def edges(self) -> list[tuple[int, int, int]]:
        """All directed edges as (src_id, dst_id, edge_type); z has id ``FACTOR_ID``."""
        out = []
        F = NodeKind.FACTOR
        src, dst = np.nonzero(self.adj)
        for i, j in zip(src, dst):
            out.append((int(self.node_ids[i]), int(self.node_ids[j]),
                        edge_type(self.kinds[i], self.kinds[j])))
        for i in range(self.num_nodes):
            nid, k = int(self.node_ids[i]), self.kinds[i]
            if self.to_factor[i]:
                out.append((nid, FACTOR_ID, edge_type(k, F)))
            if self.from_factor[i]:
                out.append((FACTOR_ID, nid, edge_type(F, k)))
        return out

    def validate(self) -> None:
        n = self.num_nodes
        if n < 1:
            raise ValueError("turn graph has no modality nodes")
        if self.x.shape != (n, self.dim):
            raise ValueError(f"node matrix shape {self.x.shape} does not match {n} nodes of dim {self.dim}")
        if self.adj.shape != (n, n) or self.adj.dtype != bool:
            raise ValueError("adjacency must be a boolean n x n matrix")
        if np.any(np.diag(self.adj)):
            raise ValueError("self loops are not allowed")
        if not (self.to_factor.all() and self.from_factor.all()):
            raise ValueError("every modality node must stay linked to the factorization node")
        if len(set(self.node_ids.tolist())) != n:
            raise ValueError("node ids must be unique")
        if not np.all(np.isfinite(self.x.data)) or not np.all(np.isfinite(self.z.data)):
            raise ValueError("non-finite embedding")

    def with_nodes(self, keep: np.ndarray, adj: np.ndarray | None = None) -> "TurnGraph":
        """Induced subgraph on the (sorted) modality positions ``keep``."""
        keep = np.asarray(keep, dtype=np.int64)
        sub_adj = self.adj[np.ix_(keep, keep)] if adj is None else adj
        return replace(self, x=self.x[keep], kinds=self.kinds[keep], node_ids=self.node_ids[keep],
                       adj=sub_adj, to_factor=self.to_factor[keep],
                       from_factor=self.from_factor[keep], turn_of=self.turn_of[keep])


def _complete(n: int) -> np.ndarray:
    adj = np.ones((n, n), dtype=bool)
    np.fill_diagonal(adj, False)
    return adj


def _project_turn(turn, params: Projector, max_len: int | None) -> tuple[list[Tensor], list[int]]:
    parts, kinds = [], []
    for kind in MODALITIES:
        feats = turn.features(kind)
        if max_len is not None:
            feats = feats[:max_len]
        if len(feats) == 0:
            continue
        parts.append(params.project(kind, feats))
        kinds.extend([int(kind)] * len(feats))
    return parts, kinds


def _make_graph(turn_index: int, parts: list[Tensor], kinds: list[int], z: Tensor,
                turn_of: np.ndarray | None = None) -> TurnGraph:
    n = len(kinds)
    x = parts[0] if len(parts) == 1 else T.concat(parts, axis=0)
    return TurnGraph(
        turn_index=turn_index, x=x, kinds=np.asarray(kinds, dtype=np.int64),
        node_ids=np.arange(n, dtype=np.int64), adj=_complete(n), z=z,
        to_factor=np.ones(n, dtype=bool), from_factor=np.ones(n, dtype=bool),
        turn_of=turn_of,
    )


def build_turn_graphs(video: VideoRecord, params: Projector,
                      max_len: int | None = None) -> list[TurnGraph]:
    """One fully connected graph per speaking turn, each with its own z."""
    if not video.turns:
        raise RecordError(f"video {video.video_id!r} has no turns")
    graphs = []
    for s, turn in enumerate(video.turns):
        parts, kinds = _project_turn(turn, params, max_len)
        if not kinds:
            raise RecordError(f"video {video.video_id!r} turn {s} has no modality rows")
        graphs.append(_make_graph(s, parts, kinds, params.factor_seed))
    return graphs


def build_video_graph(video: VideoRecord, params: Projector,
                      max_len: int | None = None) -> TurnGraph:
    """A single fully connected graph over every node of the video."""
    if not video.turns:
        raise RecordError(f"video {video.video_id!r} has no turns")
    parts, kinds, turn_of = [], [], []
    for s, turn in enumerate(video.turns):
        p, k = _project_turn(turn, params, max_len)
        if not k:
            raise RecordError(f"video {video.video_id!r} turn {s} has no modality rows")
        parts.extend(p)
        kinds.extend(k)
        turn_of.extend([s] * len(k))
    return _make_graph(0, parts, kinds, params.factor_seed, np.asarray(turn_of, dtype=np.int64))


def mean_factor_readout(g: TurnGraph) -> Tensor:
    return T.mean(g.x, axis=0)


def count_edges(turn_sizes: Sequence[int], mode: str, link_factors: bool = True) -> int:
    """Directed edge total of a video under either graph layout.

    ``video_level``: one complete graph over all N nodes, N(N-1).
    ``factorized``: complete graph per turn, two edges per node to its z, and
    z <-> z links between every pair of turns when ``link_factors``.
    """
    sizes = [int(n) for n in turn_sizes]
    if not sizes:
        raise ValueError("count_edges: empty turn list")
    if any(n < 1 for n in sizes):
        raise ValueError("count_edges: turn sizes must be >= 1")
    if mode == "video_level":
        total = np.sum(sizes)
        return int(total * (total - 1))
    if mode == "factorized":
        S = len(sizes)
        within = np.sum([n * (n - 1) for n in sizes])
        return int(within + 2 * np.sum(sizes) + (S * (S - 1) if link_factors else 0))
    raise ValueError(f"count_edges: unknown mode {mode!r}")


@dataclass
class GraphBatch:
    """Disjoint union of graphs as flat node and edge arrays.

    ``factor_index[g]`` lists the node rows of the z nodes of group ``g`` in
    turn order; ``node_rows[g][s]`` the modality rows of turn ``s``.
    """

    x: Tensor
    kinds: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    etype: np.ndarray
    group_of: np.ndarray
    turn_of: np.ndarray
    factor_index: list[np.ndarray]
    node_rows: list[list[np.ndarray]]
    num_kinds: int = ENCODER_KINDS

    @property
    def num_nodes(self) -> int:
        return len(self.kinds)

    @property
    def num_edges(self) -> int:
        return len(self.src)


def assemble(groups: Sequence[Sequence[TurnGraph]], link_factors: bool = True,
             with_factors: bool = True) -> GraphBatch:
    """Flatten groups of turn graphs (one group per video view) into a batch.

    Within a group the z nodes are linked pairwise when ``link_factors``.
    With ``with_factors`` False the z nodes and their edges are left out, which
    is the mean-readout layout.
    """
    xs, kinds, group_of, turn_of = [], [], [], []
    src, dst = [], []
    factor_index, node_rows = [], []
    offset = 0
    for gi, graphs in enumerate(groups):
        rows_per_turn = []
        for g in graphs:
            n = g.num_nodes
            rows = np.arange(offset, offset + n)
            rows_per_turn.append(rows)
            xs.append(g.x)
            kinds.append(g.kinds)
            turn_of.append(g.turn_of)
            group_of.append(np.full(n, gi))
            s, d = np.nonzero(g.adj)
            src.append(rows[s])
            dst.append(rows[d])
            offset += n
        zrows = np.arange(offset, offset + len(graphs)) if with_factors else np.zeros(0, dtype=np.int64)
        if with_factors:
            xs.append(T.stack([g.z for g in graphs], axis=0))
            kinds.append(np.full(len(graphs), int(NodeKind.FACTOR)))
            turn_of.append(np.array([g.turn_index for g in graphs]))
            group_of.append(np.full(len(graphs), gi))
            for g, rows, zr in zip(graphs, rows_per_turn, zrows):
                src.append(rows[g.to_factor])
                dst.append(np.full(int(g.to_factor.sum()), zr))
                src.append(np.full(int(g.from_factor.sum()), zr))
                dst.append(rows[g.from_factor])
            if link_factors and len(graphs) > 1:
                a, b = np.nonzero(_complete(len(graphs)))
                src.append(zrows[a])
                dst.append(zrows[b])
            offset += len(graphs)
        factor_index.append(zrows)
        node_rows.append(rows_per_turn)

    kinds_arr = np.concatenate(kinds).astype(np.int64)
    src_arr = np.concatenate(src).astype(np.int64) if src else np.zeros(0, dtype=np.int64)
    dst_arr = np.concatenate(dst).astype(np.int64) if dst else np.zeros(0, dtype=np.int64)
    # a node with no in-neighbours attends to itself so its update is defined
    lonely = np.setdiff1d(np.arange(offset), dst_arr)
    if len(lonely):
        src_arr = np.concatenate([src_arr, lonely])
        dst_arr = np.concatenate([dst_arr, lonely])
    return GraphBatch(
        x=T.concat(xs, axis=0), kinds=kinds_arr, src=src_arr, dst=dst_arr,
        etype=kinds_arr[src_arr] * ENCODER_KINDS + kinds_arr[dst_arr],
        group_of=np.concatenate(group_of).astype(np.int64),
        turn_of=np.concatenate(turn_of).astype(np.int64),
        factor_index=factor_index, node_rows=node_rows,
    )
