"""Question-answer fine-tuning on top of the turn encoder.

Questions and answers are encoded by two separate LSTMs and attached to the
encoded video graph as extra nodes. Two GATv2 convolutions mix everything, and
a two-layer sigmoid head scores each (question, answer) pair.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .attention import ModelParams, layout, run_layers, typed_project
from .graph import GraphBatch, assemble
from .optim import AdamWState, adamw_step, init_params
from .records import NodeKind, QAItem, VideoRecord
from .tensor import Tensor

QA_KINDS = len(NodeKind)
NUM_QA_TYPES = QA_KINDS * QA_KINDS


@dataclass
class LSTMParams:
    w_x: Tensor  # [d_in, 4h], gate order i, f, g, o
    w_h: Tensor  # [h, 4h]
    bias: Tensor  # [4h]

    @classmethod
    def init(cls, d_in: int, hidden: int, rng: np.random.Generator) -> "LSTMParams":
        bias = init_params((4 * hidden,), "zeros")
        bias.data[hidden:2 * hidden] = 1.0
        return cls(init_params((d_in, 4 * hidden), rng=rng, fan=(d_in, hidden)),
                   init_params((hidden, 4 * hidden), rng=rng, fan=(hidden, hidden)), bias)

    @property
    def hidden(self) -> int:
        return self.w_h.shape[0]

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w_x": self.w_x, f"{prefix}.w_h": self.w_h, f"{prefix}.bias": self.bias}


def encode_sequences(seqs: Sequence[np.ndarray], lstm: LSTMParams) -> Tensor:
    """Final hidden state of each (possibly different-length) sequence, [B, h]."""
    if any(len(s) == 0 for s in seqs):
        raise ValueError("encode_sequence: empty sequence")
    B, h = len(seqs), lstm.hidden
    lengths = np.array([len(s) for s in seqs])
    L = int(lengths.max())
    x = np.zeros((B, L, seqs[0].shape[1]))
    for i, s in enumerate(seqs):
        x[i, :len(s)] = s
    xw = T.add(T.matmul(x, lstm.w_x), lstm.bias)  # [B, L, 4h]
    hs = T.Tensor(np.zeros((B, h)))
    cs = T.Tensor(np.zeros((B, h)))
    for t in range(L):
        gates = T.add(xw[:, t], T.matmul(hs, lstm.w_h))
        i = T.sigmoid(gates[:, :h])
        f = T.sigmoid(gates[:, h:2 * h])
        g = T.tanh(gates[:, 2 * h:3 * h])
        o = T.sigmoid(gates[:, 3 * h:])
        c_new = T.add(T.mul(f, cs), T.mul(i, g))
        h_new = T.mul(o, T.tanh(c_new))
        live = (t < lengths).astype(np.float64)[:, None]
        if live.all():
            hs, cs = h_new, c_new
        else:
            hs = T.add(T.mul(h_new, live), T.mul(hs, 1.0 - live))
            cs = T.add(T.mul(c_new, live), T.mul(cs, 1.0 - live))
    return hs


def encode_sequence(tokens: np.ndarray, lstm: LSTMParams) -> Tensor:
    return encode_sequences([np.asarray(tokens, dtype=np.float64)], lstm)[0]


def gatv2_score(src, dst, weight, att, slope: float = T.LEAKY_SLOPE) -> Tensor:
    """att . LeakyReLU(weight @ [src || dst]); weight is [d_out, 2 d_in]."""
    cat = T.concat([src, dst], axis=0)
    weight, att = T.as_tensor(weight), T.as_tensor(att)
    if weight.shape[1] != cat.shape[0] or att.shape[0] != weight.shape[0]:
        raise T.ShapeError("gatv2_score", weight.shape, cat.shape, att.shape)
    return T.sum(T.mul(att, T.leaky_relu(T.matmul(weight, cat), slope)))


@dataclass
class GATv2LayerParams:
    w_src: Tensor  # [types, d, d]; column block h belongs to head h
    w_dst: Tensor
    att: Tensor  # [types, d]
    heads: int

    @classmethod
    def init(cls, dim: int, heads: int, rng: np.random.Generator,
             num_types: int = NUM_QA_TYPES) -> "GATv2LayerParams":
        if heads < 1 or dim % heads:
            raise ValueError(f"heads ({heads}) must divide dim ({dim})")
        dh = dim // heads
        return cls(init_params((num_types, dim, dim), rng=rng, fan=(2 * dim, dh)),
                   init_params((num_types, dim, dim), rng=rng, fan=(2 * dim, dh)),
                   init_params((num_types, dim), rng=rng, fan=(dh, 1)), heads)

    @property
    def head_dim(self) -> int:
        return self.w_src.shape[1] // self.heads

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w_src": self.w_src, f"{prefix}.w_dst": self.w_dst, f"{prefix}.att": self.att}

    def score(self, src, dst, etype: int, head: int) -> Tensor:
        if not 0 <= etype < self.w_src.shape[0]:
            raise KeyError(f"unknown edge type {etype}")
        hs = slice(head * self.head_dim, (head + 1) * self.head_dim)
        weight = T.concat([T.transpose(self.w_src[etype, :, hs]),
                           T.transpose(self.w_dst[etype, :, hs])], axis=1)
        return gatv2_score(src, dst, weight, self.att[etype, hs])

    def forward(self, x: Tensor, batch: GraphBatch) -> tuple[Tensor, np.ndarray]:
        n, d = x.shape
        H, dh, E = self.heads, self.head_dim, batch.num_edges
        K = batch.num_kinds
        m = typed_project(x, batch.kinds, self.w_src, K, batch.src, batch.kinds[batch.dst], "src")
        pd = typed_project(x, batch.kinds, self.w_dst, K, batch.dst, batch.kinds[batch.src], "dst")
        pre = T.leaky_relu(T.add(m, pd))
        score = T.sum(T.reshape(T.mul(pre, self.att[batch.etype]), (E, H, dh)), axis=-1)
        alpha = T.segment_softmax(score, batch.dst, n)
        msg = T.mul(T.reshape(m, (E, H, dh)), T.reshape(alpha, (E, H, 1)))
        return T.segment_sum(T.reshape(msg, (E, d)), batch.dst, n), alpha.data


@dataclass
class QAHeadParams:
    q_lstm: LSTMParams
    a_lstm: LSTMParams
    convs: list[GATv2LayerParams]
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, d_qa: int, dim: int, heads: int, num_convs: int,
             rng: np.random.Generator) -> "QAHeadParams":
        return cls(
            LSTMParams.init(d_qa, dim, rng), LSTMParams.init(d_qa, dim, rng),
            [GATv2LayerParams.init(dim, heads, rng) for _ in range(num_convs)],
            init_params((2 * dim, dim), rng=rng), init_params((dim,), "zeros"),
            init_params((dim, 1), rng=rng), init_params((1,), "zeros"),
        )

    @property
    def dim(self) -> int:
        return self.w2.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.q_lstm.parameters("head.q_lstm"))
        out.update(self.a_lstm.parameters("head.a_lstm"))
        for i, c in enumerate(self.convs):
            out.update(c.parameters(f"head.conv{i}"))
        out.update({"head.w1": self.w1, "head.b1": self.b1, "head.w2": self.w2, "head.b2": self.b2})
        return out

    def score_pairs(self, q: Tensor, a: Tensor) -> Tensor:
        """Sigmoid score of each row pair, [B]."""
        hidden = T.relu(T.add(T.matmul(T.concat([q, a], axis=1), self.w1), self.b1))
        return T.reshape(T.sigmoid(T.add(T.matmul(hidden, self.w2), self.b2)), (-1,))


@dataclass
class EncodedVideo:
    """Encoder output for one video: modality nodes, factor nodes and the
    edge structure among them (local row indices, factors after modality rows)."""

    x: Tensor
    kinds: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    num_factors: int


def encode_for_qa(video: VideoRecord, params: ModelParams, mode: str,
                  link_factors: bool = True, max_len: int | None = None) -> EncodedVideo:
    graphs = layout(video, params, mode, max_len)
    if mode == "mean_readout":
        batch = assemble([graphs], with_factors=False)
        x, _ = run_layers(batch, params.layers)
        means = [T.mean(x[rows], axis=0) for rows in batch.node_rows[0]]
        n = batch.num_nodes
        factor_rows = np.arange(n, n + len(means))
        src, dst = [batch.src], [batch.dst]
        for zr, rows in zip(factor_rows, batch.node_rows[0]):
            src += [rows, np.full(len(rows), zr)]
            dst += [np.full(len(rows), zr), rows]
        x = T.concat([x, T.stack(means)])
        kinds = np.concatenate([batch.kinds, np.full(len(means), int(NodeKind.FACTOR))])
        return EncodedVideo(x, kinds, np.concatenate(src), np.concatenate(dst), len(means))
    batch = assemble([graphs], link_factors=link_factors and mode == "factorized")
    x, _ = run_layers(batch, params.layers)
    return EncodedVideo(x, batch.kinds, batch.src, batch.dst, len(batch.factor_index[0]))


def qa_batch(encoded: Sequence[EncodedVideo], q: Tensor, a0: Tensor, a1: Tensor
             ) -> tuple[GraphBatch, np.ndarray, np.ndarray, np.ndarray]:
    """Disjoint union of per-item QA graphs; returns the batch and the rows of
    the question and both answer nodes."""
    xs, kinds, src, dst = [], [], [], []
    q_rows, a0_rows, a1_rows = [], [], []
    offset = 0
    for enc in encoded:
        n = len(enc.kinds)
        xs.append(enc.x)
        kinds.append(enc.kinds)
        loop = enc.src == enc.dst
        src.append(enc.src[~loop] + offset)
        dst.append(enc.dst[~loop] + offset)
        offset += n
        qr, r0, r1 = offset, offset + 1, offset + 2
        q_rows.append(qr), a0_rows.append(r0), a1_rows.append(r1)
        graph_rows = np.arange(offset - n, offset)
        for r in (qr, r0, r1):
            src += [graph_rows, np.full(n, r)]
            dst += [np.full(n, r), graph_rows]
        pairs = np.array([(qr, r0), (r0, qr), (qr, r1), (r1, qr), (r0, r1), (r1, r0)])
        src.append(pairs[:, 0])
        dst.append(pairs[:, 1])
        kinds.append(np.array([int(NodeKind.QUESTION), int(NodeKind.ANSWER), int(NodeKind.ANSWER)]))
        offset += 3
    q_rows, a0_rows, a1_rows = map(np.asarray, (q_rows, a0_rows, a1_rows))
    # question/answer embeddings are interleaved after each graph
    perm = np.empty(offset, dtype=np.int64)
    graph_part = np.setdiff1d(np.arange(offset), np.concatenate([q_rows, a0_rows, a1_rows]))
    n_graph = len(graph_part)
    B = len(encoded)
    perm[graph_part] = np.arange(n_graph)
    perm[q_rows] = n_graph + np.arange(B)
    perm[a0_rows] = n_graph + B + np.arange(B)
    perm[a1_rows] = n_graph + 2 * B + np.arange(B)
    x = T.concat([T.concat(xs), q, a0, a1])[perm]
    kinds_arr = np.concatenate(kinds).astype(np.int64)
    # GATv2 convention: every node also attends to itself
    src_arr = np.concatenate(src + [np.arange(offset)]).astype(np.int64)
    dst_arr = np.concatenate(dst + [np.arange(offset)]).astype(np.int64)
    batch = GraphBatch(
        x=x, kinds=kinds_arr, src=src_arr, dst=dst_arr,
        etype=kinds_arr[src_arr] * QA_KINDS + kinds_arr[dst_arr],
        group_of=np.zeros(offset, dtype=np.int64), turn_of=np.zeros(offset, dtype=np.int64),
        factor_index=[], node_rows=[], num_kinds=QA_KINDS,
    )
    return batch, q_rows, a0_rows, a1_rows


def qa_scores(encoded: Sequence[EncodedVideo], items: Sequence[QAItem], head: QAHeadParams,
              positions: Sequence[int] | None = None) -> Tensor:
    """Scores [B, 2] of the answers shown at positions 0 and 1.

    ``positions[b]`` is where the correct answer of item b is shown (default 0).
    """
    if positions is None:
        positions = [0] * len(items)
    first, second = [], []
    for item, pos in zip(items, positions):
        a, b = (item.correct, item.incorrect) if pos == 0 else (item.incorrect, item.correct)
        first.append(a)
        second.append(b)
    B = len(items)
    q = encode_sequences([it.question for it in items], head.q_lstm)
    ans = encode_sequences(first + second, head.a_lstm)
    batch, qr, r0, r1 = qa_batch(encoded, q, ans[:B], ans[B:])
    x = batch.x
    for conv in head.convs:
        out, _ = conv.forward(x, batch)
        x = T.add(x, out)
    qx = x[qr]
    s0 = head.score_pairs(qx, x[r0])
    s1 = head.score_pairs(qx, x[r1])
    return T.stack([s0, s1], axis=1)


def qa_forward(video: VideoRecord, item: QAItem, encoder: ModelParams, head: QAHeadParams,
               mode: str = "factorized", frozen: bool = True, link_factors: bool = True,
               position: int = 0) -> tuple[Tensor, Tensor]:
    """Scores of the two answer slots for one item."""
    if frozen:
        with T.no_grad():
            enc = encode_for_qa(video, encoder, mode, link_factors)
        enc.x = enc.x.detach()
    else:
        enc = encode_for_qa(video, encoder, mode, link_factors)
    s = qa_scores([enc], [item], head, [position])
    return s[0, 0], s[0, 1]


def targets(positions: Sequence[int]) -> np.ndarray:
    pos = np.asarray(positions)
    out = np.zeros((len(pos), 2))
    out[np.arange(len(pos)), pos] = 1.0
    return out


class QATrainer:
    """Fine-tuning driver: caches frozen encodings, batches items, steps AdamW."""

    def __init__(self, encoder: ModelParams, head: QAHeadParams, opt: AdamWState, mode: str,
                 frozen: bool, link_factors: bool = True, max_len: int | None = None):
        self.encoder, self.head, self.opt = encoder, head, opt
        self.mode, self.frozen, self.link_factors, self.max_len = mode, frozen, link_factors, max_len
        self._cache: dict[str, EncodedVideo] = {}

    def trainable(self) -> dict[str, Tensor]:
        params = dict(self.head.parameters())
        if not self.frozen:
            params.update(self.encoder.parameters())
        return params

    def encode(self, videos: Sequence[VideoRecord]) -> list[EncodedVideo]:
        if not self.frozen:
            local: dict[str, EncodedVideo] = {}
            for v in videos:
                if v.video_id not in local:
                    local[v.video_id] = encode_for_qa(v, self.encoder, self.mode, self.link_factors, self.max_len)
            return [local[v.video_id] for v in videos]
        out = []
        for v in videos:
            enc = self._cache.get(v.video_id)
            if enc is None:
                with T.no_grad():
                    enc = encode_for_qa(v, self.encoder, self.mode, self.link_factors, self.max_len)
                enc.x = enc.x.detach()
                self._cache[v.video_id] = enc
            out.append(enc)
        return out

    def _trim(self, item: QAItem) -> QAItem:
        if self.max_len is None:
            return item
        L = self.max_len
        return QAItem(item.question[:L], item.correct[:L], item.incorrect[:L])

    def step(self, pairs: Sequence[tuple[VideoRecord, QAItem]], positions: Sequence[int]) -> float:
        """One MSE update on a minibatch of (video, item) pairs."""
        enc = self.encode([v for v, _ in pairs])
        scores = qa_scores(enc, [self._trim(it) for _, it in pairs], self.head, positions)
        loss = T.mse(scores, targets(positions))
        T.backward(loss)
        adamw_step(self.trainable(), self.opt)
        return loss.item()

    def scores(self, pairs: Sequence[tuple[VideoRecord, QAItem]], batch_size: int = 64) -> np.ndarray:
        """Scores [N, 2] of (correct, incorrect) for every pair."""
        out = []
        with T.no_grad():
            for i in range(0, len(pairs), batch_size):
                chunk = pairs[i:i + batch_size]
                enc = self.encode([v for v, _ in chunk])
                out.append(qa_scores(enc, [self._trim(it) for _, it in chunk], self.head).data)
        return np.concatenate(out) if out else np.zeros((0, 2))

    def accuracy(self, pairs: Sequence[tuple[VideoRecord, QAItem]]) -> float:
        return evaluate_accuracy(self.scores(pairs))


def evaluate_accuracy(scores: np.ndarray) -> float:
    """Fraction of items whose correct answer (column 0) strictly outscores the
    incorrect one; ties count as wrong."""
    scores = np.asarray(scores)
    if len(scores) == 0:
        raise ValueError("evaluate_accuracy: empty dataset")
    return float(np.mean(scores[:, 0] > scores[:, 1]))


def qa_pairs(videos: Sequence[VideoRecord]) -> list[tuple[VideoRecord, QAItem]]:
    return [(v, item) for v in videos for item in v.qa_items]
