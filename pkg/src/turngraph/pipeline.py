"""Training, evaluation and analysis commands plus checkpoint persistence."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .attention import ModelParams, layout, run_layers
from .config import ConfigError, TrainConfig
from .contrastive import pretrain_step
from .data import is_validation, split
from .graph import assemble, count_edges
from .optim import AdamWState, adamw_step, init_params
from .qa import QAHeadParams, QATrainer, qa_pairs
from .records import MODALITIES, MODALITY_NAMES, NodeKind, VideoRecord

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.npz"
METRICS_NAME = "metrics.jsonl"


class PipelineError(RuntimeError):
    pass


# checkpoints ---------------------------------------------------------------

@dataclass
class Checkpoint:
    config: TrainConfig
    input_dims: dict[NodeKind, int]
    encoder: ModelParams
    head: QAHeadParams | None = None
    d_qa: int | None = None
    opt: AdamWState | None = None
    epoch: int = 0
    stage: str = "pretrain"
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays = {f"param/{k}": v.data for k, v in self.encoder.parameters().items()}
        if self.head is not None:
            arrays.update({f"param/{k}": v.data for k, v in self.head.parameters().items()})
        opt_meta = None
        if self.opt is not None:
            arrays.update({f"opt/{k}": v for k, v in self.opt.state_arrays().items()})
            opt_meta = {k: getattr(self.opt, k) for k in
                        ("lr", "beta1", "beta2", "eps", "weight_decay", "step")}
        meta = {
            "config": self.config.to_flat(),
            "input_dims": {MODALITY_NAMES[k]: int(v) for k, v in self.input_dims.items()},
            "d_qa": self.d_qa, "has_head": self.head is not None, "opt": opt_meta,
            "epoch": self.epoch, "stage": self.stage, "rng_state": self.rng_state,
            "extra": self.extra,
        }
        arrays["meta"] = np.array(json.dumps(meta))
        tmp = path.with_name(path.name + ".tmp.npz")
        np.savez(tmp, **arrays)
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise PipelineError(f"checkpoint not found: {path}")
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
        meta = json.loads(str(arrays.pop("meta")))
        cfg = TrainConfig.from_flat(meta["config"])
        dims = {k: meta["input_dims"][MODALITY_NAMES[k]] for k in MODALITIES}
        rng = np.random.default_rng(0)
        encoder = ModelParams.init(dims, cfg.hidden_dim, cfg.heads, cfg.layers, rng)
        head = None
        if meta["has_head"]:
            head = QAHeadParams.init(meta["d_qa"], cfg.hidden_dim, cfg.heads,
                                     cfg.finetune.conv_layers, rng)
        params = dict(encoder.parameters())
        if head is not None:
            params.update(head.parameters())
        for name, p in params.items():
            p.data = np.array(arrays[f"param/{name}"])
        opt = None
        if meta["opt"] is not None:
            opt = AdamWState(**meta["opt"])
            opt.load_arrays({k[4:]: v for k, v in arrays.items() if k.startswith("opt/")})
        return cls(cfg, dims, encoder, head, meta["d_qa"], opt, meta["epoch"], meta["stage"],
                   meta["rng_state"], meta.get("extra", {}))


def param_hash(params: dict[str, T.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


def write_metrics(records: Sequence[dict], path, append: bool = False) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a" if append else "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_metrics(path) -> list[dict]:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _records(epoch: int, values: dict) -> list[dict]:
    return [{"epoch": epoch, "key": k, "value": v} for k, v in values.items()]


def input_dims_of(videos: Sequence[VideoRecord]) -> dict[NodeKind, int]:
    dims = {}
    for v in videos:
        for t in v.turns:
            for k in MODALITIES:
                f = t.features(k)
                if len(f) and k not in dims:
                    dims[k] = f.shape[1]
        if len(dims) == len(MODALITIES):
            return dims
    missing = [MODALITY_NAMES[k] for k in MODALITIES if k not in dims]
    raise PipelineError(f"cannot infer feature dims for {missing}: no rows in data")


def qa_dim_of(videos: Sequence[VideoRecord]) -> int:
    for v in videos:
        for item in v.qa_items:
            return item.question.shape[1]
    raise PipelineError("data has no question/answer items")


def _streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    init_seq, train_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_seq), np.random.default_rng(train_seq)


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


# contrastive pretraining ----------------------------------------------------

def cmd_pretrain(cfg: TrainConfig, videos: Sequence[VideoRecord], out_dir,
                 resume=None) -> list[dict]:
    """Contrastive training; writes ``metrics.jsonl`` and ``checkpoint.npz``
    under ``out_dir`` after every epoch and returns the new metric records.

    With ``resume`` the run continues from that checkpoint (its config, with
    ``max_epochs`` taken from ``cfg``).
    """
    cfg.validate()
    out_dir = Path(out_dir)
    train, _ = split(list(videos), cfg.val_fraction)
    if not train:
        raise PipelineError("no training videos")
    if resume is not None:
        ck = Checkpoint.load(resume)
        max_epochs = cfg.max_epochs
        cfg = ck.config
        cfg.max_epochs = max_epochs
        encoder, opt, start = ck.encoder, ck.opt, ck.epoch
        rng = np.random.default_rng()
        rng.bit_generator.state = ck.rng_state
        dims = ck.input_dims
    else:
        init_rng, rng = _streams(cfg.seed)
        dims = input_dims_of(train)
        encoder = ModelParams.init(dims, cfg.hidden_dim, cfg.heads, cfg.layers, init_rng)
        opt = AdamWState(lr=cfg.lr, weight_decay=cfg.weight_decay)
        start = 0
    records = []
    for epoch in range(start, cfg.max_epochs):
        steps = []
        for idx in _batches(len(train), cfg.batch_size, rng):
            steps.append(pretrain_step([train[i] for i in idx], encoder, opt, cfg, rng))
        values = {k: float(np.nanmean([s[k] for s in steps])) for k in ("loss", "pos_sim", "neg_sim")}
        values["skipped"] = int(np.sum([s["skipped"] for s in steps]))
        if not np.isfinite(values["loss"]):
            raise PipelineError(f"non-finite loss at epoch {epoch + 1}")
        recs = _records(epoch + 1, values)
        records.extend(recs)
        write_metrics(recs, out_dir / METRICS_NAME, append=resume is not None or epoch > start)
        log.info("pretrain epoch %d loss %.4f pos %.3f neg %.3f", epoch + 1,
                 values["loss"], values["pos_sim"], values["neg_sim"])
        Checkpoint(cfg, dims, encoder, opt=opt, epoch=epoch + 1, stage="pretrain",
                   rng_state=rng.bit_generator.state).save(out_dir / CHECKPOINT_NAME)
    if start >= cfg.max_epochs and resume is None:
        Checkpoint(cfg, dims, encoder, opt=opt, epoch=0, stage="pretrain",
                   rng_state=rng.bit_generator.state).save(out_dir / CHECKPOINT_NAME)
    return records


def sweep_ratios(cfg: TrainConfig, videos: Sequence[VideoRecord], out_dir,
                 grid: Sequence[float] = (0.25, 0.5, 0.75), finetune: bool = True) -> list[dict]:
    """Vary one augmentation's ratio at a time, the others held at their
    configured values; each run uses only the augmentation being varied."""
    rows = []
    for name in ("node_drop", "edge_perturb", "node_mask", "subgraph"):
        for ratio in grid:
            run = TrainConfig.from_flat(cfg.to_flat())
            setattr(run.aug, name, float(ratio))
            run.aug.enabled = (name,)
            run_dir = Path(out_dir) / f"{name}_{ratio:g}"
            recs = cmd_pretrain(run, videos, run_dir)
            row = {"augmentation": name, "ratio": float(ratio),
                   "final_loss": [r["value"] for r in recs if r["key"] == "loss"][-1]}
            if finetune:
                res = cmd_finetune(run, videos, run_dir / CHECKPOINT_NAME, run_dir / "finetune")
                row["max_val_accuracy"] = res["max_val_accuracy"]
            rows.append(row)
    write_metrics(rows, Path(out_dir) / "sweep.jsonl")
    return rows


# fine-tuning -----------------------------------------------------------------

def qa_encoder_mode(encoder_mode: str, graph_scope: str) -> str:
    if graph_scope == "video_level":
        return "video_level"
    return "mean_readout" if encoder_mode == "mean_readout" else "factorized"


def cmd_finetune(cfg: TrainConfig, videos: Sequence[VideoRecord], checkpoint, out_dir) -> dict:
    """QA fine-tuning; returns a summary including the max validation accuracy."""
    cfg.validate()
    out_dir = Path(out_dir)
    frozen = cfg.finetune.mode == "frozen"
    train, val = split(list(videos), cfg.val_fraction)
    train_pairs, val_pairs = qa_pairs(train), qa_pairs(val)
    if not train_pairs or not val_pairs:
        raise PipelineError("fine-tuning needs question/answer items in both splits")
    init_rng, rng = _streams(cfg.seed)
    if frozen:
        if checkpoint is None:
            raise PipelineError("finetune.mode=frozen needs --checkpoint")
        ck = Checkpoint.load(checkpoint)
        enc_cfg = ck.config
        encoder, dims = ck.encoder, ck.input_dims
        for key in ("hidden_dim", "heads", "layers", "factor_mode", "link_factors"):
            setattr(cfg, key, getattr(enc_cfg, key))
    else:
        dims = input_dims_of(train)
        encoder = ModelParams.init(dims, cfg.hidden_dim, cfg.heads, cfg.layers, init_rng)
    d_qa = qa_dim_of(train)
    head = QAHeadParams.init(d_qa, cfg.hidden_dim, cfg.heads, cfg.finetune.conv_layers, init_rng)
    opt = AdamWState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    mode = qa_encoder_mode(cfg.factor_mode, cfg.finetune.graph_scope)
    trainer = QATrainer(encoder, head, opt, mode, frozen, cfg.link_factors, cfg.max_seq_len)
    enc_hash = param_hash(encoder.parameters())

    records, accs, pos_rates = [], [], []
    for epoch in range(cfg.finetune.max_epochs):
        positions = rng.integers(2, size=len(train_pairs))
        pos_rates.append(float(np.mean(positions == 0)))
        losses = []
        for idx in _batches(len(train_pairs), cfg.batch_size, rng):
            losses.append(trainer.step([train_pairs[i] for i in idx], positions[idx]))
        acc = trainer.accuracy(val_pairs)
        accs.append(acc)
        values = {"loss": float(np.mean(losses)), "val_accuracy": acc,
                  "correct_at_0": pos_rates[-1]}
        recs = _records(epoch + 1, values)
        records.extend(recs)
        write_metrics(recs, out_dir / METRICS_NAME, append=epoch > 0)
        log.info("finetune epoch %d loss %.4f val acc %.3f", epoch + 1, values["loss"], acc)
    if not accs:
        raise PipelineError("finetune.max_epochs is 0")
    after = param_hash(encoder.parameters())
    if frozen and after != enc_hash:
        raise PipelineError("frozen encoder changed during fine-tuning")
    summary = {"max_val_accuracy": max(accs), "best_epoch": int(np.argmax(accs)) + 1,
               "encoder_hash_before": enc_hash, "encoder_hash_after": after,
               "correct_at_0": float(np.mean(pos_rates)), "mode": cfg.finetune.mode,
               "graph_scope": cfg.finetune.graph_scope}
    write_metrics([{"epoch": len(accs), "key": "max_val_accuracy", "value": max(accs)}],
                  out_dir / METRICS_NAME, append=True)
    Checkpoint(cfg, dims, encoder, head, d_qa, opt, len(accs), "finetune",
               rng.bit_generator.state, {"summary": summary}).save(out_dir / CHECKPOINT_NAME)
    return summary


def cmd_eval(checkpoint, videos: Sequence[VideoRecord], which: str = "val") -> dict:
    ck = Checkpoint.load(checkpoint)
    if ck.head is None:
        raise PipelineError("checkpoint has no QA head; run finetune first")
    cfg = ck.config
    train, val = split(list(videos), cfg.val_fraction)
    chosen = {"val": val, "train": train, "all": list(videos)}[which]
    pairs = qa_pairs(chosen)
    trainer = QATrainer(ck.encoder, ck.head, AdamWState(), qa_encoder_mode(cfg.factor_mode, cfg.finetune.graph_scope),
                        True, cfg.link_factors, cfg.max_seq_len)
    return {"split": which, "items": len(pairs), "accuracy": trainer.accuracy(pairs)}


# speaker probe -----------------------------------------------------------------

def factor_vectors(videos: Sequence[VideoRecord], encoder: ModelParams, cfg: TrainConfig) -> list[np.ndarray]:
    """Unaugmented factor vectors [turns, d] of each video, without gradients."""
    from .attention import encode_groups

    out = []
    with T.no_grad():
        for i in range(0, len(videos), 32):
            chunk = videos[i:i + 32]
            groups = [layout(v, encoder, cfg.factor_mode, cfg.max_seq_len) for v in chunk]
            out.extend(z.data for z in encode_groups(groups, encoder, cfg.factor_mode, cfg.link_factors))
    return out


def speaker_pairs(video: VideoRecord, z: np.ndarray) -> list[tuple[np.ndarray, float]]:
    """(z_a1 || z_a2 -> 1) and (z_a1 || z_b1 -> 0) for the first speaker with
    two turns; empty when the video does not qualify."""
    speakers = [t.speaker_id for t in video.turns]
    for a in dict.fromkeys(speakers):
        own = [i for i, s in enumerate(speakers) if s == a]
        other = [i for i, s in enumerate(speakers) if s != a]
        if len(own) >= 2 and other:
            i, j, k = own[0], own[1], other[0]
            return [(np.concatenate([z[i], z[j]]), 1.0), (np.concatenate([z[i], z[k]]), 0.0)]
    return []


@dataclass
class ProbeResult:
    accuracy: float
    train_size: int
    val_size: int
    epochs: int
    best_epoch: int
    stop_size: int = 0


STOP_FRACTION = 0.2


def train_probe(x_train, y_train, x_val, y_val, cfg, seed: int = 0, stop=None) -> ProbeResult:
    """Two-layer MLP (ReLU, dropout, sigmoid) trained with MSE and early stopping.

    ``stop`` is an (x, y) pair watched for early stopping; without it the
    validation set doubles as the stopping set.
    """
    x_stop, y_stop = stop if stop is not None else (x_val, y_val)
    init_rng, rng = _streams(seed)
    d_in = x_train.shape[1]
    params = {"w1": init_params((d_in, cfg.hidden), rng=init_rng),
              "b1": init_params((cfg.hidden,), "zeros"),
              "w2": init_params((cfg.hidden, 1), rng=init_rng),
              "b2": init_params((1,), "zeros")}
    opt = AdamWState(lr=cfg.lr, weight_decay=0.0)

    def forward(x, train: bool):
        h = T.relu(T.add(T.matmul(x, params["w1"]), params["b1"]))
        h = T.dropout(h, cfg.dropout, rng if train else None)
        return T.reshape(T.sigmoid(T.add(T.matmul(h, params["w2"]), params["b2"])), (-1,))

    best = (np.inf, None, 0)
    epochs = 0
    for epoch in range(cfg.max_epochs):
        epochs = epoch + 1
        for idx in _batches(len(x_train), cfg.batch_size, rng):
            loss = T.mse(forward(x_train[idx], True), y_train[idx])
            T.backward(loss)
            adamw_step(params, opt)
        with T.no_grad():
            val_loss = T.mse(forward(x_stop, False), y_stop).item()
        if val_loss < best[0]:
            best = (val_loss, {k: v.data.copy() for k, v in params.items()}, epoch + 1)
        elif epoch + 1 - best[2] >= cfg.patience:
            break
    for k, v in best[1].items():
        params[k].data = v
    with T.no_grad():
        pred = forward(x_val, False).data
    acc = float(np.mean((pred >= 0.5) == (y_val >= 0.5)))
    return ProbeResult(acc, len(x_train), len(x_val), epochs, best[2], len(x_stop))


def cmd_probe_speaker(checkpoint, videos: Sequence[VideoRecord], probe_cfg=None) -> ProbeResult:
    ck = Checkpoint.load(checkpoint)
    cfg = ck.config
    if cfg.factor_mode != "factorized":
        raise PipelineError("speaker probe needs a checkpoint trained in factorized mode")
    probe_cfg = probe_cfg or cfg.probe
    zs = factor_vectors(list(videos), ck.encoder, cfg)
    # the stopping set is a video-level slice of the training split, so the
    # reported accuracy comes from videos never used for model selection
    sets = {"fit": ([], []), "stop": ([], []), "val": ([], [])}
    for video, z in zip(videos, zs):
        if is_validation(video.video_id, cfg.val_fraction):
            part = "val"
        else:
            part = "stop" if is_validation("stop:" + video.video_id, STOP_FRACTION) else "fit"
        xs, ys = sets[part]
        for x, y in speaker_pairs(video, z):
            xs.append(x)
            ys.append(y)
    if not all(xs for xs, _ in sets.values()):
        raise PipelineError("no qualifying videos (need two turns of one speaker and one of another)")
    (xt, yt), (xs, ys), (xv, yv) = (tuple(map(np.array, sets[k])) for k in ("fit", "stop", "val"))
    return train_probe(xt, yt, xv, yv, probe_cfg, cfg.seed, stop=(xs, ys))


# analyses ------------------------------------------------------------------------

def edge_reduction(turn_sizes: Sequence[int], link_factors: bool = True) -> float:
    full = count_edges(turn_sizes, "video_level")
    fact = count_edges(turn_sizes, "factorized", link_factors)
    return (full - fact) / full if full else 0.0


def bucket_label(num_turns: int) -> str:
    return ">=6" if num_turns >= 6 else str(num_turns)


def cmd_analyze_edges(videos: Sequence[VideoRecord], link_factors: bool = True,
                      max_len: int | None = None) -> dict:
    """Mean relative edge reduction of the factorized layout per turn-count bucket."""
    buckets: dict[str, list[float]] = {}
    for v in videos:
        sizes = [sum(min(len(t.features(k)), max_len or 10**9) for k in MODALITIES) for t in v.turns]
        buckets.setdefault(bucket_label(len(sizes)), []).append(edge_reduction(sizes, link_factors))
    order = sorted(buckets, key=lambda b: (b.startswith(">"), b))
    rows = [{"turns": b, "videos": len(buckets[b]), "mean_reduction": float(np.mean(buckets[b]))}
            for b in order]
    return {"buckets": rows,
            "plot": {"x": [r["turns"] for r in rows], "y": [100 * r["mean_reduction"] for r in rows]}}


def attention_split(video: VideoRecord, encoder: ModelParams, max_len: int | None = None
                    ) -> tuple[float, float]:
    """Mean alpha over cross-turn and within-turn modality edges of the
    video-level graph, over all layers and heads."""
    with T.no_grad():
        batch = assemble([layout(video, encoder, "video_level", max_len)])
        _, alphas = run_layers(batch, encoder.layers)
    modal = (batch.kinds[batch.src] != NodeKind.FACTOR) & (batch.kinds[batch.dst] != NodeKind.FACTOR)
    modal &= batch.src != batch.dst
    cross = modal & (batch.turn_of[batch.src] != batch.turn_of[batch.dst])
    within = modal & ~cross
    a = np.stack(alphas)  # [layers, E, H]
    return float(a[:, cross].mean()), float(a[:, within].mean())


def cmd_analyze_attention(checkpoint, videos: Sequence[VideoRecord]) -> dict:
    ck = Checkpoint.load(checkpoint)
    if ck.config.factor_mode != "video_level":
        raise PipelineError("attention analysis needs a checkpoint trained in video_level mode")
    cross, within = [], []
    for v in videos:
        if v.num_turns < 2:
            continue
        c, w = attention_split(v, ck.encoder, ck.config.max_seq_len)
        cross.append(c)
        within.append(w)
    if not cross:
        raise PipelineError("attention analysis needs videos with at least two turns")
    mc, mw = float(np.mean(cross)), float(np.mean(within))
    return {"videos": len(cross), "mean_cross_turn": mc, "mean_within_turn": mw,
            "cross_vs_within_pct": 100.0 * (mc / mw - 1.0)}
