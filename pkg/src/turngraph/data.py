"""Synthetic multimodal videos and the newline-delimited record format.

Each line of a record file is one JSON object::

    {"video_id": "...",
     "turns": [{"speaker_id": "...", "text": [[...], ...],
                "vision": [[...]], "acoustic": [[...]]}, ...],
     "qa": [{"question": [[...]], "correct": [[...]], "incorrect": [[...]]}, ...]}

Rows are time steps, already aligned by the exporter. Floats are written with
Python's shortest round-trip repr, so a load after save is exact.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .records import MODALITIES, MODALITY_NAMES, QAItem, RecordError, Turn, VideoRecord


@dataclass
class SynthConfig:
    videos: int = 64
    turns_min: int = 4
    turns_max: int = 4
    nodes_min: int = 2
    nodes_max: int = 4
    d_text: int = 12
    d_vision: int = 10
    d_acoustic: int = 8
    d_qa: int = 12
    speakers: int = 2
    speaker_signal: float = 1.0
    turn_signal: float = 1.0
    answer_signal: float = 1.0
    noise: float = 1.0
    qa_per_video: int = 2
    qa_len: int = 4
    seed: int = 0

    def validate(self) -> None:
        for name in ("videos", "turns_min", "turns_max", "nodes_min", "nodes_max", "d_text",
                     "d_vision", "d_acoustic", "d_qa", "speakers", "qa_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name}: must be >= 1")
        if self.qa_per_video < 0:
            raise ValueError("qa_per_video: must be >= 0")
        if self.turns_max < self.turns_min or self.nodes_max < self.nodes_min:
            raise ValueError("turns/nodes: max must be >= min")
        for name in ("speaker_signal", "turn_signal", "answer_signal", "noise"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name}: must be >= 0")

    @property
    def modality_dims(self) -> dict:
        return dict(zip(MODALITIES, (self.d_text, self.d_vision, self.d_acoustic)))


def generate(cfg: SynthConfig) -> list[VideoRecord]:
    """Videos whose node features are a persistent per-speaker bias, a per-turn
    topic shared by the turn's nodes, and per-node noise.

    Each QA item picks a turn; its question and correct answer carry that
    speaker's answer-space bias, the incorrect answer another speaker's.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    dims = cfg.modality_dims
    out = []
    for v in range(cfg.videos):
        vid = f"video{v:05d}"
        bias = rng.normal(0.0, cfg.speaker_signal, size=(cfg.speakers, sum(dims.values())))
        qa_bias = rng.normal(0.0, 1.0, size=(cfg.speakers, cfg.d_qa))
        num_turns = int(rng.integers(cfg.turns_min, cfg.turns_max + 1))
        who = rng.integers(cfg.speakers, size=num_turns)
        turns = []
        for s in range(num_turns):
            n = int(rng.integers(cfg.nodes_min, cfg.nodes_max + 1))
            topic = rng.normal(0.0, cfg.turn_signal, size=bias.shape[1])
            feats = bias[who[s]] + topic + cfg.noise * rng.normal(size=(n, bias.shape[1]))
            parts = np.split(feats, np.cumsum(list(dims.values()))[:-1], axis=1)
            turns.append(Turn(f"{vid}/spk{who[s]}", *parts))
        items = []
        for _ in range(cfg.qa_per_video):
            spk = who[int(rng.integers(num_turns))]
            if cfg.speakers > 1:
                other = (spk + int(rng.integers(1, cfg.speakers))) % cfg.speakers
                wrong = qa_bias[other]
            else:
                wrong = rng.normal(0.0, 1.0, size=cfg.d_qa)

            def seq(center):
                return cfg.answer_signal * center + cfg.noise * rng.normal(size=(cfg.qa_len, cfg.d_qa))

            items.append(QAItem(seq(qa_bias[spk]), seq(qa_bias[spk]), seq(wrong)))
        out.append(VideoRecord(vid, turns, items))
    return out


def _rows(arr: np.ndarray) -> list:
    return arr.tolist()


def record_to_dict(video: VideoRecord) -> dict:
    return {
        "video_id": video.video_id,
        "turns": [{"speaker_id": t.speaker_id,
                   **{MODALITY_NAMES[k]: _rows(t.features(k)) for k in MODALITIES}}
                  for t in video.turns],
        "qa": [{"question": _rows(q.question), "correct": _rows(q.correct),
                "incorrect": _rows(q.incorrect)} for q in video.qa_items],
    }


def save_records(videos: Iterable[VideoRecord], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for v in videos:
            fh.write(json.dumps(record_to_dict(v)))
            fh.write("\n")


class _DimTracker:
    def __init__(self):
        self.dims: dict[str, int] = {}

    def check(self, name: str, arr: np.ndarray, where: str) -> None:
        if len(arr) == 0:
            return
        want = self.dims.setdefault(name, arr.shape[1])
        if arr.shape[1] != want:
            raise RecordError(f"{where}: {name} features have dim {arr.shape[1]}, expected {want}")


def load_records(path) -> list[VideoRecord]:
    """Parse and validate a record file; errors carry the 1-based line number."""
    dims = _DimTracker()
    out = []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
                turns = [Turn(t["speaker_id"], t["text"], t["vision"], t["acoustic"])
                         for t in obj["turns"]]
                items = [QAItem(q["question"], q["correct"], q["incorrect"]) for q in obj.get("qa", [])]
                video = VideoRecord(str(obj["video_id"]), turns, items)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
                raise RecordError(f"{where}: malformed record: {err}") from None
            for t in video.turns:
                for k in MODALITIES:
                    dims.check(MODALITY_NAMES[k], t.features(k), where)
            for q in video.qa_items:
                for arr in (q.question, q.correct, q.incorrect):
                    dims.check("qa", arr, where)
            out.append(video)
    return out


def is_validation(video_id: str, fraction: float = 0.2) -> bool:
    """Stable 80/20 split keyed on a hash of the video id."""
    return zlib.crc32(video_id.encode()) % 1000 < int(round(fraction * 1000))


def split(videos: list[VideoRecord], fraction: float = 0.2) -> tuple[list[VideoRecord], list[VideoRecord]]:
    train = [v for v in videos if not is_validation(v.video_id, fraction)]
    val = [v for v in videos if is_validation(v.video_id, fraction)]
    return train, val
