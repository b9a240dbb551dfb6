"""Video, speaking-turn and question/answer records."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np


class NodeKind(IntEnum):
    TEXT = 0
    VISION = 1
    ACOUSTIC = 2
    FACTOR = 3
    QUESTION = 4
    ANSWER = 5


MODALITIES = (NodeKind.TEXT, NodeKind.VISION, NodeKind.ACOUSTIC)
MODALITY_NAMES = {NodeKind.TEXT: "text", NodeKind.VISION: "vision", NodeKind.ACOUSTIC: "acoustic"}


class RecordError(ValueError):
    pass


def _as_matrix(rows, name: str) -> np.ndarray:
    arr = np.asarray(rows, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, arr.shape[1] if arr.ndim == 2 else 0)
    if arr.ndim != 2:
        raise RecordError(f"{name}: expected a matrix, got shape {arr.shape}")
    return arr


@dataclass
class Turn:
    speaker_id: str
    text: np.ndarray
    vision: np.ndarray
    acoustic: np.ndarray

    def __post_init__(self):
        self.text = _as_matrix(self.text, "text")
        self.vision = _as_matrix(self.vision, "vision")
        self.acoustic = _as_matrix(self.acoustic, "acoustic")
        if self.num_nodes == 0:
            raise RecordError(f"turn of speaker {self.speaker_id!r} has no modality rows")

    def features(self, kind: NodeKind) -> np.ndarray:
        return getattr(self, MODALITY_NAMES[NodeKind(kind)])

    @property
    def num_nodes(self) -> int:
        return len(self.text) + len(self.vision) + len(self.acoustic)


@dataclass
class QAItem:
    question: np.ndarray
    correct: np.ndarray
    incorrect: np.ndarray
    correct_position: int = 0

    def __post_init__(self):
        for name in ("question", "correct", "incorrect"):
            arr = _as_matrix(getattr(self, name), name)
            if len(arr) == 0:
                raise RecordError(f"qa {name} sequence is empty")
            setattr(self, name, arr)
        if self.correct_position not in (0, 1):
            raise RecordError("correct_position must be 0 or 1")

    def answers(self) -> tuple[np.ndarray, np.ndarray]:
        """Answer sequences in presentation order."""
        if self.correct_position == 0:
            return self.correct, self.incorrect
        return self.incorrect, self.correct


@dataclass
class VideoRecord:
    video_id: str
    turns: list[Turn]
    qa_items: list[QAItem] = field(default_factory=list)

    def __post_init__(self):
        if not self.turns:
            raise RecordError(f"video {self.video_id!r} has no turns")

    @property
    def num_turns(self) -> int:
        return len(self.turns)

    def turn_sizes(self) -> list[int]:
        return [t.num_nodes for t in self.turns]
