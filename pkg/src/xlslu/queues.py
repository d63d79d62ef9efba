"""FIFO sample queues of past (detached) representations and their labels."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .corpus import Utterance
from .labels import LabelSpace, joint_label, one_hot


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class QueueEntry:
    """All six queue views of one utterance: its source and multilingual
    sentence/word representations, and its intent, slot and joint labels."""

    h_cls: np.ndarray
    words: np.ndarray
    ml_h_cls: np.ndarray
    ml_words: np.ndarray
    intent_onehot: np.ndarray
    slot_onehots: np.ndarray
    joint: np.ndarray

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        n = self.words.shape[0]
        if self.ml_words.shape[0] != n or self.slot_onehots.shape[0] != n:
            raise ValueError("queue entry views disagree on utterance length")

    def __len__(self) -> int:
        return self.words.shape[0]

    @classmethod
    def from_utterance(
        cls, u: Utterance, space: LabelSpace, h_cls, words, ml_h_cls, ml_words
    ) -> "QueueEntry":
        return cls(
            h_cls=getattr(h_cls, "data", h_cls),
            words=getattr(words, "data", words),
            ml_h_cls=getattr(ml_h_cls, "data", ml_h_cls),
            ml_words=getattr(ml_words, "data", ml_words),
            intent_onehot=one_hot(u.intent, space.num_intents),
            slot_onehots=np.stack([one_hot(s, space.num_slots) for s in u.slots]),
            joint=joint_label(u.intent, u.slots, space),
        )


def entries_from_batch(utterances: Sequence[Utterance], space: LabelSpace, source, view) -> list[QueueEntry]:
    """Queue entries for an encoded batch (``source``/``view`` are EncodedBatch)."""
    out = []
    offs = source.offsets
    for i, u in enumerate(utterances):
        a, b = offs[i], offs[i + 1]
        out.append(QueueEntry.from_utterance(
            u, space,
            source.h_cls.data[i], source.words.data[a:b],
            view.h_cls.data[i], view.words.data[a:b],
        ))
    return out


class QueueSnapshot:
    """Immutable view of the queue contents, oldest entry first."""

    def __init__(self, entries: Iterable[QueueEntry]):
        self.entries: tuple[QueueEntry, ...] = tuple(entries)
        e = self.entries
        if e:
            self.h_cls = _frozen(np.stack([x.h_cls for x in e]))
            self.ml_h_cls = _frozen(np.stack([x.ml_h_cls for x in e]))
            self.intents = _frozen(np.stack([x.intent_onehot for x in e]))
            self.joints = _frozen(np.stack([x.joint for x in e]))
            self.words = _frozen(np.concatenate([x.words for x in e]))
            self.ml_words = _frozen(np.concatenate([x.ml_words for x in e]))
            self.slots = _frozen(np.concatenate([x.slot_onehots for x in e]))
        else:
            empty = _frozen(np.zeros((0, 0)))
            self.h_cls = self.ml_h_cls = self.intents = self.joints = empty
            self.words = self.ml_words = self.slots = empty
        self.lengths = tuple(len(x) for x in e)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def num_words(self) -> int:
        return sum(self.lengths)

    # the six queue roles, per entry
    @property
    def utterance_queue(self) -> list[np.ndarray]:
        return [x.h_cls for x in self.entries]

    @property
    def word_queue(self) -> list[np.ndarray]:
        return [x.words for x in self.entries]

    @property
    def ml_utterance_queue(self) -> list[np.ndarray]:
        return [x.ml_h_cls for x in self.entries]

    @property
    def ml_word_queue(self) -> list[np.ndarray]:
        return [x.ml_words for x in self.entries]

    @property
    def intent_label_queue(self) -> list[np.ndarray]:
        return [x.intent_onehot for x in self.entries]

    @property
    def slot_label_queue(self) -> list[np.ndarray]:
        return [x.slot_onehots for x in self.entries]


class SampleQueues:
    def __init__(self, capacity: int = 16):
        if capacity < 0:
            raise ValueError("queue capacity must be non-negative")
        self.capacity = capacity
        self._entries: deque[QueueEntry] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._entries)

    def enqueue_batch(self, entries: Iterable[QueueEntry]) -> "SampleQueues":
        """Append in order; the oldest entries drop out beyond capacity."""
        self._entries.extend(entries)
        return self

    def snapshot(self) -> QueueSnapshot:
        return QueueSnapshot(self._entries)

    def clear(self) -> None:
        self._entries.clear()
