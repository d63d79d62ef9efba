"""Label spaces, one-hot encodings and the sentence-level joint label."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class LabelSpace:
    intents: tuple[str, ...]
    slots: tuple[str, ...]
    o_slot: str = "O"

    def __post_init__(self):
        object.__setattr__(self, "intents", tuple(self.intents))
        object.__setattr__(self, "slots", tuple(self.slots))
        if self.o_slot not in self.slots:
            raise ValueError(f"O slot {self.o_slot!r} missing from slot labels")
        if len(set(self.intents)) != len(self.intents) or len(set(self.slots)) != len(self.slots):
            raise ValueError("duplicate label names")

    @property
    def num_intents(self) -> int:
        return len(self.intents)

    @property
    def num_slots(self) -> int:
        return len(self.slots)

    @property
    def o_index(self) -> int:
        return self.slots.index(self.o_slot)

    def intent_id(self, name: str) -> int:
        try:
            return self.intents.index(name)
        except ValueError:
            raise KeyError(f"unknown intent {name!r}") from None

    def slot_id(self, name: str) -> int:
        try:
            return self.slots.index(name)
        except ValueError:
            raise KeyError(f"unknown slot label {name!r}") from None

    def to_json(self) -> dict:
        return {"intents": list(self.intents), "slots": list(self.slots), "o_slot": self.o_slot}

    @classmethod
    def from_json(cls, obj: dict) -> "LabelSpace":
        return cls(tuple(obj["intents"]), tuple(obj["slots"]), obj.get("o_slot", "O"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "LabelSpace":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def one_hot(index: int, size: int) -> np.ndarray:
    if not 0 <= index < size:
        raise ValueError(f"label id {index} outside [0, {size})")
    v = np.zeros(size)
    v[index] = 1.0
    return v


def sentence_slot_label(slots: Sequence[int], space: LabelSpace) -> np.ndarray:
    """Mean of the one-hot vectors of the non-O slots; zero vector if every slot is O."""
    if len(slots) == 0:
        raise ValueError("empty slot sequence")
    out = np.zeros(space.num_slots)
    o = space.o_index
    kept = [s for s in slots if s != o]
    for s in kept:
        out += one_hot(s, space.num_slots)
    if kept:
        out /= len(kept)
    return out


def joint_label(intent: int, slots: Sequence[int], space: LabelSpace) -> np.ndarray:
    """One-hot intent followed by the normalized non-O slot summary."""
    return np.concatenate(
        [one_hot(intent, space.num_intents), sentence_slot_label(slots, space)]
    )


def mu(a, b) -> float:
    """Label similarity: sum of the elementwise product of two label vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"label vectors differ in shape: {a.shape} vs {b.shape}")
    return float(np.dot(a, b))


def mu_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``mu`` for every pair of rows of ``a`` and ``b``."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if b.shape[0] == 0:
        return np.zeros((a.shape[0], 0))
    if a.shape[1] != b.shape[1]:
        raise ValueError("label vectors differ in length")
    return a @ b.T
