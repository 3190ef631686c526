"""Discrete attribute prompts. Id 0 in every slot is reserved for the null prompt."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

SHAPES = ("disk", "square", "cross")
POSITIONS = ("nw", "ne", "sw", "se")
INTENSITIES = ("low", "mid", "high")
VOCAB = (len(SHAPES) + 1, len(POSITIONS) + 1, len(INTENSITIES) + 1)
SLOT_NAMES = ("shape", "position", "intensity")


class Prompt(NamedTuple):
    shape: int
    position: int
    intensity: int

    @classmethod
    def null(cls) -> "Prompt":
        return cls(0, 0, 0)

    @classmethod
    def parse(cls, text: str) -> "Prompt":
        """Parse ``"disk,ne,high"`` (names) or ``"1,2,3"`` (ids); ``""`` is the null prompt."""
        text = text.strip()
        if not text:
            return cls.null()
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != 3:
            raise ValueError(f"prompt needs 3 comma-separated slots, got {text!r}")
        ids = []
        for part, names in zip(parts, (SHAPES, POSITIONS, INTENSITIES)):
            if part.isdigit():
                ids.append(int(part))
            elif part in names:
                ids.append(names.index(part) + 1)
            else:
                raise ValueError(f"unknown attribute {part!r}; expected one of {', '.join(names)}")
        return cls(*ids).validate()

    def validate(self) -> "Prompt":
        for slot, (tok, vocab) in enumerate(zip(self, VOCAB)):
            if not 0 <= tok < vocab:
                raise ValueError(f"{SLOT_NAMES[slot]} id {tok} outside vocabulary [0, {vocab})")
        return self

    def is_null(self) -> bool:
        return self == (0, 0, 0)

    def names(self) -> tuple[str, str, str]:
        return tuple(
            names[tok - 1] if tok else "" for tok, names in zip(self, (SHAPES, POSITIONS, INTENSITIES))
        )

    def __str__(self) -> str:
        return ",".join(self.names()) if not self.is_null() else "<null>"

    def replace_slot(self, slot: int, value: int) -> "Prompt":
        ids = list(self)
        ids[slot] = value
        return Prompt(*ids).validate()


def one_hot(prompts, slot: int) -> np.ndarray:
    ids = np.array([p[slot] for p in prompts])
    out = np.zeros((len(ids), VOCAB[slot]))
    out[np.arange(len(ids)), ids] = 1.0
    return out


def single_attribute_edits(prompt: Prompt) -> list[Prompt]:
    """Every prompt differing from ``prompt`` in exactly one slot."""
    out = []
    for slot, vocab in enumerate(VOCAB):
        for tok in range(1, vocab):
            if tok != prompt[slot]:
                out.append(prompt.replace_slot(slot, tok))
    return out
