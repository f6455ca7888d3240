"""Flat view of model parameters.

A ParamVector is the single optimization variable the meta-learning
solvers work with: one contiguous float64 buffer plus named segments
describing how to carve it into per-layer arrays. Buffers are treated as
immutable; updates produce new vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Segment:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return math.prod(self.shape)


class ParamVector:
    __slots__ = ("segments", "values")

    def __init__(self, segments, values):
        segments = tuple(segments)
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 1:
            raise ValueError(f"values must be a flat buffer, got shape {values.shape}")
        expected = 0
        for seg in segments:
            if seg.offset != expected:
                raise ValueError(
                    f"segment {seg.name!r} starts at {seg.offset}, expected {expected}: "
                    "segments must tile the buffer exactly"
                )
            expected += seg.size
        if expected != values.shape[0]:
            raise ValueError(
                f"segments cover {expected} values but buffer holds {values.shape[0]}"
            )
        self.segments = segments
        self.values = values

    @classmethod
    def from_arrays(cls, named_arrays) -> "ParamVector":
        """Flatten named arrays into one buffer, preserving order."""
        segments = []
        chunks = []
        offset = 0
        for name, arr in named_arrays:
            arr = np.asarray(arr, dtype=np.float64)
            segments.append(Segment(name, arr.shape, offset))
            chunks.append(arr.ravel())
            offset += arr.size
        values = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(segments, values)

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Unflatten into (name, array) views of the buffer."""
        return [
            (seg.name, self.values[seg.offset : seg.offset + seg.size].reshape(seg.shape))
            for seg in self.segments
        ]

    def arrays(self) -> list[np.ndarray]:
        return [arr for _, arr in self.named_arrays()]

    def with_values(self, values) -> "ParamVector":
        """Same segmentation over a new buffer."""
        return ParamVector(self.segments, values)

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def __repr__(self):
        return f"ParamVector({len(self.segments)} segments, {self.size} values)"
