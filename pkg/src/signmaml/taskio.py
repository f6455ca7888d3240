"""Flat binary serialization for task fixtures and parameter checkpoints.

Task layout (all little-endian):
  header: 5 x int32 -- kind code (1 = gaussian-blobs, 2 = sinusoid),
          input dim d, way N (0 for regression), shot K, query Q
  support inputs as float64, then query inputs as float64
  classification: support labels then query labels as int32
  regression:     support targets then query targets as float64

An episode file is the concatenation of its task records, prefixed by a
single int32 task count.

Checkpoint layout: int32 segment count, then per segment an int32 name
length, the utf-8 name, int32 ndim and int32 dims; then the flat float64
buffer.
"""

from __future__ import annotations

import struct

import numpy as np

from .models import LossKind
from .params import ParamVector, Segment
from .tasks import Task

_KIND_CODES = {"gaussian-blobs": 1, "sinusoid": 2}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


def task_to_bytes(task: Task) -> bytes:
    classification = task.loss_kind is LossKind.CROSS_ENTROPY
    code = 1 if classification else 2
    d = task.support_x.shape[1]
    n = task.n_way if classification else 0
    header = struct.pack("<5i", code, d, n, task.k_shot, task.n_query)
    parts = [
        header,
        np.ascontiguousarray(task.support_x, dtype="<f8").tobytes(),
        np.ascontiguousarray(task.query_x, dtype="<f8").tobytes(),
    ]
    if classification:
        parts.append(np.ascontiguousarray(task.support_y, dtype="<i4").tobytes())
        parts.append(np.ascontiguousarray(task.query_y, dtype="<i4").tobytes())
    else:
        parts.append(np.ascontiguousarray(task.support_y, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(task.query_y, dtype="<f8").tobytes())
    return b"".join(parts)


def task_from_bytes(buf: bytes, offset: int = 0) -> tuple[Task, int]:
    """Decode one task record; returns (task, offset past the record)."""
    code, d, n, k, q = struct.unpack_from("<5i", buf, offset)
    if code not in _CODE_KINDS:
        raise ValueError(f"unknown task kind code {code}")
    offset += 20
    classification = code == 1
    n_support = n * k if classification else k
    n_query = n * q if classification else q

    def read_f8(count, shape):
        nonlocal offset
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset += 8 * count
        return arr.astype(np.float64)

    def read_i4(count):
        nonlocal offset
        arr = np.frombuffer(buf, dtype="<i4", count=count, offset=offset)
        offset += 4 * count
        return arr.astype(np.int64)

    support_x = read_f8(n_support * d, (n_support, d))
    query_x = read_f8(n_query * d, (n_query, d))
    if classification:
        support_y = read_i4(n_support)
        query_y = read_i4(n_query)
        kind = LossKind.CROSS_ENTROPY
    else:
        support_y = read_f8(n_support, (n_support, 1)).reshape(n_support, 1)
        query_y = read_f8(n_query, (n_query, 1)).reshape(n_query, 1)
        kind = LossKind.MSE
    task = Task(support_x, support_y, query_x, query_y, kind, n if classification else 1, k, q)
    return task, offset


def save_episode(path, tasks: list[Task]) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<i", len(tasks)))
        for task in tasks:
            fh.write(task_to_bytes(task))


def load_episode(path) -> list[Task]:
    with open(path, "rb") as fh:
        buf = fh.read()
    (count,) = struct.unpack_from("<i", buf, 0)
    offset = 4
    tasks = []
    for _ in range(count):
        task, offset = task_from_bytes(buf, offset)
        tasks.append(task)
    return tasks


def save_params(path, params: ParamVector) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<i", len(params.segments)))
        for seg in params.segments:
            name = seg.name.encode("utf-8")
            fh.write(struct.pack("<i", len(name)))
            fh.write(name)
            fh.write(struct.pack("<i", len(seg.shape)))
            fh.write(struct.pack(f"<{len(seg.shape)}i", *seg.shape))
        fh.write(np.ascontiguousarray(params.values, dtype="<f8").tobytes())


def load_params(path) -> ParamVector:
    with open(path, "rb") as fh:
        buf = fh.read()
    (n_segments,) = struct.unpack_from("<i", buf, 0)
    offset = 4
    segments = []
    total = 0
    for _ in range(n_segments):
        (name_len,) = struct.unpack_from("<i", buf, offset)
        offset += 4
        name = buf[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<i", buf, offset)
        offset += 4
        shape = struct.unpack_from(f"<{ndim}i", buf, offset)
        offset += 4 * ndim
        segments.append(Segment(name, tuple(shape), total))
        total += int(np.prod(shape))
    values = np.frombuffer(buf, dtype="<f8", count=total, offset=offset).astype(np.float64)
    return ParamVector(segments, values)
