"""Binary and JSON-lines persistence for datasets.

Binary layout (all little-endian)::

    b"DNSD"  u16 version  u8 task  u32 n_samples  u32 meta_len  meta (UTF-8 JSON)
    per sample:
        u32 T  u32 k  u32 target_rows  u32 target_cols
        f64[T] times  f64[T*k] observations  f64[rows*cols] target

Link targets are stored as a single row.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .datagen import Dataset, Sample
from .errors import FormatError

MAGIC = b"DNSD"
VERSION = 1
TASKS = {"trajectory": 0, "links": 1}
TASK_NAMES = {v: k for k, v in TASKS.items()}

_HEAD = struct.Struct("<4sHBII")
_SAMPLE = struct.Struct("<IIII")


def dumps(dataset):
    meta = json.dumps(dataset.metadata, sort_keys=True).encode("utf-8")
    parts = [_HEAD.pack(MAGIC, VERSION, TASKS[dataset.task], len(dataset.samples), len(meta)), meta]
    for s in dataset.samples:
        T, k = s.observations.shape
        tgt = np.asarray(s.target, dtype="<f8")
        rows, cols = (1, tgt.size) if tgt.ndim == 1 else tgt.shape
        parts.append(_SAMPLE.pack(T, k, rows, cols))
        parts.append(np.asarray(s.times, dtype="<f8").tobytes())
        parts.append(np.asarray(s.observations, dtype="<f8").tobytes())
        parts.append(tgt.tobytes())
    return b"".join(parts)


def loads(buf):
    buf = memoryview(buf)
    if len(buf) < _HEAD.size:
        raise FormatError(f"truncated header at byte {len(buf)} (need {_HEAD.size})")
    magic, version, task, count, meta_len = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {bytes(magic)!r} at byte 0")
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at byte 4")
    if task not in TASK_NAMES:
        raise FormatError(f"unknown task tag {task} at byte 6")
    off = _HEAD.size
    if off + meta_len > len(buf):
        raise FormatError(f"metadata runs past end of file at byte {off}")
    try:
        meta = json.loads(bytes(buf[off : off + meta_len]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable metadata at byte {off}: {exc}") from None
    off += meta_len

    def read_f64(n, what):
        nonlocal off
        end = off + 8 * n
        if end > len(buf):
            raise FormatError(f"truncated {what} at byte {off}")
        arr = np.frombuffer(buf[off:end], dtype="<f8").astype(np.float64)
        off = end
        return arr

    samples = []
    for i in range(count):
        if off + _SAMPLE.size > len(buf):
            raise FormatError(f"truncated header of sample {i} at byte {off}")
        T, k, rows, cols = _SAMPLE.unpack_from(buf, off)
        off += _SAMPLE.size
        times = read_f64(T, f"times of sample {i}")
        obs = read_f64(T * k, f"observations of sample {i}").reshape(T, k)
        tgt = read_f64(rows * cols, f"target of sample {i}")
        tgt = tgt if TASK_NAMES[task] == "links" else tgt.reshape(rows, cols)
        samples.append(Sample(times, obs, tgt))
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes at byte {off}")
    return Dataset(samples, TASK_NAMES[task], meta)


def write_dataset(dataset, path):
    with open(path, "wb") as fh:
        fh.write(dumps(dataset))


def read_dataset(path):
    with open(path, "rb") as fh:
        return loads(fh.read())


def dataset_io(dataset, path, direction):
    if direction == "write":
        write_dataset(dataset, path)
        return None
    if direction == "read":
        return read_dataset(path)
    raise ValueError(f"direction must be 'write' or 'read', not {direction!r}")


def export_jsonl(dataset, path):
    """One JSON object per sample; floats keep their exact repr."""
    with open(path, "w") as fh:
        for s in dataset.samples:
            rec = {
                "task": dataset.task,
                "times": s.times.tolist(),
                "observations": s.observations.tolist(),
                "target": np.asarray(s.target).tolist(),
            }
            fh.write(json.dumps(rec) + "\n")


def import_jsonl(path, metadata=None):
    samples, task = [], None
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            task = rec["task"]
            samples.append(
                Sample(
                    np.array(rec["times"], dtype=np.float64),
                    np.array(rec["observations"], dtype=np.float64),
                    np.array(rec["target"], dtype=np.float64),
                )
            )
    return Dataset(samples, task or "trajectory", metadata or {})


def fingerprint(path):
    """SHA-256 of a file's bytes."""
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
