"""Checkpoints: a JSON header followed by raw little-endian float64 tensors.

Layout::

    b"DNSC"  u16 version  u32 header_len  header (UTF-8 JSON)  payload

The header lists every tensor as ``[group, name, shape, offset]`` with
offsets in bytes from the start of the payload. Groups are ``params``,
``adam_m``, ``adam_v`` and ``best``. Training bookkeeping (epoch, RNG state,
early-stopping counters, curves) lives in the header, so a loaded checkpoint
resumes exactly where the saved run stopped.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from . import model as M
from .autodiff import Tensor
from .errors import FormatError
from .training import AdamState, TrainConfig, TrainState

MAGIC = b"DNSC"
VERSION = 1
_HEAD = struct.Struct("<4sHI")
GROUPS = ("params", "adam_m", "adam_v", "best")


def _arrays(state):
    return {
        "params": {k: t.data for k, t in state.params.items()},
        "adam_m": state.adam.m,
        "adam_v": state.adam.v,
        "best": state.best,
    }


def dumps(state, train_config=None, extra=None):
    entries, chunks, offset = [], [], 0
    for group, arrays in _arrays(state).items():
        for name in sorted(arrays):
            a = np.ascontiguousarray(arrays[name], dtype="<f8")
            entries.append([group, name, list(a.shape), offset])
            chunks.append(a.tobytes())
            offset += a.nbytes
    header = {
        "version": VERSION,
        "config": state.params.config.to_dict(),
        "train_config": None if train_config is None else _tc_dict(train_config),
        "tensors": entries,
        "payload_bytes": offset,
        "adam": {"t": state.adam.t, "skipped": state.adam.skipped},
        "epoch": state.epoch,
        "rng_state": state.rng_state,
        "best_val": state.best_val,
        "best_epoch": state.best_epoch,
        "bad_epochs": state.bad_epochs,
        "curves": state.curves,
        "done": state.done,
        "extra": extra or {},
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    return _HEAD.pack(MAGIC, VERSION, len(raw)) + raw + b"".join(chunks)


def _tc_dict(tc):
    d = dict(vars(tc))
    d["betas"] = list(d["betas"])
    return d


def loads(buf):
    """Inverse of :func:`dumps`; returns ``(TrainState, TrainConfig | None, extra)``."""
    buf = memoryview(buf)
    if len(buf) < _HEAD.size:
        raise FormatError(f"truncated checkpoint header at byte {len(buf)}")
    magic, version, hlen = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {bytes(magic)!r} at byte 0")
    if version != VERSION:
        raise FormatError(f"checkpoint version {version} is not supported (expected {VERSION})")
    start = _HEAD.size + hlen
    if start > len(buf):
        raise FormatError(f"checkpoint header runs past end of file at byte {_HEAD.size}")
    try:
        header = json.loads(bytes(buf[_HEAD.size : start]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint header: {exc}") from None
    payload = buf[start:]
    if len(payload) != header["payload_bytes"]:
        raise FormatError(f"payload is {len(payload)} bytes, header promises {header['payload_bytes']}")
    groups = {g: {} for g in GROUPS}
    for group, name, shape, off in header["tensors"]:
        n = int(np.prod(shape, dtype=np.int64)) * 8
        if off + n > len(payload):
            raise FormatError(f"tensor {group}/{name} overruns payload at byte {start + off}")
        groups[group][name] = np.frombuffer(payload[off : off + n], dtype="<f8").astype(np.float64).reshape(shape)
    config = M.DnsConfig.from_dict(header["config"])
    params = M.DnsParameters(config, {k: Tensor(v, requires_grad=True, name=k) for k, v in groups["params"].items()})
    adam = AdamState(m=groups["adam_m"], v=groups["adam_v"], t=header["adam"]["t"], skipped=header["adam"]["skipped"])
    state = TrainState(
        params=params,
        adam=adam,
        epoch=header["epoch"],
        rng_state=header["rng_state"],
        best=groups["best"],
        best_val=header["best_val"],
        best_epoch=header["best_epoch"],
        bad_epochs=header["bad_epochs"],
        curves=header["curves"],
        done=header["done"],
    )
    tc = header["train_config"]
    tc = None if tc is None else TrainConfig(**tc)
    return state, tc, header["extra"]


def save(path, state, train_config=None, extra=None):
    data = dumps(state, train_config, extra)
    with open(path, "wb") as fh:
        fh.write(data)


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())


def load_params(path, best=True):
    """Parameters only; ``best`` picks the early-stopping snapshot."""
    state, _, _ = load(path)
    params = state.params
    if best and state.best:
        for k, v in state.best.items():
            params[k].data = v.copy()
    return params
