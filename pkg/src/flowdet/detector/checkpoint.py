"""Checkpoint files: magic, JSON config, then named tensors in the FDTENSOR dump format.

Layout (little endian)::

    b"FDCKPT1\\n"
    u32 config length, config JSON (utf-8)
    u32 optimizer step
    u32 parameter count, then per tensor: u16 name length, name, tensor dump
    u32 optimizer tensor count, same record layout
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ..tensor import dump_tensor, load_tensor
from .config import ConfigError, ModelConfig
from .model import FlowDet, build_model
from .train import OptimizerState

MAGIC = b"FDCKPT1\n"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    optimizer: OptimizerState

    def model(self) -> FlowDet:
        m = build_model(self.config)
        m.load_state_dict(self.params)
        return m


def _records(tensors: dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw + dump_tensor(tensors[name]))
    return b"".join(out)


def _read_records(buf: bytes, pos: int) -> tuple[dict[str, np.ndarray], int]:
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + n].decode()
        pos += n
        out[name], pos = load_tensor(buf, pos)
    return out, pos


def save_checkpoint(path, model: FlowDet, state: OptimizerState | None = None) -> None:
    state = state or OptimizerState()
    cfg = model.cfg.to_json().encode()
    body = [MAGIC, struct.pack("<I", len(cfg)), cfg, struct.pack("<I", state.step),
            _records(model.state_dict()), _records(state.tensors())]
    with open(path, "wb") as fh:
        fh.write(b"".join(body))


def load_checkpoint(path, expect: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint; ``expect`` must equal the stored config when given."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if not buf.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        pos = len(MAGIC)
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        cfg = ModelConfig.from_json(buf[pos:pos + n].decode())
        pos += n
        (step,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        params, pos = _read_records(buf, pos)
        opt, pos = _read_records(buf, pos)
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise CheckpointError(f"{path}: stored config invalid: {exc}") from None
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from None
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    if expect is not None and expect.to_dict() != cfg.to_dict():
        diff = sorted(k for k, v in expect.to_dict().items() if cfg.to_dict().get(k) != v)
        raise CheckpointError(f"{path}: config mismatch in {diff}")
    return Checkpoint(cfg, params, OptimizerState.from_tensors(step, opt))
