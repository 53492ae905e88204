"""Model checkpoints: a text header with the model config, then named CFT tensor blocks.

Layout::

    CONVFORMER-CKPT v1
    key=value            (one line per ModelConfig field)
    tensors=N
    name                 (then the CFT block for that tensor; repeated N times)

Tensors appear in ParameterStore order, parameters first, then buffers.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from .cft import read_cft, write_cft
from .config import format_value
from .errors import DataError
from .model import ConvFormer, ModelConfig

HEADER = b"CONVFORMER-CKPT v1\n"


def _parse(field: dataclasses.Field, text: str):
    default = field.default
    if isinstance(default, bool):
        if text not in ("true", "false"):
            raise DataError(f"checkpoint: bad boolean {text!r} for {field.name}")
        return text == "true"
    if isinstance(default, tuple) or field.name == "stage_channels":
        return tuple(int(v) for v in text.split(","))
    return int(text)


def save_checkpoint(path: str | Path, model: ConvFormer) -> None:
    items = list(model.store.state_items())
    with open(path, "wb") as fh:
        fh.write(HEADER)
        fh.writelines(f"{f.name}={format_value(getattr(model.cfg, f.name))}\n".encode() for f in dataclasses.fields(ModelConfig))
        fh.write(f"tensors={len(items)}\n".encode())
        for name, arr in items:
            fh.write(name.encode() + b"\n")
            write_cft(fh, arr)


def _line(fh) -> str:
    raw = fh.readline()
    if not raw.endswith(b"\n"):
        raise DataError("checkpoint truncated in header")
    return raw[:-1].decode()


def read_checkpoint(path: str | Path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    fields = {f.name: f for f in dataclasses.fields(ModelConfig)}
    with open(path, "rb") as fh:
        if fh.readline() != HEADER:
            raise DataError(f"{path}: not a CONVFORMER-CKPT v1 file")
        values = {}
        for _ in fields:
            key, _, val = _line(fh).partition("=")
            if key not in fields:
                raise DataError(f"{path}: unexpected config key {key!r}")
            values[key] = _parse(fields[key], val)
        key, _, count = _line(fh).partition("=")
        if key != "tensors":
            raise DataError(f"{path}: missing tensor count")
        state = {}
        for _ in range(int(count)):
            name = _line(fh)
            state[name] = read_cft(fh)
        if fh.read(1):
            raise DataError(f"{path}: trailing bytes after last tensor")
    return ModelConfig(**values), state


def load_checkpoint(path: str | Path) -> ConvFormer:
    cfg, state = read_checkpoint(path)
    model = ConvFormer(cfg)
    model.store.load_state(state)
    return model
