"""Checkpoint container shared by every stage.

Layout (little-endian):
    magic        4 bytes  (RVC1 codec, RVA1 transformer, RVL1 refiner, RVD1 decoder)
    step         u32      global training step
    seed         u32
    config_len   u32, then config_len bytes of UTF-8 "key=value" lines
    count        u32      number of tensor records
    per record:  u16 name length, UTF-8 name, RVT1 tensor blob

Records are written in module parameter order, so save -> load -> save is
byte-identical.
"""
from __future__ import annotations

import dataclasses
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO

from .autodiff.io import FormatError, read_tensor, tensor_to_bytes
from .codec import ScaleSchedule

MAGICS = {"codec": b"RVC1", "transformer": b"RVA1", "refiner": b"RVL1", "decoder": b"RVD1"}


@dataclass
class Checkpoint:
    magic: bytes
    config: dict = field(default_factory=dict)
    tensors: dict = field(default_factory=dict)
    step: int = 0
    seed: int = 0

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        write_checkpoint(buf, self)
        return buf.getvalue()


def encode_config(config: dict) -> bytes:
    lines = []
    for key, value in config.items():
        text = format_value(value)
        if "\n" in text or "=" in key:
            raise FormatError(f"config entry {key!r} cannot be serialized")
        lines.append(f"{key}={text}\n")
    return "".join(lines).encode("utf-8")


def decode_config(raw: bytes) -> dict:
    out = {}
    for line in raw.decode("utf-8").splitlines():
        if line:
            key, _, value = line.partition("=")
            out[key] = value
    return out


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, ScaleSchedule):
        return str(value)
    if isinstance(value, tuple):
        return "x".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_checkpoint(fh: BinaryIO, ckpt: Checkpoint) -> None:
    if len(ckpt.magic) != 4:
        raise FormatError(f"bad checkpoint magic {ckpt.magic!r}")
    cfg = encode_config(ckpt.config)
    fh.write(ckpt.magic)
    fh.write(struct.pack("<III", ckpt.step, ckpt.seed, len(cfg)))
    fh.write(cfg)
    fh.write(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        raw = name.encode("utf-8")
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        fh.write(tensor_to_bytes(arr))


def read_checkpoint(fh: BinaryIO, expect: bytes | None = None) -> Checkpoint:
    magic = fh.read(4)
    if len(magic) != 4:
        raise FormatError("truncated checkpoint header")
    if expect is not None and magic != expect:
        raise FormatError(f"expected checkpoint {expect!r}, found {magic!r}")
    step, seed, n_cfg = struct.unpack("<III", _exact(fh, 12))
    config = decode_config(_exact(fh, n_cfg))
    (count,) = struct.unpack("<I", _exact(fh, 4))
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", _exact(fh, 2))
        name = _exact(fh, n).decode("utf-8")
        tensors[name] = read_tensor(fh)
    if fh.read(1):
        raise FormatError("trailing bytes after checkpoint records")
    return Checkpoint(magic, config, tensors, step, seed)


def _exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated checkpoint: wanted {n} bytes, got {len(buf)}")
    return buf


def save(path, kind: str, module, config, step: int = 0, seed: int = 0) -> Checkpoint:
    """Write ``module``'s parameters with a config echo; ``config`` is a dataclass or dict."""
    if dataclasses.is_dataclass(config):
        cfg = {f.name: getattr(config, f.name) for f in dataclasses.fields(config)}
    else:
        cfg = dict(config)
    ckpt = Checkpoint(MAGICS[kind], cfg, module.state_dict(), step, seed)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        write_checkpoint(fh, ckpt)
    return ckpt


def load(path, kind: str) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        return read_checkpoint(fh, MAGICS[kind])


def parse_dataclass(cls, raw: dict):
    """Rebuild a config dataclass from a config echo, using field defaults for types."""
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in raw:
            continue
        default = f.default if f.default is not dataclasses.MISSING else None
        kwargs[f.name] = parse_value(raw[f.name], default)
    return cls(**kwargs)


def parse_value(text: str, like):
    if isinstance(like, bool):
        if text not in ("true", "false"):
            raise ValueError(f"expected true/false, got {text!r}")
        return text == "true"
    if isinstance(like, ScaleSchedule):
        return ScaleSchedule.parse(text)
    if isinstance(like, tuple):
        return tuple(int(v) for v in text.split("x"))
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text
