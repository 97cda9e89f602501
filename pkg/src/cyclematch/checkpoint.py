"""Binary checkpoints: parameters, optimiser moments, step and RNG state.

Layout (all integers little-endian):

    b"CYCC"  u32 version  u32 header_len  header (UTF-8 JSON, sorted keys)
    repeated for every tensor listed in the header:
        u32 ndim  u64 dims[ndim]  float64 data (C order, little-endian)
    u32 CRC32 of every preceding byte

The header carries the encoder config and its sha256, the training config,
the step counter and the bit-generator state. Serialisation is canonical,
so save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .encoder import EncoderConfig, EncoderParams, _layer_shapes
from .optim import AdamState

log = logging.getLogger(__name__)

MAGIC = b"CYCC"
VERSION = 1
_GROUPS = ("param", "adam.m", "adam.v", "adam.v_max")


class CheckpointError(Exception):
    """Base class for checkpoint problems."""


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    encoder_cfg: EncoderConfig
    params: EncoderParams
    opt_state: AdamState
    step: int
    rng_state: dict
    train_cfg: dict | None = None
    version: int = VERSION

    @property
    def config_hash(self) -> str:
        return self.encoder_cfg.digest()


def _tensor_names(cfg: EncoderConfig):
    return [name for name, _, _ in _layer_shapes(cfg)]


def _arrays(ck: Checkpoint):
    names = _tensor_names(ck.encoder_cfg)
    sources = {
        "param": {k: t.data for k, t in ck.params.items()},
        "adam.m": ck.opt_state.m,
        "adam.v": ck.opt_state.v,
        "adam.v_max": ck.opt_state.v_max,
    }
    for group in _GROUPS:
        for name in names:
            yield f"{group}/{name}", sources[group][name]


def to_bytes(ck: Checkpoint) -> bytes:
    header = {
        "config_hash": ck.config_hash,
        "encoder_config": ck.encoder_cfg.to_dict(),
        "opt_step": int(ck.opt_state.step),
        "rng_state": ck.rng_state,
        "step": int(ck.step),
        "tensors": [key for key, _ in _arrays(ck)],
        "train_config": ck.train_cfg,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob]
    for key, arr in _arrays(ck):
        arr = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(ck: Checkpoint, path) -> Path:
    path = Path(path)
    data = to_bytes(ck)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf, self.pos, self.source = buf, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointCorruptError(f"{self.source}: truncated checkpoint (needed {n} bytes at offset {self.pos})")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(buf: bytes, expected: EncoderConfig | None = None, allow_mismatch: bool = False, source="<bytes>") -> Checkpoint:
    """Parse and validate a checkpoint.

    Raises CheckpointCorruptError on bad magic, truncation or checksum failure,
    CheckpointVersionError on an unknown version, and ConfigMismatchError when
    `expected` hashes differently (a warning instead with `allow_mismatch`).
    """
    r = _Reader(buf, source)
    if r.take(4) != MAGIC:
        raise CheckpointCorruptError(f"{source}: not a checkpoint (bad magic bytes)")
    version, header_len = r.unpack("<II")
    if version != VERSION:
        raise CheckpointVersionError(f"{source}: checkpoint version {version}, this build reads {VERSION}")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        # a short file also fails here, so report truncation when it is evident
        if len(buf) < 12 + header_len:
            raise CheckpointCorruptError(f"{source}: truncated checkpoint")
        raise CheckpointCorruptError(f"{source}: checksum mismatch, file is corrupt or truncated")
    try:
        header = json.loads(r.take(header_len).decode("utf-8"))
        enc_cfg = EncoderConfig.from_dict(header["encoder_config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointCorruptError(f"{source}: unreadable header: {exc}") from exc
    if enc_cfg.digest() != header["config_hash"]:
        raise CheckpointCorruptError(f"{source}: stored config hash does not match stored config")
    if expected is not None and expected.digest() != header["config_hash"]:
        msg = f"{source}: checkpoint encoder config hash {header['config_hash'][:12]} != expected {expected.digest()[:12]}"
        if not allow_mismatch:
            raise ConfigMismatchError(msg)
        log.warning("%s; proceeding", msg)

    groups = {g: {} for g in _GROUPS}
    for key in header["tensors"]:
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q")
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        group, name = key.split("/", 1)
        groups[group][name] = arr
    if r.pos != len(body):
        raise CheckpointCorruptError(f"{source}: {len(body) - r.pos} unexpected trailing bytes")

    names = _tensor_names(enc_cfg)
    for g in _GROUPS:
        if sorted(groups[g]) != sorted(names):
            raise CheckpointCorruptError(f"{source}: tensor group {g} does not match the encoder layout")
    params = EncoderParams(enc_cfg, {n: Tensor(groups["param"][n], requires_grad=True) for n in names})
    opt = AdamState(header["opt_step"], groups["adam.m"], groups["adam.v"], groups["adam.v_max"])
    return Checkpoint(enc_cfg, params, opt, header["step"], header["rng_state"], header["train_config"], version)


def load_checkpoint(path, expected: EncoderConfig | None = None, allow_mismatch: bool = False) -> Checkpoint:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(buf, expected, allow_mismatch, source=str(path))
