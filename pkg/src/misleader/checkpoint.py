"""Binary model checkpoints.

Layout (all integers little-endian)::

    b"MSLD" | version u16 | descriptor length u32 | descriptor (UTF-8 JSON)
    | parameter count u32
    | per parameter: name length u16 | name (UTF-8) | rank u8 | dims u32 * rank | float32 payload
    | CRC32 u32 of every preceding byte

The descriptor holds the architecture spec and the init seed. Payloads are
float32, so a float32 model survives save/load bit for bit; wider models are
rounded on save.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np
import torch

from .errors import BadMagic, ChecksumMismatch, InvalidArgument, TruncatedFile, VersionMismatch
from .models import ArchitectureSpec, Model, param_shapes

MAGIC = b"MSLD"
FORMAT_VERSION = 1
MANIFEST = "manifest.json"


def encode(model: Model) -> bytes:
    descriptor = json.dumps(
        {"spec": model.spec.to_dict(), "rng_seed": int(model.rng_seed)},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    out = bytearray(MAGIC)
    out += struct.pack("<HI", FORMAT_VERSION, len(descriptor))
    out += descriptor
    out += struct.pack("<I", len(model.params))
    for name, value in model.params.items():
        raw = name.encode("utf-8")
        arr = value.detach().cpu().numpy().astype("<f4", copy=False)
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr).tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFile(f"{self.path}: needed {n} bytes at offset {self.pos}, file has {len(self.buf)}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes, path="<bytes>") -> Model:
    if len(buf) < 4:
        raise TruncatedFile(f"{path}: {len(buf)} bytes is too short for a checkpoint")
    if buf[:4] != MAGIC:
        raise BadMagic(f"{path}: magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < 10:
        raise TruncatedFile(f"{path}: header cut short")
    (version,) = struct.unpack("<H", buf[4:6])
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    if len(buf) < 14:
        raise TruncatedFile(f"{path}: header cut short")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        # a short file usually fails here too; report truncation when the structure says so
        _check_structure(body, path)
        raise ChecksumMismatch(f"{path}: CRC32 mismatch")
    return _parse(body, path)


def _check_structure(body: bytes, path) -> None:
    try:
        _parse(body, path)
    except TruncatedFile:
        raise
    except Exception:
        pass


def _parse(body: bytes, path) -> Model:
    r = _Reader(body, path)
    r.take(6)
    (dlen,) = r.unpack("<I")
    descriptor = json.loads(r.take(dlen).decode("utf-8"))
    spec = ArchitectureSpec.from_dict(descriptor["spec"])
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I") if rank else ()
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims)
        params[name] = torch.from_numpy(arr.astype(np.float32))
    if r.pos != len(body):
        raise TruncatedFile(f"{path}: {len(body) - r.pos} unexpected trailing bytes")
    expected = param_shapes(spec)
    got = {k: tuple(v.shape) for k, v in params.items()}
    if got != expected:
        raise InvalidArgument(f"{path}: parameters {got} do not match spec shapes {expected}")
    return Model(spec, params, int(descriptor["rng_seed"]))


def save_checkpoint(model: Model, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(model))
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Model:
    path = Path(path)
    return decode(path.read_bytes(), path)


def save_ensemble(ensemble, directory, extra: dict | None = None) -> Path:
    """One checkpoint per member plus a JSON manifest listing them in order."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for i, member in enumerate(ensemble.members):
        name = f"member_{i}.msld"
        save_checkpoint(member, directory / name)
        files.append(name)
    manifest = {
        "format_version": FORMAT_VERSION,
        "members": files,
        "member_configs": [c.to_dict() for c in ensemble.member_configs],
        "allow_homogeneous": bool(ensemble.allow_homogeneous),
    }
    if extra:
        manifest.update(extra)
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_ensemble(directory):
    from .defense import DefenseConfig
    from .ensemble import Ensemble

    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST).read_text())
    members = tuple(load_checkpoint(directory / f) for f in manifest["members"])
    configs = tuple(DefenseConfig.from_dict(c) for c in manifest.get("member_configs", []))
    return Ensemble(members, configs, manifest.get("allow_homogeneous", False))
