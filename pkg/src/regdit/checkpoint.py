"""Binary checkpoint container.

Layout (little-endian)::

    magic b"RGDT" | u32 version
    repeated: u16 name length | name (ascii) | u64 payload length | payload | u32 CRC32(payload)

Sections: ``config`` (canonical ``key=value`` text, sorted keys), ``shapes``
(one ``name|shape`` line per tensor, payload order) and ``payload`` (the
tensors as contiguous f32 values). Every tensor is stored as f32.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np
import torch

from .exceptions import FormatError, IntegrityError

MAGIC = b"RGDT"
VERSION = 1
SECTIONS = ("config", "shapes", "payload")


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def config_text(config: dict) -> str:
    for k, v in config.items():
        if "=" in k or "\n" in k or "\n" in _fmt_value(v):
            raise FormatError(f"config entry {k!r} cannot be serialized")
    return "".join(f"{k}={_fmt_value(config[k])}\n" for k in sorted(config))


def parse_config_text(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"malformed config line {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


@dataclass
class Container:
    """Flat view of a checkpoint: string config and named f32 tensors."""

    config: dict = field(default_factory=dict)
    tensors: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        names = list(self.tensors)
        # astype copies into C order and, unlike ascontiguousarray, keeps 0-d shapes
        arrays = [torch.as_tensor(self.tensors[n]).detach().cpu().to(torch.float32)
                  .numpy().astype("<f4", order="C") for n in names]
        shapes = "".join(f"{n}|{','.join(map(str, a.shape))}\n" for n, a in zip(names, arrays))
        payload = b"".join(a.tobytes() for a in arrays)
        body = [config_text(self.config).encode("utf-8"), shapes.encode("utf-8"), payload]
        out = [MAGIC, struct.pack("<I", VERSION)]
        for name, data in zip(SECTIONS, body):
            raw = name.encode("ascii")
            out += [struct.pack("<H", len(raw)), raw, struct.pack("<Q", len(data)), data,
                    struct.pack("<I", zlib.crc32(data) & 0xFFFFFFFF)]
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes, source: str = "<bytes>") -> "Container":
        if len(data) < 8 or data[:4] != MAGIC:
            raise FormatError(f"{source}: not a checkpoint (bad magic)")
        (version,) = struct.unpack_from("<I", data, 4)
        if version != VERSION:
            raise FormatError(f"{source}: checkpoint version {version}, expected {VERSION}")
        pos, sections = 8, {}
        while pos < len(data):
            try:
                (nlen,) = struct.unpack_from("<H", data, pos)
                name = data[pos + 2:pos + 2 + nlen].decode("ascii")
                pos += 2 + nlen
                (plen,) = struct.unpack_from("<Q", data, pos)
                pos += 8
                if pos + plen + 4 > len(data):
                    raise IntegrityError(f"{source}: section {name!r} truncated")
                body = data[pos:pos + plen]
                (crc,) = struct.unpack_from("<I", data, pos + plen)
            except (struct.error, UnicodeDecodeError) as exc:
                raise IntegrityError(f"{source}: truncated or corrupt section header") from exc
            if zlib.crc32(body) & 0xFFFFFFFF != crc:
                raise IntegrityError(f"{source}: checksum mismatch in section {name!r}")
            sections[name] = body
            pos += plen + 4
        missing = [s for s in SECTIONS if s not in sections]
        if missing:
            raise IntegrityError(f"{source}: missing sections {missing}")
        config = parse_config_text(sections["config"].decode("utf-8"))
        payload = np.frombuffer(sections["payload"], dtype="<f4")
        tensors, offset = {}, 0
        for line in sections["shapes"].decode("utf-8").splitlines():
            name, shape_text = line.rsplit("|", 1)
            shape = tuple(int(s) for s in shape_text.split(",") if s)
            count = int(np.prod(shape)) if shape else 1
            if offset + count > payload.size:
                raise IntegrityError(f"{source}: payload shorter than shape table")
            tensors[name] = torch.from_numpy(payload[offset:offset + count].copy().reshape(shape))
            offset += count
        if offset != payload.size:
            raise IntegrityError(f"{source}: payload longer than shape table")
        return cls(config, tensors)

    def save(self, path: str) -> str:
        data = self.to_bytes()
        try:
            with open(path, "wb") as fh:
                fh.write(data)
        except OSError as exc:
            raise OSError(f"cannot write checkpoint {path}: {exc.strerror or exc}") from exc
        return path

    @classmethod
    def load(cls, path: str) -> "Container":
        try:
            with open(path, "rb") as fh:
                data = fh.read()
        except OSError as exc:
            raise OSError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from exc
        return cls.from_bytes(data, source=path)


def prefixed(prefix: str, tensors: dict) -> dict:
    return {f"{prefix}{k}": v for k, v in tensors.items()}


def strip_prefix(prefix: str, tensors: dict) -> dict:
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
