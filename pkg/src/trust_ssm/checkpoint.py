"""Binary checkpoint container.

Layout (all integers little-endian)::

    TRUSTSSM-CKPT\\n
    version=1\\n
    key=value\\n ...          config.* and meta.* entries
    arrays=<n>\\n
    end\\n
    n x [kind:u8 ('p' param | 'b' buffer), name_len:u16, name:utf8,
         ndim:u8, dims:u32*ndim, count:u64, data:<f8 * count]
    sha256 digest (32 bytes) of everything above
"""
from __future__ import annotations

import dataclasses
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"TRUSTSSM-CKPT\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 16
    channels: int = 1
    patch_size: int = 4
    embed_dim: int = 16
    n_blocks: int = 2
    state_dim: int = 4
    expand: int = 1
    n_classes: int = 8
    norm: str = "batch"
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.norm != "batch":
            raise ValueError(f"unsupported norm {self.norm!r}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def d_inner(self) -> int:
        return self.expand * self.embed_dim

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kw = {}
        for f in dataclasses.fields(cls):
            if f.name in d:
                kw[f.name] = type(f.default)(d[f.name])
        return cls(**kw)


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def to_bytes(self) -> bytes:
        head = [MAGIC, f"version={self.version}\n".encode()]
        for k, v in self.config.to_dict().items():
            head.append(f"config.{k}={v!r}\n".encode() if isinstance(v, float) else f"config.{k}={v}\n".encode())
        for k, v in self.metadata.items():
            if "\n" in str(k) or "\n" in str(v) or "=" in str(k):
                raise CheckpointError(f"metadata entry {k!r} is not representable")
            head.append(f"meta.{k}={v}\n".encode())
        arrays = [("p", n, a) for n, a in self.params.items()] + [("b", n, a) for n, a in self.buffers.items()]
        head.append(f"arrays={len(arrays)}\nend\n".encode())
        body = [b"".join(head)]
        for kind, name, arr in arrays:
            arr = np.ascontiguousarray(arr, dtype="<f8")
            nb = name.encode()
            body.append(struct.pack("<BH", ord(kind), len(nb)) + nb)
            body.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            body.append(struct.pack("<Q", arr.size) + arr.tobytes())
        payload = b"".join(body)
        return payload + hashlib.sha256(payload).digest()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if not raw.startswith(MAGIC):
            raise CorruptCheckpointError("not a checkpoint file (bad magic)")
        if len(raw) < len(MAGIC) + 32:
            raise CorruptCheckpointError("truncated checkpoint")
        payload, digest = raw[:-32], raw[-32:]
        if hashlib.sha256(payload).digest() != digest:
            raise CorruptCheckpointError("checksum mismatch")
        end = payload.index(b"end\n") + 4
        lines = payload[len(MAGIC):end].decode().splitlines()
        kv = dict(line.split("=", 1) for line in lines if "=" in line)
        version = int(kv.pop("version"))
        if version != FORMAT_VERSION:
            raise VersionMismatchError(f"checkpoint version {version}, expected {FORMAT_VERSION}")
        n_arrays = int(kv.pop("arrays"))
        config = ModelConfig.from_dict({k[7:]: v for k, v in kv.items() if k.startswith("config.")})
        meta = {k[5:]: v for k, v in kv.items() if k.startswith("meta.")}
        params, buffers = {}, {}
        off = end
        for _ in range(n_arrays):
            kind, nlen = struct.unpack_from("<BH", payload, off)
            off += 3
            name = payload[off:off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<B", payload, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", payload, off)
            off += 4 * ndim
            (count,) = struct.unpack_from("<Q", payload, off)
            off += 8
            if count != int(np.prod(shape, dtype=np.int64)):
                raise CorruptCheckpointError(f"array {name!r}: length {count} does not match shape {shape}")
            arr = np.frombuffer(payload, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(shape)
            off += 8 * count
            (params if chr(kind) == "p" else buffers)[name] = arr
        if off != len(payload):
            raise CorruptCheckpointError("trailing bytes after arrays")
        return cls(config, params, buffers, meta, version)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def equals(self, other: "Checkpoint") -> bool:
        """Bit-level equality of config and every array."""
        if self.config != other.config or self.params.keys() != other.params.keys():
            return False
        if self.buffers.keys() != other.buffers.keys():
            return False
        pairs = [(self.params[k], other.params[k]) for k in self.params]
        pairs += [(self.buffers[k], other.buffers[k]) for k in self.buffers]
        return all(a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in pairs)
