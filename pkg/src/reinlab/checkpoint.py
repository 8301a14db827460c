"""Binary checkpoints of named, component-tagged tensors.

Layout (little-endian):

    magic "REINLAB1" | u32 version | u32 tensor_count
    per tensor: u16 name_len | name utf-8 | u8 component_tag | u8 ndim
                | u32 x ndim dims | f32 data
    trailer:    u32 meta_len | meta JSON utf-8

The trailer carries run metadata (config, iteration, seed, config hash);
readers that stop after ``tensor_count`` tensors can ignore it. Component
tags {backbone: 0, adapter: 1, head: 2} partition the tensor set, which is
what makes adapter/head swapping a pure re-tagging of byte ranges.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, ParseError, ShapeError

MAGIC = b"REINLAB1"
VERSION = 1
COMPONENTS = ("backbone", "adapter", "head")
_TAG = {name: i for i, name in enumerate(COMPONENTS)}


@dataclass
class Checkpoint:
    tensors: dict = field(default_factory=dict)  # name -> (np.float32 array, component)
    meta: dict = field(default_factory=dict)
    version: int = VERSION

    # -- construction --------------------------------------------------------

    @classmethod
    def from_model(cls, model, meta=None):
        tensors = {
            name: (np.asarray(t.data, dtype="<f4").copy(), comp)
            for name, t, comp in model.named_tensors()
        }
        return cls(tensors=tensors, meta=dict(meta or {}))

    def load_into(self, model):
        """Copy stored arrays into a freshly built model's tensors."""
        names = {name for name, _, _ in model.named_tensors()}
        missing = names - set(self.tensors)
        extra = set(self.tensors) - names
        if missing or extra:
            raise ContractError(
                f"checkpoint/model tensor sets differ; missing={sorted(missing)[:3]} "
                f"extra={sorted(extra)[:3]}")
        for name, t, _ in model.named_tensors():
            arr, _ = self.tensors[name]
            if tuple(arr.shape) != tuple(t.shape):
                raise ShapeError(
                    f"tensor {name!r}: checkpoint shape {arr.shape} != model {t.shape}")
            t.data[:] = arr
        return model

    def component(self, comp):
        return {n: v for n, v in self.tensors.items() if v[1] == comp}

    # -- serialization -------------------------------------------------------

    def to_bytes(self) -> bytes:
        out = [MAGIC, struct.pack("<II", self.version, len(self.tensors))]
        for name, (arr, comp) in self.tensors.items():
            nb = name.encode("utf-8")
            arr = np.asarray(arr, dtype="<f4")
            out.append(struct.pack("<H", len(nb)))
            out.append(nb)
            out.append(struct.pack("<BB", _TAG[comp], arr.ndim))
            out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(arr.tobytes())
        meta = json.dumps(self.meta, sort_keys=True, separators=(",", ":")).encode()
        out.append(struct.pack("<I", len(meta)))
        out.append(meta)
        return b"".join(out)

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes, path="<bytes>") -> "Checkpoint":
        pos = 0

        def take(n, what):
            nonlocal pos
            if pos + n > len(data):
                raise ParseError(path, pos, f"truncated while reading {what}")
            chunk = data[pos:pos + n]
            pos += n
            return chunk

        if take(8, "magic") != MAGIC:
            raise ParseError(path, 0, "bad magic; not a checkpoint file")
        version, count = struct.unpack("<II", take(8, "header"))
        if version != VERSION:
            raise ParseError(path, 8, f"unsupported version {version}")
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", take(2, "name length"))
            name = take(name_len, "name").decode("utf-8")
            tag, ndim = struct.unpack("<BB", take(2, "tensor header"))
            if tag >= len(COMPONENTS):
                raise ParseError(path, pos - 2, f"unknown component tag {tag}")
            dims = struct.unpack(f"<{ndim}I", take(4 * ndim, "dims"))
            n_items = int(np.prod(dims, dtype=np.int64)) if ndim else 1
            raw = take(4 * n_items, f"data of {name!r}")
            arr = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
            tensors[name] = (arr, COMPONENTS[tag])
        (meta_len,) = struct.unpack("<I", take(4, "metadata length"))
        meta = json.loads(take(meta_len, "metadata").decode("utf-8")) if meta_len else {}
        return cls(tensors=tensors, meta=meta, version=version)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes(), path=str(path))


def swap_adapter(base: Checkpoint, donor: Checkpoint) -> Checkpoint:
    """Base's backbone with the donor's adapter and head.

    Both checkpoints must describe the same architecture: identical tensor
    names with identical shapes, component by component.
    """
    for comp in COMPONENTS:
        b, d = base.component(comp), donor.component(comp)
        if set(b) != set(d):
            diff = sorted(set(b) ^ set(d))
            raise ShapeError(f"{comp} tensor sets differ, e.g. {diff[:3]}")
        for name in b:
            if b[name][0].shape != d[name][0].shape:
                raise ShapeError(
                    f"tensor {name!r}: base shape {b[name][0].shape} != "
                    f"donor {d[name][0].shape}")
    tensors = {}
    for name, (arr, comp) in donor.tensors.items():
        src = base if comp == "backbone" else donor
        tensors[name] = (src.tensors[name][0].copy(), comp)
    return Checkpoint(tensors=tensors, meta=dict(donor.meta), version=donor.version)
