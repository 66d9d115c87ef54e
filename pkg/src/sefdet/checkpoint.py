"""Binary checkpoint format for trained detectors.

Layout (all integers little-endian):
  magic   b"SEFD"
  u32     format version (currently 1)
  u64     metadata length, then that many bytes of UTF-8 JSON
  u32     tensor count
  table   per tensor: u16 name length, name bytes, u8 ndim, ndim * u32 dims,
          u8 dtype code (0 = float32), u64 offset into the payload section
  payload raw little-endian float32 data, in table order

The backbone is not serialized: it is a deterministic function of
(backbone_seed, dims), both recorded in the metadata together with a hash of
the materialized tensors so a mismatched reconstruction is caught on load.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ExpertModel, ModelDims, SefModel, init_backbone, params_hash
from .validation import FormatError, InputError, StateError

MAGIC = b"SEFD"
VERSION = 1
DTYPE_F32 = 0


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.meta.get("kind", "")

    def save(self, path) -> None:
        path = Path(path)
        meta_blob = json.dumps(self.meta, sort_keys=True).encode("utf-8")
        names = sorted(self.tensors)
        table = bytearray()
        offset = 0
        payloads = []
        for name in names:
            arr = np.ascontiguousarray(self.tensors[name], dtype="<f4")
            nb = name.encode("utf-8")
            table += struct.pack("<H", len(nb)) + nb
            table += struct.pack("<B", arr.ndim)
            for d in arr.shape:
                table += struct.pack("<I", d)
            table += struct.pack("<B", DTYPE_F32)
            table += struct.pack("<Q", offset)
            payloads.append(arr.tobytes())
            offset += arr.nbytes
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", VERSION))
            fh.write(struct.pack("<Q", len(meta_blob)))
            fh.write(meta_blob)
            fh.write(struct.pack("<I", len(names)))
            fh.write(bytes(table))
            for blob in payloads:
                fh.write(blob)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        # a missing or unreadable file is an OSError, not a format problem;
        # FormatError is reserved for files whose bytes are wrong
        path = Path(path)
        data = path.read_bytes()
        view = memoryview(data)
        pos = 0

        def take(n: int, what: str) -> memoryview:
            nonlocal pos
            if pos + n > len(data):
                raise FormatError(f"truncated checkpoint {path}: "
                                  f"short read of {what} at byte {pos}")
            chunk = view[pos:pos + n]
            pos += n
            return chunk

        if bytes(take(4, "magic")) != MAGIC:
            raise FormatError(f"{path} is not a detector checkpoint (bad magic)")
        version = struct.unpack("<I", take(4, "version"))[0]
        if version != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        meta_len = struct.unpack("<Q", take(8, "metadata length"))[0]
        try:
            meta = json.loads(bytes(take(meta_len, "metadata")).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: corrupt metadata block: {exc}") from exc
        if not isinstance(meta, dict):
            raise FormatError(f"{path}: metadata must be a JSON object")
        count = struct.unpack("<I", take(4, "tensor count"))[0]
        entries = []
        for i in range(count):
            nlen = struct.unpack("<H", take(2, f"tensor {i} name length"))[0]
            name = bytes(take(nlen, f"tensor {i} name")).decode("utf-8")
            ndim = struct.unpack("<B", take(1, f"{name} ndim"))[0]
            shape = tuple(struct.unpack("<I", take(4, f"{name} dim"))[0]
                          for _ in range(ndim))
            dtype = struct.unpack("<B", take(1, f"{name} dtype"))[0]
            if dtype != DTYPE_F32:
                raise FormatError(f"{path}: tensor {name} has unknown dtype "
                                  f"code {dtype}")
            off = struct.unpack("<Q", take(8, f"{name} offset"))[0]
            entries.append((name, shape, off))
        payload_start = pos
        tensors: dict[str, np.ndarray] = {}
        for name, shape, off in entries:
            n = int(np.prod(shape, dtype=np.int64)) if shape else 1
            start = payload_start + off
            end = start + 4 * n
            if end > len(data):
                raise FormatError(f"truncated checkpoint {path}: tensor {name} "
                                  f"extends past end of file")
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=start)
            tensors[name] = arr.reshape(shape).astype(np.float32)
        return cls(meta=meta, tensors=tensors)


def _rebuild_backbone(meta: dict, path) -> tuple[dict, ModelDims]:
    try:
        dims = ModelDims(**meta["dims"])
        seed = int(meta["backbone_seed"])
        want = meta["backbone_hash"]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: checkpoint metadata missing field: {exc}") from exc
    backbone = init_backbone(dims, seed)
    got = params_hash(backbone)
    if got != want:
        raise StateError(
            f"{path}: reconstructed backbone hash {got} does not match the "
            f"recorded {want}; the checkpoint was trained against a different "
            f"backbone")
    return backbone, dims


def checkpoint_from_expert(model: ExpertModel) -> Checkpoint:
    meta = dict(model.meta)
    meta["kind"] = "expert"
    meta["dims"] = model.dims.to_dict()
    meta["backbone_hash"] = params_hash(model.backbone)
    tensors = {**model.lora, **model.head}
    return Checkpoint(meta=meta, tensors=tensors)


def checkpoint_from_sef(model: SefModel) -> Checkpoint:
    meta = dict(model.meta)
    meta["kind"] = "sef"
    meta["dims"] = model.dims.to_dict()
    meta["backbone_hash"] = params_hash(model.backbone)
    tensors = {}
    tensors.update({"ev." + k: v for k, v in model.lora_v.items()})
    tensors.update({"es." + k: v for k, v in model.lora_s.items()})
    tensors.update(model.gate)
    return Checkpoint(meta=meta, tensors=tensors)


def model_from_checkpoint(ckpt: Checkpoint, path="<checkpoint>"):
    """Materialize a runnable detector from a parsed checkpoint."""
    backbone, dims = _rebuild_backbone(ckpt.meta, path)
    kind = ckpt.kind
    if kind == "expert":
        lora = {k: v for k, v in ckpt.tensors.items() if not k.startswith("head.")}
        head = {k: v for k, v in ckpt.tensors.items() if k.startswith("head.")}
        if "head.w" not in head:
            raise FormatError(f"{path}: expert checkpoint is missing its head")
        return ExpertModel(backbone, lora, head, dims, meta=ckpt.meta)
    if kind == "sef":
        lora_v = {k[3:]: v for k, v in ckpt.tensors.items() if k.startswith("ev.")}
        lora_s = {k[3:]: v for k, v in ckpt.tensors.items() if k.startswith("es.")}
        gate = {k: v for k, v in ckpt.tensors.items()
                if k.startswith(("gate.", "fuse."))}
        if not lora_v or not lora_s or "fuse.w" not in gate:
            raise FormatError(f"{path}: fusion checkpoint is missing tensors")
        return SefModel(backbone, lora_v, lora_s, gate, dims, meta=ckpt.meta)
    raise FormatError(f"{path}: unknown checkpoint kind {kind!r}")


def load_model(path):
    return model_from_checkpoint(Checkpoint.load(path), path)


def save_model(model, path) -> None:
    if isinstance(model, ExpertModel):
        checkpoint_from_expert(model).save(path)
    elif isinstance(model, SefModel):
        checkpoint_from_sef(model).save(path)
    else:
        raise InputError(f"cannot checkpoint object of type {type(model).__name__}")
