"""Checkpoint container: text header plus little-endian float32 blob.

Layout (documented in docs/format.md): one ASCII line
``BLOCKPRUNE-CKPT v1 <header_bytes>`` followed by a UTF-8 JSON header of
exactly that many bytes, followed by the raw float32 values of every entry
in header order. Offsets are float32 element offsets into the blob.
"""

from __future__ import annotations

import json

import numpy as np

from .autograd import Tensor
from .errors import DataFormatError
from .vit import ATTN, CompactVit, MaskSet, MaskedVit, VitConfig

MAGIC = "BLOCKPRUNE-CKPT v1"

_LAYER_KEYS = ("ln1_g", "ln1_b", "w_qkv", "b_qkv", "w_proj", "b_proj",
               "ln2_g", "ln2_b", "w_fc1", "b_fc1", "w_fc2", "b_fc2")
_ATTN_KEYS = ("ln_g", "ln_b", "w_qkv", "b_qkv", "w_proj", "b_proj")
_MLP_KEYS = ("ln_g", "ln_b", "w_fc1", "b_fc1", "w_fc2", "b_fc2")


def _masked_entries(model: MaskedVit, masks: MaskSet):
    yield "patch_w", model.patch_w
    yield "patch_b", model.patch_b
    yield "cls_token", model.cls_token
    yield "pos_embed", model.pos_embed
    for d, layer in enumerate(model.layers):
        for key in _LAYER_KEYS:
            yield f"layer.{d}.{key}", layer[key]
    yield "ln_f_g", model.ln_f_g
    yield "ln_f_b", model.ln_f_b
    yield "head_w", model.head_w
    yield "head_b", model.head_b
    if masks is not None:
        for i, block in enumerate(masks.blocks):
            for kind, t in block.items():
                yield f"mask.{i}.{kind}", t


def _compact_entries(model: CompactVit):
    yield "patch_w", model.patch_w
    yield "patch_b", model.patch_b
    yield "cls_token", model.cls_token
    yield "pos_embed", model.pos_embed
    for i, b in enumerate(model.blocks):
        keys = _ATTN_KEYS if b["type"] == ATTN else _MLP_KEYS
        for key in keys:
            yield f"block.{i}.{key}", b[key]
    yield "ln_f_g", model.ln_f_g
    yield "ln_f_b", model.ln_f_b
    yield "head_w", model.head_w
    yield "head_b", model.head_b


def _write(path, kind, config, entries, extra=None):
    names, tensors = zip(*entries)
    header_entries = []
    offset = 0
    for name, t in zip(names, tensors):
        header_entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += t.size
    header = {
        "kind": kind,
        "config": config.to_dict(),
        "entries": header_entries,
    }
    if extra:
        header["structure"] = extra
    payload = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(f"{MAGIC} {len(payload)}\n".encode())
        fh.write(payload)
        for t in tensors:
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def _read(path):
    with open(path, "rb") as fh:
        first = fh.readline().decode(errors="replace").rstrip("\n")
        if not first.startswith(MAGIC):
            raise DataFormatError(f"{path}: not a checkpoint file")
        try:
            nbytes = int(first[len(MAGIC):].strip())
        except ValueError as exc:
            raise DataFormatError(f"{path}: malformed checkpoint header line") from exc
        header = json.loads(fh.read(nbytes).decode())
        blob = np.frombuffer(fh.read(), dtype="<f4")
    total = sum(int(np.prod(e["shape"])) for e in header["entries"])
    if blob.size != total:
        raise DataFormatError(f"{path}: blob holds {blob.size} values, header expects {total}")
    values = {}
    for e in header["entries"]:
        size = int(np.prod(e["shape"]))
        values[e["name"]] = blob[e["offset"]:e["offset"] + size].reshape(e["shape"])
    return header, values


def save_masked(path, model: MaskedVit, masks: MaskSet):
    _write(path, "masked", model.config, list(_masked_entries(model, masks)))


def load_masked(path, dtype=np.float32):
    header, values = _read(path)
    if header["kind"] != "masked":
        raise DataFormatError(f"{path}: expected a masked-model checkpoint")
    config = VitConfig(**header["config"])
    model = MaskedVit(config, seed=0, dtype=dtype)
    masks = MaskSet(config, dtype=dtype)
    for name, t in _masked_entries(model, masks):
        if name not in values:
            raise DataFormatError(f"{path}: missing entry '{name}'")
        if tuple(values[name].shape) != t.shape:
            raise DataFormatError(f"{path}: entry '{name}' has shape "
                                  f"{values[name].shape}, expected {t.shape}")
        t.data = values[name].astype(dtype)
    return model, masks


def save_compact(path, model: CompactVit):
    structure = []
    for b in model.blocks:
        s = {"type": b["type"], "in_idx": b["in_idx"].tolist(), "out_idx": b["out_idx"].tolist()}
        if b["type"] == ATTN:
            s["e_idx"] = b["e_idx"].tolist()
        else:
            s["hid_idx"] = b["hid_idx"].tolist()
        structure.append(s)
    _write(path, "compact", model.config, list(_compact_entries(model)), extra=structure)


def load_compact(path, dtype=np.float32):
    header, values = _read(path)
    if header["kind"] != "compact":
        raise DataFormatError(f"{path}: expected a compact-model checkpoint")
    config = VitConfig(**header["config"])
    model = CompactVit(config, dtype=dtype)
    for s in header["structure"]:
        b = {"type": s["type"],
             "in_idx": np.asarray(s["in_idx"], dtype=np.int64),
             "out_idx": np.asarray(s["out_idx"], dtype=np.int64)}
        if b["type"] == ATTN:
            b["e_idx"] = np.asarray(s["e_idx"], dtype=np.int64)
        else:
            b["hid_idx"] = np.asarray(s["hid_idx"], dtype=np.int64)
        model.blocks.append(b)
    placeholder = {}
    for e in header["entries"]:
        name = e["name"]
        arr = values[name].astype(dtype)
        placeholder[name] = Tensor(arr, requires_grad=True)
    model.patch_w = placeholder["patch_w"]
    model.patch_b = placeholder["patch_b"]
    model.cls_token = placeholder["cls_token"]
    model.pos_embed = placeholder["pos_embed"]
    model.ln_f_g = placeholder["ln_f_g"]
    model.ln_f_b = placeholder["ln_f_b"]
    model.head_w = placeholder["head_w"]
    model.head_b = placeholder["head_b"]
    for i, b in enumerate(model.blocks):
        keys = _ATTN_KEYS if b["type"] == ATTN else _MLP_KEYS
        for key in keys:
            b[key] = placeholder[f"block.{i}.{key}"]
    return model


def load_kind(path):
    header, _ = _read(path)
    return header["kind"]
