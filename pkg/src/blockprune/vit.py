"""Small vision transformer with per-block soft channel masks.

The residual stream keeps full width everywhere; each Attention/MLP block
reads it through an input mask, masks its internal channels (per-head q/k/v
channels or the MLP hidden layer), and writes back through an output mask.
Block i (0-based) is Attention for even i, MLP for odd i, so 1-based block
indices put Attention on odd positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import NumericError

ATTN = "attn"
MLP = "mlp"

MASK_KINDS = {ATTN: ("in", "out", "e"), MLP: ("in", "out", "hid")}


@dataclass
class VitConfig:
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 64
    heads: int = 4
    depth: int = 6
    mlp_ratio: float = 4.0
    num_classes: int = 10
    channels: int = 1

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")

    @property
    def head_dim(self):
        return self.embed_dim // self.heads

    @property
    def hidden_dim(self):
        return int(self.mlp_ratio * self.embed_dim)

    @property
    def num_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_blocks(self):
        return 2 * self.depth

    def block_type(self, i):
        return ATTN if i % 2 == 0 else MLP

    def mask_sizes(self, i):
        """Sizes of the block's partial masks, in concatenation order."""
        e = self.embed_dim
        if self.block_type(i) == ATTN:
            return {"in": e, "out": e, "e": self.head_dim}
        return {"in": e, "out": e, "hid": self.hidden_dim}

    def to_dict(self):
        return {
            "image_size": self.image_size, "patch_size": self.patch_size,
            "embed_dim": self.embed_dim, "heads": self.heads, "depth": self.depth,
            "mlp_ratio": self.mlp_ratio, "num_classes": self.num_classes,
            "channels": self.channels,
        }


class MaskSet:
    """Per-block soft masks, kept outside every optimizer.

    Values live in (0, 1] as plain differentiable leaves; the masking engine
    overwrites them in place at each update step.
    """

    def __init__(self, config: VitConfig, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.blocks = []
        for i in range(config.num_blocks):
            block = {}
            for kind, size in config.mask_sizes(i).items():
                block[kind] = Tensor(np.ones(size, dtype=dtype), requires_grad=True)
            self.blocks.append(block)

    def __len__(self):
        return len(self.blocks)

    def tensors(self):
        for block in self.blocks:
            yield from block.values()

    def values(self):
        """Copy of all mask values as {block: {kind: array}}."""
        return [{k: t.data.copy() for k, t in block.items()} for block in self.blocks]

    def set_block(self, i, new_values):
        for kind, vals in new_values.items():
            t = self.blocks[i][kind]
            if vals.shape != t.data.shape:
                raise ValueError(f"mask '{kind}' of block {i}: shape mismatch")
            t.data = np.asarray(vals, dtype=self.dtype)

    def zero_grads(self):
        for t in self.tensors():
            t.grad = None

    def gradients(self):
        """Raw dL/dM for every mask element; requires a completed backward."""
        out = []
        for i, block in enumerate(self.blocks):
            grads = {}
            for kind, t in block.items():
                if t.grad is None:
                    raise RuntimeError(f"mask gradient of block {i} '{kind}' read before backward")
                grads[kind] = t.grad.copy()
            out.append(grads)
        return out

    def binarized(self):
        """Hard 0/1 masks at the 0.5 keep threshold."""
        return [{k: (t.data >= 0.5).astype(self.dtype) for k, t in block.items()}
                for block in self.blocks]

    def kept_indices(self, i):
        return {k: np.flatnonzero(t.data >= 0.5) for k, t in self.blocks[i].items()}


@dataclass
class BlockRecord:
    index: int
    block_type: str
    before: Tensor  # detached feature map entering the block
    after: Tensor   # detached feature map after the residual add


def block_param_count(block_type, a_in, a_out, a_inner, heads):
    """Prunable parameters (projection weights + biases) at the given channel counts."""
    if block_type == ATTN:
        qkv_out = 3 * heads * a_inner
        return a_in * qkv_out + qkv_out + heads * a_inner * a_out + a_out
    return a_in * a_inner + a_inner + a_inner * a_out + a_out


def _trunc_normal(rng, shape, std=0.02):
    # resample out-of-band draws; two-sigma truncation as in common ViT inits
    vals = rng.normal(0.0, std, size=shape)
    bad = np.abs(vals) > 2 * std
    while bad.any():
        vals[bad] = rng.normal(0.0, std, size=bad.sum())
        bad = np.abs(vals) > 2 * std
    return vals


class MaskedVit:
    """Transformer backbone whose blocks read/write through soft masks."""

    def __init__(self, config: VitConfig, seed=0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        c = config
        pdim = c.patch_size * c.patch_size * c.channels
        t = 1 + c.num_patches

        def param(arr):
            return Tensor(arr.astype(dtype), requires_grad=True)

        self.patch_w = param(_trunc_normal(rng, (pdim, c.embed_dim)))
        self.patch_b = param(np.zeros(c.embed_dim))
        self.cls_token = param(_trunc_normal(rng, (1, 1, c.embed_dim)))
        self.pos_embed = param(_trunc_normal(rng, (1, t, c.embed_dim)))
        self.layers = []
        for _ in range(c.depth):
            layer = {
                "ln1_g": param(np.ones(c.embed_dim)),
                "ln1_b": param(np.zeros(c.embed_dim)),
                "w_qkv": param(_trunc_normal(rng, (c.embed_dim, 3 * c.embed_dim))),
                "b_qkv": param(np.zeros(3 * c.embed_dim)),
                "w_proj": param(_trunc_normal(rng, (c.embed_dim, c.embed_dim))),
                "b_proj": param(np.zeros(c.embed_dim)),
                "ln2_g": param(np.ones(c.embed_dim)),
                "ln2_b": param(np.zeros(c.embed_dim)),
                "w_fc1": param(_trunc_normal(rng, (c.embed_dim, c.hidden_dim))),
                "b_fc1": param(np.zeros(c.hidden_dim)),
                "w_fc2": param(_trunc_normal(rng, (c.hidden_dim, c.embed_dim))),
                "b_fc2": param(np.zeros(c.embed_dim)),
            }
            self.layers.append(layer)
        self.ln_f_g = param(np.ones(c.embed_dim))
        self.ln_f_b = param(np.zeros(c.embed_dim))
        self.head_w = param(_trunc_normal(rng, (c.embed_dim, c.num_classes)))
        self.head_b = param(np.zeros(c.num_classes))

    def parameters(self):
        ps = [self.patch_w, self.patch_b, self.cls_token, self.pos_embed]
        for layer in self.layers:
            ps.extend(layer.values())
        ps.extend([self.ln_f_g, self.ln_f_b, self.head_w, self.head_b])
        return ps

    # -- forward ----------------------------------------------------------

    def embed(self, images):
        c = self.config
        n = images.shape[0]
        g = c.image_size // c.patch_size
        x = ag.reshape(images, (n, g, c.patch_size, g, c.patch_size, c.channels))
        x = ag.transpose(x, (0, 1, 3, 2, 4, 5))
        x = ag.reshape(x, (n * g * g, c.patch_size * c.patch_size * c.channels))
        x = ag.add(ag.matmul(x, self.patch_w), self.patch_b)
        x = ag.reshape(x, (n, g * g, c.embed_dim))
        cls = ag.repeat_axis0(self.cls_token, n)
        x = ag.concat([cls, x], axis=1)
        return ag.add(x, self.pos_embed)

    def _attn_block(self, x, layer, masks):
        c = self.config
        n, t, e = x.shape
        h = ag.layernorm(x, layer["ln1_g"], layer["ln1_b"])
        h = ag.mul(h, masks["in"])
        qkv = ag.add(ag.matmul(ag.reshape(h, (n * t, e)), layer["w_qkv"]), layer["b_qkv"])
        qkv = ag.reshape(qkv, (n, t, 3, c.heads, c.head_dim))
        # the same mask instance gates q, k and v in every head
        qkv = ag.mul(qkv, masks["e"])
        qkv = ag.transpose(qkv, (2, 0, 3, 1, 4))
        q = ag.reshape(ag.slice_axis(qkv, 0, 0, 1), (n, c.heads, t, c.head_dim))
        k = ag.reshape(ag.slice_axis(qkv, 0, 1, 2), (n, c.heads, t, c.head_dim))
        v = ag.reshape(ag.slice_axis(qkv, 0, 2, 3), (n, c.heads, t, c.head_dim))
        # temperature stays at the unmasked head width; masking must not
        # retune the softmax while importance is being measured
        scores = ag.scale(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(c.head_dim))
        attn = ag.softmax(scores)
        out = ag.matmul(attn, v)
        out = ag.reshape(ag.transpose(out, (0, 2, 1, 3)), (n * t, e))
        out = ag.add(ag.matmul(out, layer["w_proj"]), layer["b_proj"])
        out = ag.reshape(out, (n, t, e))
        return ag.mul(out, masks["out"])

    def _mlp_block(self, x, layer, masks):
        n, t, e = x.shape
        h = ag.layernorm(x, layer["ln2_g"], layer["ln2_b"])
        h = ag.mul(h, masks["in"])
        h = ag.add(ag.matmul(ag.reshape(h, (n * t, e)), layer["w_fc1"]), layer["b_fc1"])
        h = ag.gelu(h)
        h = ag.mul(h, masks["hid"])
        h = ag.add(ag.matmul(h, layer["w_fc2"]), layer["b_fc2"])
        h = ag.reshape(h, (n, t, e))
        return ag.mul(h, masks["out"])

    def forward(self, images, masks: MaskSet, collect_trace=True):
        """Masked forward pass; returns (logits, per-block trace)."""
        if images.shape[1] != self.config.image_size or images.shape[2] != self.config.image_size:
            raise ValueError("input images do not match the configured size")
        x = self.embed(images)
        trace = []
        for d, layer in enumerate(self.layers):
            for sub, fn in ((0, self._attn_block), (1, self._mlp_block)):
                i = 2 * d + sub
                before = x
                x = ag.add(x, fn(x, layer, masks.blocks[i]))
                if collect_trace:
                    trace.append(BlockRecord(i, self.config.block_type(i),
                                             before.detach(), x.detach()))
        x = ag.layernorm(x, self.ln_f_g, self.ln_f_b)
        cls = ag.reshape(ag.slice_axis(x, 1, 0, 1), (x.shape[0], self.config.embed_dim))
        logits = ag.add(ag.matmul(cls, self.head_w), self.head_b)
        if not np.all(np.isfinite(logits.data)):
            raise NumericError("non-finite activations in forward pass")
        return logits, trace

    # -- accounting -------------------------------------------------------

    def count_params(self, masks: MaskSet, i):
        """(total, remaining) prunable parameters of block i at threshold 0.5."""
        c = self.config
        sizes = c.mask_sizes(i)
        kept = {k: int((masks.blocks[i][k].data >= 0.5).sum()) for k in sizes}
        btype = c.block_type(i)
        inner = kept["e"] if btype == ATTN else kept["hid"]
        inner_full = sizes["e"] if btype == ATTN else sizes["hid"]
        total = block_param_count(btype, sizes["in"], sizes["out"], inner_full, c.heads)
        remaining = block_param_count(btype, kept["in"], kept["out"], inner, c.heads)
        return total, remaining

    def param_totals(self, masks: MaskSet):
        totals = np.array([self.count_params(masks, i)[0] for i in range(self.config.num_blocks)])
        remaining = np.array([self.count_params(masks, i)[1] for i in range(self.config.num_blocks)])
        return totals, remaining


# ---------------------------------------------------------------------------
# physically compacted model


class CompactVit:
    """Mask-free model produced by deleting sub-threshold channels.

    Per-block channel index lists describe where the (narrower) block
    output scatters back into the full-width residual stream. Attention
    keeps the original softmax temperature of the unpruned head width.
    """

    def __init__(self, config: VitConfig, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.patch_w = None
        self.patch_b = None
        self.cls_token = None
        self.pos_embed = None
        self.ln_f_g = None
        self.ln_f_b = None
        self.head_w = None
        self.head_b = None
        self.blocks = []  # list of dicts with weights + index arrays

    @classmethod
    def from_masked(cls, model: MaskedVit, masks: MaskSet):
        c = model.config
        out = cls(c, model.dtype)

        def clone(t):
            return Tensor(t.data.copy(), requires_grad=True)

        out.patch_w, out.patch_b = clone(model.patch_w), clone(model.patch_b)
        out.cls_token, out.pos_embed = clone(model.cls_token), clone(model.pos_embed)
        out.ln_f_g, out.ln_f_b = clone(model.ln_f_g), clone(model.ln_f_b)
        out.head_w, out.head_b = clone(model.head_w), clone(model.head_b)
        for i in range(c.num_blocks):
            layer = model.layers[i // 2]
            idx = masks.kept_indices(i)
            for kind, kept in idx.items():
                if kept.size == 0:
                    raise ValueError(f"block {i} mask '{kind}' compacted to zero channels")
            b = {"type": c.block_type(i), "in_idx": idx["in"], "out_idx": idx["out"]}
            if b["type"] == ATTN:
                e, h, d = c.embed_dim, c.heads, c.head_dim
                ei = idx["e"]
                b["e_idx"] = ei
                w4 = layer["w_qkv"].data.reshape(e, 3, h, d)
                b["w_qkv"] = Tensor(np.ascontiguousarray(
                    w4[idx["in"]][:, :, :, ei]).reshape(len(idx["in"]), -1), requires_grad=True)
                b["b_qkv"] = Tensor(np.ascontiguousarray(
                    layer["b_qkv"].data.reshape(3, h, d)[:, :, ei]).reshape(-1), requires_grad=True)
                wp = layer["w_proj"].data.reshape(h, d, e)
                b["w_proj"] = Tensor(np.ascontiguousarray(
                    wp[:, ei][:, :, idx["out"]]).reshape(h * len(ei), len(idx["out"])), requires_grad=True)
                b["b_proj"] = Tensor(layer["b_proj"].data[idx["out"]].copy(), requires_grad=True)
                b["ln_g"], b["ln_b"] = clone(layer["ln1_g"]), clone(layer["ln1_b"])
            else:
                hi = idx["hid"]
                b["hid_idx"] = hi
                b["w_fc1"] = Tensor(np.ascontiguousarray(
                    layer["w_fc1"].data[idx["in"]][:, hi]), requires_grad=True)
                b["b_fc1"] = Tensor(layer["b_fc1"].data[hi].copy(), requires_grad=True)
                b["w_fc2"] = Tensor(np.ascontiguousarray(
                    layer["w_fc2"].data[hi][:, idx["out"]]), requires_grad=True)
                b["b_fc2"] = Tensor(layer["b_fc2"].data[idx["out"]].copy(), requires_grad=True)
                b["ln_g"], b["ln_b"] = clone(layer["ln2_g"]), clone(layer["ln2_b"])
            out.blocks.append(b)
        return out

    def parameters(self):
        ps = [self.patch_w, self.patch_b, self.cls_token, self.pos_embed]
        for b in self.blocks:
            ps.extend(v for v in b.values() if isinstance(v, Tensor))
        ps.extend([self.ln_f_g, self.ln_f_b, self.head_w, self.head_b])
        return ps

    def block_param_counts(self):
        counts = []
        for b in self.blocks:
            if b["type"] == ATTN:
                counts.append(b["w_qkv"].size + b["b_qkv"].size + b["w_proj"].size + b["b_proj"].size)
            else:
                counts.append(b["w_fc1"].size + b["b_fc1"].size + b["w_fc2"].size + b["b_fc2"].size)
        return np.array(counts)

    def _attn_block(self, x, b):
        c = self.config
        n, t, e = x.shape
        nk = len(b["e_idx"])
        h = ag.layernorm(x, b["ln_g"], b["ln_b"])
        h = ag.take_last(h, b["in_idx"])
        qkv = ag.add(ag.matmul(ag.reshape(h, (n * t, len(b["in_idx"]))), b["w_qkv"]), b["b_qkv"])
        qkv = ag.reshape(qkv, (n, t, 3, c.heads, nk))
        qkv = ag.transpose(qkv, (2, 0, 3, 1, 4))
        q = ag.reshape(ag.slice_axis(qkv, 0, 0, 1), (n, c.heads, t, nk))
        k = ag.reshape(ag.slice_axis(qkv, 0, 1, 2), (n, c.heads, t, nk))
        v = ag.reshape(ag.slice_axis(qkv, 0, 2, 3), (n, c.heads, t, nk))
        scores = ag.scale(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(c.head_dim))
        attn = ag.softmax(scores)
        o = ag.matmul(attn, v)
        o = ag.reshape(ag.transpose(o, (0, 2, 1, 3)), (n * t, c.heads * nk))
        o = ag.add(ag.matmul(o, b["w_proj"]), b["b_proj"])
        o = ag.reshape(o, (n, t, len(b["out_idx"])))
        return ag.scatter_last(o, b["out_idx"], e)

    def _mlp_block(self, x, b):
        n, t, e = x.shape
        h = ag.layernorm(x, b["ln_g"], b["ln_b"])
        h = ag.take_last(h, b["in_idx"])
        h = ag.add(ag.matmul(ag.reshape(h, (n * t, len(b["in_idx"]))), b["w_fc1"]), b["b_fc1"])
        h = ag.gelu(h)
        h = ag.add(ag.matmul(h, b["w_fc2"]), b["b_fc2"])
        h = ag.reshape(h, (n, t, len(b["out_idx"])))
        return ag.scatter_last(h, b["out_idx"], e)

    def embed(self, images):
        c = self.config
        n = images.shape[0]
        g = c.image_size // c.patch_size
        x = ag.reshape(images, (n, g, c.patch_size, g, c.patch_size, c.channels))
        x = ag.transpose(x, (0, 1, 3, 2, 4, 5))
        x = ag.reshape(x, (n * g * g, c.patch_size * c.patch_size * c.channels))
        x = ag.add(ag.matmul(x, self.patch_w), self.patch_b)
        x = ag.reshape(x, (n, g * g, c.embed_dim))
        cls = ag.repeat_axis0(self.cls_token, n)
        x = ag.concat([cls, x], axis=1)
        return ag.add(x, self.pos_embed)

    def forward(self, images):
        x = self.embed(images)
        for b in self.blocks:
            fn = self._attn_block if b["type"] == ATTN else self._mlp_block
            x = ag.add(x, fn(x, b))
        x = ag.layernorm(x, self.ln_f_g, self.ln_f_b)
        cls = ag.reshape(ag.slice_axis(x, 1, 0, 1), (x.shape[0], self.config.embed_dim))
        logits = ag.add(ag.matmul(cls, self.head_w), self.head_b)
        if not np.all(np.isfinite(logits.data)):
            raise NumericError("non-finite activations in forward pass")
        return logits
