"""Per-block benefit measurement.

Every block gets its own pair of lightweight classifiers: a linear head on
the classification token and a patch head on the token grid. Both are
evaluated on the feature map entering and leaving the block; the drop in
cross-entropy between the two evaluations is the block's measured benefit
(bp_class / bp_patch). Heads train on the block outputs only, and only
through detached features, so no gradient ever reaches the backbone.
"""

from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import batch_iter
from .optim import AdamW
from .vit import VitConfig, _trunc_normal

PATCH_HEAD_KINDS = ("resnet", "pooled-linear")


class BpiHeads:
    """Independent class/patch classifier pair per block, with own optimizer."""

    def __init__(self, config: VitConfig, patch_head="resnet", lr=5e-4, seed=0, dtype=np.float32):
        if patch_head not in PATCH_HEAD_KINDS:
            raise ValueError(f"unknown patch head '{patch_head}'")
        self.config = config
        self.patch_head = patch_head
        grid = int(round(math.sqrt(config.num_patches)))
        if grid * grid != config.num_patches:
            raise ValueError("patch head requires a square token grid")
        self.grid = grid
        rng = np.random.default_rng(seed)
        e, k = config.embed_dim, config.num_classes

        def param(arr):
            return Tensor(arr.astype(dtype), requires_grad=True)

        self.class_heads = []
        self.patch_heads = []
        for _ in range(config.num_blocks):
            self.class_heads.append({
                "w": param(_trunc_normal(rng, (e, k))),
                "b": param(np.zeros(k)),
            })
            ph = {"w": param(_trunc_normal(rng, (e, k))), "b": param(np.zeros(k))}
            if patch_head == "resnet":
                ph.update({
                    "conv1": param(_trunc_normal(rng, (3, 3, e, e))),
                    "ln1_g": param(np.ones(e)), "ln1_b": param(np.zeros(e)),
                    "conv2": param(_trunc_normal(rng, (3, 3, e, e))),
                    "ln2_g": param(np.ones(e)), "ln2_b": param(np.zeros(e)),
                })
            self.patch_heads.append(ph)
        self.optimizer = AdamW(self.parameters(), lr=lr)

    def parameters(self):
        ps = []
        for ch, ph in zip(self.class_heads, self.patch_heads):
            ps.extend(ch.values())
            ps.extend(ph.values())
        return ps

    # -- head forwards ------------------------------------------------------

    def _class_logits(self, i, x):
        n = x.shape[0]
        cls = ag.reshape(ag.slice_axis(x, 1, 0, 1), (n, self.config.embed_dim))
        h = self.class_heads[i]
        return ag.add(ag.matmul(cls, h["w"]), h["b"])

    def _patch_logits(self, i, x):
        n, _, e = x.shape
        ph = self.patch_heads[i]
        tokens = ag.slice_axis(x, 1, 1, 1 + self.config.num_patches)
        if self.patch_head == "pooled-linear":
            pooled = ag.mean(tokens, axis=(1,))
        else:
            g = self.grid
            grid = ag.reshape(tokens, (n, g, g, e))
            h = ag.conv2d_3x3(grid, ph["conv1"])
            h = ag.layernorm(h, ph["ln1_g"], ph["ln1_b"])
            h = ag.gelu(h)
            h = ag.conv2d_3x3(h, ph["conv2"])
            h = ag.layernorm(h, ph["ln2_g"], ph["ln2_b"])
            h = ag.gelu(ag.add(grid, h))
            pooled = ag.mean(h, axis=(1, 2))
        return ag.add(ag.matmul(pooled, ph["w"]), ph["b"])

    # -- measurement ---------------------------------------------------------

    def step(self, trace, labels):
        """Evaluate benefit of every block and return the head-training loss.

        Returns (bp_class, bp_patch, loss) where the bp arrays hold the
        cross-entropy improvement from block input to block output under the
        same head, and loss is the sum of per-head losses on the block
        outputs (what the head optimizer minimizes).
        """
        if len(trace) != self.config.num_blocks:
            raise ValueError("trace length does not match block count")
        b = self.config.num_blocks
        bp_class = np.zeros(b)
        bp_patch = np.zeros(b)
        loss = None
        for rec in trace:
            i = rec.index
            with ag.no_grad():
                before_c = ag.softmax_cross_entropy(self._class_logits(i, rec.before), labels)
                before_p = ag.softmax_cross_entropy(self._patch_logits(i, rec.before), labels)
            after_c = ag.softmax_cross_entropy(self._class_logits(i, rec.after), labels)
            after_p = ag.softmax_cross_entropy(self._patch_logits(i, rec.after), labels)
            bp_class[i] = float(before_c.data) - float(after_c.data)
            bp_patch[i] = float(before_p.data) - float(after_p.data)
            term = ag.add(after_c, after_p)
            loss = term if loss is None else ag.add(loss, term)
        return bp_class, bp_patch, loss

    def measure(self, trace, labels):
        """Benefit scores only, no training graph."""
        with ag.no_grad():
            bp_class, bp_patch, _ = self.step(trace, labels)
        return bp_class, bp_patch


def probe_checkpoint(model, masks, train_ds, val_ds, epochs,
                     patch_head="resnet", lr=5e-4, batch_size=64, seed=0):
    """Benefit curves of a frozen backbone.

    Trains fresh heads for the given epochs on the train split (backbone in
    no-grad mode, parameters untouched), then averages per-block benefit
    over the evaluation split. Returns (bp_class, bp_patch) arrays of length
    num_blocks with raw, unnormalized values.
    """
    heads = BpiHeads(model.config, patch_head=patch_head, lr=lr, seed=seed)
    for epoch in range(epochs):
        for images, labels in batch_iter(train_ds, batch_size, seed, epoch):
            ag.tape.clear()
            with ag.no_grad():
                _, trace = model.forward(Tensor(images), masks)
            _, _, loss = heads.step(trace, labels)
            ag.backward(loss)
            heads.optimizer.step()
            heads.optimizer.zero_grad()
    b = model.config.num_blocks
    sum_class, sum_patch, total = np.zeros(b), np.zeros(b), 0
    for images, labels in batch_iter(val_ds, batch_size, seed, 0):
        with ag.no_grad():
            _, trace = model.forward(Tensor(images), masks)
        bp_class, bp_patch = heads.measure(trace, labels)
        sum_class += bp_class * len(labels)
        sum_patch += bp_patch * len(labels)
        total += len(labels)
    return sum_class / max(total, 1), sum_patch / max(total, 1)


class BpAccumulator:
    """Running mean of per-block benefit since the last budget update."""

    def __init__(self, num_blocks):
        self.num_blocks = num_blocks
        self._sum_class = np.zeros(num_blocks)
        self._sum_patch = np.zeros(num_blocks)
        self.steps = 0

    def add(self, bp_class, bp_patch):
        self._sum_class += bp_class
        self._sum_patch += bp_patch
        self.steps += 1

    def read_and_reset(self):
        if self.steps == 0:
            raise RuntimeError("benefit accumulator read while empty")
        mean_class = self._sum_class / self.steps
        mean_patch = self._sum_patch / self.steps
        self._sum_class = np.zeros(self.num_blocks)
        self._sum_patch = np.zeros(self.num_blocks)
        self.steps = 0
        return mean_class, mean_patch
