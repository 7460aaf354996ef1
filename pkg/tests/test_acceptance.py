"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines as they complete. The end-to-end experiment (criterion 8) dominates
the runtime; everything else finishes in seconds.
"""

import json
import math
import time

import numpy as np
import yaml

from blockprune import autograd as ag
from blockprune import cli
from blockprune.autograd import Tensor
from blockprune.bpi import BpiHeads
from blockprune.budget import allocate, smooth_importance
from blockprune.config import config_from_dict
from blockprune.data import SyntheticSpec, generate_synthetic
from blockprune.masking import (guard_minimums, mask_update, normalize_and_concat,
                                plan_block_budgets, values_from_order,
                                BlockGeometry, _guarded_order)
from blockprune.schedule import (MetricsWriter, PruneSchedule, PruningRun,
                                 train_dense)
from blockprune.vit import CompactVit, MaskSet, MaskedVit, VitConfig

from conftest import check_gradients, tensor64
from test_budget import oracle_allocate


def report(num, text):
    print(f"\n[ACCEPTANCE {num:>2}] PASS — {text}")


GRADCHECK_CFG = VitConfig(image_size=8, patch_size=4, embed_dim=8, heads=2,
                          depth=2, mlp_ratio=2.0, num_classes=3, channels=1)


def test_01_gradient_correctness():
    started = time.time()
    for seed in range(20):
        rng = np.random.default_rng(seed)

        a = tensor64(rng.normal(size=(3, 4)))
        b = tensor64(rng.normal(size=(4, 3)))
        check_gradients(lambda: ag.tsum(ag.matmul(a, b)), [a, b])

        ab = tensor64(rng.normal(size=(2, 3, 4)))
        bb = tensor64(rng.normal(size=(2, 4, 2)))
        check_gradients(lambda: ag.tsum(ag.matmul(ab, bb)), [ab, bb])

        x = tensor64(rng.normal(size=(3, 5)))
        y = tensor64(rng.normal(size=(5,)))
        for op in (ag.gelu, ag.sigmoid, ag.softplus, ag.softmax):
            check_gradients(lambda op=op: ag.tsum(op(x)), [x])
        check_gradients(lambda: ag.tsum(ag.mul(x, y)), [x, y])
        check_gradients(lambda: ag.tsum(ag.add(x, y)), [x, y])
        check_gradients(lambda: ag.tsum(ag.sub(x, y)), [x, y])
        check_gradients(lambda: ag.tsum(ag.scale(x, 1.7)), [x])
        check_gradients(lambda: ag.mean(x), [x])

        g = tensor64(rng.normal(size=5))
        bb2 = tensor64(rng.normal(size=5))
        check_gradients(lambda: ag.tsum(ag.layernorm(x, g, bb2)), [x, g, bb2])

        logits = tensor64(rng.normal(size=(4, 3)))
        labels = rng.integers(0, 3, 4)
        check_gradients(lambda: ag.softmax_cross_entropy(logits, labels), [logits])

        img = tensor64(rng.normal(size=(2, 4, 4, 2)))
        ker = tensor64(rng.normal(size=(3, 3, 2, 2)))
        check_gradients(lambda: ag.tsum(ag.conv2d_3x3(img, ker)), [img, ker])

        # full tiny model: task loss through backbone and masks, and the
        # benefit-head loss through its own parameters (its detached inputs
        # are constants on both sides of the comparison)
        model = MaskedVit(GRADCHECK_CFG, seed=seed, dtype=np.float64)
        masks = MaskSet(GRADCHECK_CFG, dtype=np.float64)
        for i in range(GRADCHECK_CFG.num_blocks):
            masks.set_block(i, {k: rng.uniform(0.2, 0.95, s)
                                for k, s in GRADCHECK_CFG.mask_sizes(i).items()})
        images = Tensor(rng.uniform(size=(2, 8, 8, 1)))
        lab = rng.integers(0, 3, 2)
        heads = BpiHeads(GRADCHECK_CFG, patch_head="resnet", seed=seed, dtype=np.float64)

        def task_loss():
            logits_, _ = model.forward(images, masks, collect_trace=False)
            return ag.softmax_cross_entropy(logits_, lab)

        probe = [model.patch_w, model.cls_token, model.layers[0]["w_qkv"],
                 model.layers[1]["w_fc1"], model.ln_f_g, model.head_w,
                 masks.blocks[0]["e"], masks.blocks[1]["hid"]]
        check_gradients(task_loss, probe, rtol=1e-6, sample=3, rng=rng)

        with ag.no_grad():
            _, trace = model.forward(images, masks)

        def head_loss():
            _, _, loss = heads.step(trace, lab)
            return loss

        head_probe = [heads.patch_heads[0]["conv1"], heads.class_heads[3]["w"],
                      heads.patch_heads[2]["ln1_g"]]
        check_gradients(head_loss, head_probe, rtol=1e-6, sample=3, rng=rng)
    elapsed = time.time() - started
    assert elapsed < 120, f"gradient checks too slow: {elapsed:.0f}s"
    report(1, f"all primitives + full model match finite differences at f64 "
              f"(20 seeds, rel err < 1e-6, {elapsed:.0f}s)")


def test_02_stop_gradient_three_epochs():
    raw = {
        "model": {"image_size": 8, "patch_size": 4, "embed_dim": 8, "heads": 2,
                  "depth": 2, "mlp_ratio": 2.0, "num_classes": 3,
                  "patch_head": "resnet"},
        "schedule": {"epochs_warmup": 1, "epochs_sparsify": 1, "epochs_sharpen": 1,
                     "epochs_finetune": 0, "batch_size": 16},
        "data": {"train_per_class": 8, "val_per_class": 4},
        "pruning": {"keep_ratio": 0.6},
    }
    cfg = config_from_dict(raw)
    spec = SyntheticSpec(num_classes=3, image_size=8, noise=0.3,
                         train_per_class=8, val_per_class=4, seed=0)
    train, val, _ = generate_synthetic(spec)
    model = MaskedVit(cfg.model.vit_config(), seed=0)
    masks = MaskSet(model.config)
    heads = BpiHeads(model.config, patch_head="resnet", seed=1)
    sched = PruneSchedule(1, 1, 1, 0, 0, 0.6)
    steps = []
    run = PruningRun(model, masks, heads, sched, train, val, cfg,
                     verify_stop_gradient=True,
                     step_callback=lambda r: steps.append(r.global_step))
    run.run()  # raises on any backbone gradient from the head loss
    assert len(steps) == 3 * run.steps_per_epoch
    report(2, f"benefit-head loss left backbone gradients at exactly zero on "
              f"all {len(steps)} steps of a 3-epoch run")


def test_03_smoothing_window_values():
    def sp(z):
        return math.log1p(math.exp(-abs(z))) + max(z, 0.0)

    for x in (0.0, 1.0, -1.0, 0.37, -0.2, 2.0):
        direct = sp(14 * x) - sp(14 * x - 10)
        assert abs(float(smooth_importance(x)) - direct) < 1e-9
    assert abs(float(smooth_importance(0.0)) - 0.693102) < 1e-6
    assert abs(float(smooth_importance(1.0)) - 9.98185) < 1e-5
    assert float(smooth_importance(-1.0)) < 1e-5
    report(3, "smoothing window matches direct softplus evaluation within 1e-9 "
              "(0 -> 0.693102, 1 -> 9.98185, -1 < 1e-5)")


def test_04_mask_boundary_conditions():
    started = time.time()
    rng = np.random.default_rng(123)
    cases = 0
    while cases < 1000:
        n = int(rng.integers(8, 513))
        keep = float(rng.uniform(0.1, 1.0))
        k = int(math.floor(keep * n + 0.5))
        guard = max(1, math.ceil(0.05 * n))
        if k < guard or k < 1:
            continue
        m = int(rng.integers(1, max(2, n // 2)))
        tau = m / n  # integer rank offset so the reference element exists
        ranked = normalize_and_concat({"hid": rng.uniform(size=n)}, {"hid": 1.0},
                                      ("hid",))
        vals = mask_update(ranked, keep, tau)["hid"]
        order = np.argsort(np.argsort(ranked.values, kind="stable"), kind="stable")
        ranks = np.empty(n, dtype=int)
        ranks[np.argsort(ranked.values, kind="stable")] = np.arange(n)
        assert int((vals >= 0.5).sum()) == k
        r_shift = n - k
        boundary = vals[ranks == r_shift][0]
        assert abs(boundary - 0.5) < 1e-9
        r_ref = r_shift + m
        if r_ref <= n - 1:
            ref = vals[ranks == r_ref][0]
            assert abs(ref - 0.9) < 1e-6
        assert vals.min() > 0.0
        cases += 1
    elapsed = time.time() - started
    assert elapsed < 10, f"mask boundary checks too slow: {elapsed:.1f}s"
    report(4, f"1000 random masks: exact keep counts, boundary at 0.5, "
              f"reference rank at 0.9, strictly positive ({elapsed:.1f}s)")


def test_05_allocator_matches_bruteforce():
    sol = allocate([0.9, 0.1], [100, 100], keep_target=0.6, keep_floor=0.0)
    assert np.allclose(sol.keep_ratios, [1.0, 0.2], atol=1e-12)
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(500):
        b = int(rng.integers(1, 7))
        imp = rng.uniform(1e-3, 1.0, b)
        imp /= imp.sum()
        w = rng.integers(10, 5000, b).astype(float)
        floor = float(rng.choice([0.0, 0.05, 0.1]))
        target = float(rng.uniform(max(floor, 0.05), 1.0))
        got = allocate(imp, w, target, floor).keep_ratios
        ref = oracle_allocate(imp, w, target, floor)
        worst = max(worst, float(np.max(np.abs(got - ref))))
    assert worst < 1e-6, f"worst deviation {worst:.2e}"
    report(5, f"allocator matches 1e-6 grid oracle on 500 random instances "
              f"(worst dev {worst:.1e}); worked clip example reproduces exactly")


def test_06_rank_equivariance_and_reactivation():
    rng = np.random.default_rng(11)
    scores = rng.uniform(size=40)
    perm = rng.permutation(40)
    base = mask_update(normalize_and_concat({"hid": scores}, {"hid": 1.0}, ("hid",)),
                       0.5, 0.1)["hid"]
    permuted = mask_update(normalize_and_concat({"hid": scores[perm]}, {"hid": 1.0},
                                                ("hid",)), 0.5, 0.1)["hid"]
    assert np.allclose(base[perm], permuted, atol=1e-12)

    first = np.arange(10.0)
    old = mask_update(normalize_and_concat({"hid": first}, {"hid": 1.0}, ("hid",)),
                      0.5, 0.1)
    assert old["hid"][3] < 0.5
    second = first.copy()
    second[3] = 6.5  # importance climbs from rank 3 to rank 7
    new = mask_update(normalize_and_concat({"hid": second}, {"hid": 1.0}, ("hid",)),
                      0.5, 0.1)
    assert new["hid"][3] > 0.5
    report(6, "mask values permute with the importance ordering; a rank-climb "
              "re-activates a pruned element above 0.5")


def build_masks_at(model, keep_target, seed):
    """Budget + ranking + mask construction against synthetic statistics."""
    cfg = model.config
    rng = np.random.default_rng(seed)
    masks = MaskSet(cfg, dtype=model.dtype)
    geoms = [BlockGeometry(cfg.block_type(i), cfg.mask_sizes(i), cfg.heads)
             for i in range(cfg.num_blocks)]
    totals = np.array([g.total_params for g in geoms], dtype=float)
    imp = rng.uniform(0.5, 1.5, cfg.num_blocks)
    imp /= imp.sum()
    solution = allocate(imp, totals, keep_target, keep_floor=0.05)
    ranked = [normalize_and_concat({k: rng.uniform(size=s) for k, s in g.sizes.items()},
                                   {k: 1.0 for k in g.sizes}, tuple(g.sizes))
              for g in geoms]
    ks = plan_block_budgets(ranked, geoms, solution.keep_ratios)
    for i, (r, k) in enumerate(zip(ranked, ks)):
        guards = guard_minimums(r.sizes)
        order = _guarded_order(r, k, guards)
        vals = values_from_order(order, k, sharpness=5e-3)
        out, start = {}, 0
        for kind, size in r.sizes.items():
            out[kind] = vals[start:start + size]
            start += size
        masks.set_block(i, out)
    return masks, geoms


def test_07_compaction_equivalence():
    cfg = VitConfig(image_size=24, patch_size=4, embed_dim=64, heads=4, depth=6,
                    mlp_ratio=4.0, num_classes=10, channels=1)
    model = MaskedVit(cfg, seed=3, dtype=np.float64)
    rng = np.random.default_rng(42)
    images = Tensor(rng.uniform(size=(100, 24, 24, 1)))
    for keep in (0.3, 0.5, 0.7):
        masks, geoms = build_masks_at(model, keep, seed=int(keep * 100))
        hard = MaskSet(cfg, dtype=np.float64)
        for i, block in enumerate(masks.binarized()):
            hard.set_block(i, block)
        with ag.no_grad():
            ref, _ = model.forward(images, hard, collect_trace=False)
        compact = CompactVit.from_masked(model, masks)
        with ag.no_grad():
            got = compact.forward(images)
        rel = np.max(np.abs(got.data - ref.data) / np.maximum(np.abs(ref.data), 1e-3))
        assert rel < 1e-5, f"keep={keep}: rel dev {rel:.2e}"

        counts = compact.block_param_counts()
        totals, remaining = model.param_totals(masks)
        assert np.array_equal(counts, remaining)
        quantum = max(3 * g.heads * g.sizes[g.inner_kind] + 1 for g in geoms)
        assert abs(remaining.sum() - keep * totals.sum()) <= quantum, (
            f"keep={keep}: {remaining.sum()} vs {keep * totals.sum():.0f}")
    report(7, "binarized-mask and compact forwards agree (rel < 1e-5, 100 inputs); "
              "parameter counts exact; global keep within one channel quantum "
              "for targets 0.3/0.5/0.7")


DESK_MODEL = {"image_size": 24, "patch_size": 4, "embed_dim": 64, "heads": 4,
              "depth": 6, "mlp_ratio": 4.0, "num_classes": 10,
              "patch_head": "pooled-linear"}
DESK_DATA = {"train_per_class": 60, "val_per_class": 24, "noise": 0.3}


def desk_setup(seed, keep, epochs, finetune, batch=64):
    warm, sparsify, sharpen = epochs
    raw = {
        "model": dict(DESK_MODEL),
        "schedule": {"epochs_warmup": warm, "epochs_sparsify": sparsify,
                     "epochs_sharpen": sharpen, "epochs_finetune": finetune,
                     "batch_size": batch},
        "data": dict(DESK_DATA),
        "pruning": {"keep_ratio": keep},
        "seed": seed,
    }
    cfg = config_from_dict(raw)
    spec = SyntheticSpec(num_classes=10, image_size=24, noise=0.3,
                         train_per_class=60, val_per_class=24, seed=seed)
    train, val, _ = generate_synthetic(spec)
    model = MaskedVit(cfg.model.vit_config(), seed=seed)
    masks = MaskSet(model.config)
    heads = BpiHeads(model.config, patch_head="pooled-linear", seed=seed + 1)
    sched = PruneSchedule(warm, sparsify, sharpen, finetune, 0, keep)
    return cfg, model, masks, heads, sched, train, val


def test_08_end_to_end_desk_experiment():
    started = time.time()
    # dense baseline
    cfg, model, _, _, _, train, val = desk_setup(seed=0, keep=0.5,
                                                 epochs=(3, 22, 25), finetune=50)
    _, base_acc = train_dense(model, train, val, cfg, epochs=22)
    assert base_acc >= 0.90, f"dense baseline only reached {base_acc:.3f}"

    # full four-phase pruning at keep 0.5
    cfg, model, masks, heads, sched, train, val = desk_setup(
        seed=0, keep=0.5, epochs=(3, 22, 25), finetune=50)
    metrics = MetricsWriter(None)
    run = PruningRun(model, masks, heads, sched, train, val, cfg, metrics)
    compact, summary = run.run()
    phases = [r["phase"] for r in metrics.epoch_rows]
    for phase in ("warmup", "sparsify", "sharpen", "finetune"):
        assert phase in phases, f"phase {phase} missing from the schedule"
    final_acc = summary["val_acc_final"]
    assert final_acc >= base_acc - 0.05, (
        f"pruned accuracy {final_acc:.3f} vs baseline {base_acc:.3f}")
    quantum = max(3 * g.heads * g.sizes[g.inner_kind] + 1 for g in run.geoms)
    assert abs(summary["params_remaining"] - 0.5 * summary["params_total"]) <= quantum

    # aggressive target completes without collapsing any mask below its guard
    cfg, model, masks, heads, sched, train, val = desk_setup(
        seed=1, keep=0.25, epochs=(2, 6, 6), finetune=4)
    run = PruningRun(model, masks, heads, sched, train, val, cfg)
    compact25, summary25 = run.run()
    for i in range(model.config.num_blocks):
        kept = masks.kept_indices(i)
        for kind, size in model.config.mask_sizes(i).items():
            assert len(kept[kind]) >= max(1, math.ceil(0.05 * size)), (
                f"block {i} mask '{kind}' collapsed")
    elapsed = time.time() - started
    assert elapsed < 15 * 60, f"desk experiment exceeded 15 min: {elapsed:.0f}s"
    report(8, f"dense baseline {base_acc:.3f}; pruned-to-0.5 final {final_acc:.3f}; "
              f"0.25 run kept every mask above its guard; wall {elapsed:.0f}s")


def test_09_frozen_vs_trainable_harness(tmp_path):
    micro = {
        "model": {"image_size": 8, "patch_size": 4, "embed_dim": 8, "heads": 2,
                  "depth": 2, "mlp_ratio": 2.0, "num_classes": 3,
                  "patch_head": "pooled-linear"},
        "schedule": {"epochs_warmup": 1, "epochs_sparsify": 2, "epochs_sharpen": 2,
                     "epochs_finetune": 2, "epochs_dense": 2, "batch_size": 16},
        "data": {"train_per_class": 8, "val_per_class": 4},
        "pruning": {"keep_ratio": 0.6},
    }
    cfgfile = tmp_path / "cfg.yaml"
    cfgfile.write_text(yaml.safe_dump(micro))
    assert cli.main(["train", "--config", str(cfgfile),
                     "--out", str(tmp_path / "base")]) == 0
    assert cli.main(["prune", "--config", str(cfgfile), "--frozen",
                     "--out", str(tmp_path / "frozen"),
                     "--baseline", str(tmp_path / "base")]) == 0
    with open(tmp_path / "frozen" / "summary.json") as fh:
        summary = json.load(fh)
    assert summary["frozen"] is True
    assert "baseline_acc" in summary and "val_acc_final" in summary

    # faithfulness: backbone drift below 1e-4 relative over the pruning phases
    cfg = config_from_dict({**micro, "frozen": True})
    spec = SyntheticSpec(num_classes=3, image_size=8, noise=0.3,
                         train_per_class=8, val_per_class=4, seed=0)
    train, val, _ = generate_synthetic(spec)
    model = MaskedVit(cfg.model.vit_config(), seed=0)
    masks = MaskSet(model.config)
    heads = BpiHeads(model.config, patch_head="pooled-linear", seed=1)
    before = [p.data.copy() for p in model.parameters()]
    run = PruningRun(model, masks, heads, PruneSchedule(1, 2, 2, 2, 0, 0.6),
                     train, val, cfg)
    run.run()
    delta = math.sqrt(sum(float(((p.data - b) ** 2).sum())
                          for p, b in zip(model.parameters(), before)))
    norm = math.sqrt(sum(float((b ** 2).sum()) for b in before))
    assert delta / norm < 1e-4, f"frozen backbone drifted {delta / norm:.2e}"
    report(9, f"frozen run completed; report carries baseline and pruned "
              f"accuracies; backbone drift {delta / norm:.1e} < 1e-4")


def test_10_probe_wellformed_and_deterministic(tmp_path):
    micro = {
        "model": {"image_size": 8, "patch_size": 4, "embed_dim": 8, "heads": 2,
                  "depth": 3, "mlp_ratio": 2.0, "num_classes": 3,
                  "patch_head": "resnet"},
        "schedule": {"epochs_dense": 2, "epochs_warmup": 1, "epochs_sparsify": 1,
                     "epochs_sharpen": 1, "epochs_finetune": 0, "batch_size": 16,
                     "probe_epochs": 2, "checkpoint_every": 1},
        "data": {"train_per_class": 6, "val_per_class": 3},
        "pruning": {"keep_ratio": 0.6},
    }
    cfgfile = tmp_path / "cfg.yaml"
    cfgfile.write_text(yaml.safe_dump(micro))
    assert cli.main(["train", "--config", str(cfgfile),
                     "--out", str(tmp_path / "t")]) == 0
    ckpts = sorted(str(p) for p in (tmp_path / "t").glob("checkpoint-epoch*.ckpt"))
    assert len(ckpts) == 2
    for out in ("p1", "p2"):
        assert cli.main(["probe", "--config", str(cfgfile),
                         "--out", str(tmp_path / out)] + ckpts) == 0
    csv1 = (tmp_path / "p1" / "probe.csv").read_text()
    csv2 = (tmp_path / "p2" / "probe.csv").read_text()
    assert csv1 == csv2
    lines = csv1.strip().splitlines()
    depth = micro["model"]["depth"]
    assert len(lines) == 1 + len(ckpts) * 2 * depth  # header + 2D rows per ckpt
    assert cli.main(["report", str(tmp_path / "p1")]) == 0
    assert (tmp_path / "p1" / "probe_norm_max.csv").exists()
    assert (tmp_path / "p1" / "probe_norm_mean.csv").exists()
    report(10, f"probe emitted {len(lines) - 1} rows (2 x depth per checkpoint), "
               f"deterministic across runs, with max- and mean-normalized tables")
