"""End-to-end acceptance checks.

The statistical criteria train the default backbone with every method over
five seeds, so this module takes a while (about 40 minutes on one core).
Set ``RPT_ACCEPTANCE_ROOT`` to keep the run directories between sessions;
sweeps whose directories already exist are recomputed all the same, only the
pretrained backbone and generated tasks are reused.
"""

import numpy as np
import pytest

from rptlab import harness as H
from rptlab import tasks as tk
from rptlab.backbone import Backbone, BackboneConfig
from rptlab.model import PromptModel, collate
from rptlab.reparam import ReparamNet, ReparamSpec, bake, count_params, init_prompt
from rptlab.tensor import Parameter, grad_check

from conftest import record_verdict, tiny_config

SEEDS = H.DEFAULT_SEEDS
BASE = H.RunConfig(save_checkpoints=False)
VARIANTS = [("identity", True), ("residual-mlp", True), ("residual-mlp", False), ("mlp-no-skip", True),
            ("lstm", True)]


@pytest.fixture(scope="module")
def root(runs_root):
    return runs_root


@pytest.fixture(scope="module")
def methods(root):
    """pt, res-pt and mlp-pt at their default settings (sampled-vocab init)."""
    return H.compare_methods(BASE, ("pt", "res-pt", "mlp-pt"), SEEDS, root=root)


@pytest.fixture(scope="module")
def uniform(root):
    return H.compare_methods(BASE.replace(init="random-uniform"), ("pt", "res-pt"), SEEDS, root=root)


@pytest.fixture(scope="module")
def lr_sweep(root):
    return H.sweep_lr(BASE, H.LR_GRID, SEEDS, root=root)


@pytest.fixture(scope="module")
def few(root):
    return H.fewshot(BASE, [5], SEEDS, root=root)


def _model(bb, kind, shared, n, m, seed, lstm_hidden=300):
    spec = ReparamSpec(kind=kind, m=m, shared=shared, lstm_hidden=lstm_hidden)
    bank = init_prompt("sampled-vocab", n, bb.p("tok_emb").data, seed)
    net = ReparamNet(spec, bb.config.d, n, seed) if kind != "identity" else None
    head = None
    if bb.config.arch == "encoder-only":
        head = Parameter(np.random.default_rng(seed).normal(0, 0.02, size=(2, bb.config.d)), "head.w")
    return PromptModel(bb, bank, spec, net, head)


def _no_failures(*reports):
    for rep in reports:
        for c in rep.cells:
            assert not c.failures, [(c.method, c.value, r.task, r.config.seed, r.error) for r in c.failures]


# -- structural --------------------------------------------------------------------------

def test_criterion_01_parameter_counts():
    plain = count_params(ReparamSpec(kind="identity"), 768, 100)[0]
    res = count_params(ReparamSpec(kind="residual-mlp", m=250, shared=True), 768, 100)[0]
    ok = plain == 76_800 and res == 462_336
    record_verdict(1, ok, f"identity {plain}, residual {res} (want 76800, 462336)")
    assert ok


def test_criterion_02_bake_equivalence(root):
    worst = 0.0
    for arch in ("encoder-decoder", "encoder-only"):
        if arch == "encoder-decoder":
            bb = H.get_backbone(BASE, root)
        else:
            bb = Backbone(BackboneConfig(arch=arch, seed=5))
            bb.freeze()
        for kind, shared in VARIANTS:
            model = _model(bb, kind, shared, n=BASE.n, m=BASE.m, seed=2)
            rng = np.random.default_rng(7)
            if model.reparam is not None:   # move away from the initial point
                for p in model.reparam.params.values():
                    p.data = p.data + rng.normal(0, 0.05, size=p.shape)
            baked = PromptModel(bb, bake(model.spec, model.reparam, model.prompt), model.spec, None, model.head)
            for name in tk.TASK_NAMES:
                task = H.get_task(BASE, name, root)
                fm = [tk.format_example(arch, BASE.n, ex, max_len=bb.config.max_len) for ex in task.val]
                batch = collate(fm, [ex.label for ex in task.val])
                diff = float(np.abs(model.logits(batch).data - baked.logits(batch).data).max())
                worst = max(worst, diff)
    ok = worst < 1e-9
    record_verdict(2, ok, f"max |live - baked| logit = {worst:.3e} (< 1e-9)")
    assert ok


def test_criterion_03_residual_identity():
    bb = Backbone(BackboneConfig(seed=11))
    bb.freeze()
    rng = np.random.default_rng(3)
    same = 0
    for i in range(100):
        res = _model(bb, "residual-mlp", True, n=4, m=16, seed=i)
        res.reparam.p("W_up").data[:] = 0.0
        res.reparam.p("ln.b").data[:] = 0.0
        plain = PromptModel(bb, res.prompt, ReparamSpec(kind="identity"))
        task = tk.generate_task(tk.TASK_NAMES[i % 4], i, train_size=2, val_size=2)
        ex = task.val[rng.integers(2)]
        batch = collate([tk.format_example(bb.config.arch, 4, ex, max_len=bb.config.max_len)], [ex.label])
        same += int(np.array_equal(res.logits(batch).data, plain.logits(batch).data))
    ok = same == 100
    record_verdict(3, ok, f"{same}/100 inputs bitwise equal")
    assert ok


def test_criterion_04_gradient_check():
    worst, ok = 0.0, True
    for arch in ("encoder-decoder", "encoder-only"):
        bb = Backbone(tiny_config(arch))
        bb.freeze()
        for kind, shared in VARIANTS:
            model = _model(bb, kind, shared, n=3, m=4, seed=1, lstm_hidden=4)
            if model.reparam is not None:
                rng = np.random.default_rng(0)
                for p in model.reparam.params.values():
                    p.data = p.data + rng.normal(0, 0.3, size=p.shape)
            task = tk.generate_task("contains", 0, train_size=4, val_size=2)
            fm = [tk.format_example(arch, 3, ex, max_len=64) for ex in task.train]
            batch = collate(fm, [ex.label for ex in task.train])
            params = model.trainable()
            names = {p.name for p in params}
            assert "prompt.P" in names and (arch != "encoder-only" or "head.w" in names)
            rep = grad_check(lambda: model.loss(batch), params, tol=1e-5)
            worst = max(worst, max(rep.errors.values()))
            ok &= rep.passed
    record_verdict(4, ok, f"max relative error {worst:.2e} (< 1e-5)")
    assert ok


def test_criterion_05_frozen_backbone(methods, uniform, lr_sweep, few):
    runs = [r for rep in (methods, uniform, lr_sweep, few) for c in rep.cells for r in c.runs if r.ok]
    bad = [r for r in runs if r.backbone_digest_before != r.backbone_digest_after]
    ok = not bad and len(runs) > 0
    record_verdict(5, ok, f"{len(runs) - len(bad)}/{len(runs)} runs left the backbone digest unchanged")
    assert ok


def test_criterion_06_determinism(tmp_path, root):
    mismatched = []
    cases = [("pt", "encoder-decoder"), ("res-pt", "encoder-decoder"), ("mlp-pt", "encoder-decoder"),
             ("lstm-pt", "encoder-decoder"), ("fine-tune", "encoder-decoder"), ("res-pt", "encoder-only")]
    for method, arch in cases:
        cfg = BASE.replace(method=method, arch=arch, tasks=("pair-perm",), epochs=2, seed=4)
        if arch == "encoder-only":
            cfg = cfg.replace(pretrain_steps=50)
        (a,) = H.run(cfg, tmp_path / f"{method}-{arch}-a", root)
        H._BACKBONES.clear()                  # second execution reloads everything from disk
        (b,) = H.run(cfg, tmp_path / f"{method}-{arch}-b", root)
        if (a.run_dir / "metrics.jsonl").read_bytes() != (b.run_dir / "metrics.jsonl").read_bytes():
            mismatched.append((method, arch))
    ok = not mismatched
    record_verdict(6, ok, f"{len(cases) - len(mismatched)}/{len(cases)} configs byte-identical")
    assert ok


# -- direction of effect -------------------------------------------------------------------

def test_criterion_07_convergence(methods):
    _no_failures(methods)
    curves = {m: H.mean_curves(methods.cell(m, m)) for m in ("pt", "res-pt", "mlp-pt")}
    faster = slower = 0
    parts = []
    for name in tk.TASK_NAMES:
        target = float(curves["pt"][name][-1])
        e = {m: H.epochs_to_reach(curves[m][name], target) for m in curves}
        faster += e["res-pt"] <= e["pt"]
        slower += e["mlp-pt"] >= e["res-pt"]
        parts.append(f"{name}: T={target:.3f} pt={e['pt']} res={e['res-pt']} mlp={e['mlp-pt']}")
    ok = faster >= 3 and slower >= 3
    record_verdict(7, ok, f"res<=pt on {faster}/4, mlp>=res on {slower}/4 [" + "; ".join(parts) + "]")
    assert ok


def test_criterion_08_lr_robustness(lr_sweep):
    var = {m: lr_sweep.grid_variance(m) for m in ("pt", "res-pt")}
    means = {m: [round(lr_sweep.cell(m, v).mean, 3) for v in lr_sweep.grid] for m in var}
    ok = var["res-pt"] < var["pt"]
    record_verdict(8, ok, f"variance res-pt {var['res-pt']:.5f} vs pt {var['pt']:.5f}; means {means}")
    assert ok


def test_criterion_09_init_robustness(methods, uniform):
    _no_failures(methods, uniform)
    gap = {m: abs(uniform.cell(m, m).mean - methods.cell(m, m).mean) for m in ("pt", "res-pt")}
    ok = gap["res-pt"] <= gap["pt"]
    record_verdict(9, ok, f"|uniform - vocab| res-pt {gap['res-pt']:.4f} vs pt {gap['pt']:.4f}")
    assert ok


def test_criterion_10_few_shot(few):
    _no_failures(few)
    acc = {m: few.cell(m, 5).mean for m in ("pt", "res-pt")}
    ok = acc["res-pt"] >= acc["pt"]
    record_verdict(10, ok, f"k=5 suite accuracy res-pt {acc['res-pt']:.4f} vs pt {acc['pt']:.4f}")
    assert ok


def test_criterion_11_ablation_plumbing(root):
    base = BASE.replace(tasks=("majority",), epochs=1, train_size=40, val_size=20)
    width = H.ablate_width(base, H.WIDTH_GRID, [1], root=root)
    counts = [width.cell("res-pt", m).trainable for m in H.WIDTH_GRID]
    increasing = all(a < b for a, b in zip(counts, counts[1:]))
    sharing = H.ablate_sharing(base, [200, 400], [1], root=root)
    oracle_ok = True
    bb = H.get_backbone(base, root)
    for c in sharing.cells:
        cfg = base.replace(shared=c.method == "shared")
        model = H.build_model(cfg, bb)
        enumerated = sum(p.size for p in model.trainable())
        oracle_ok &= c.trainable == enumerated
    ok = increasing and oracle_ok
    record_verdict(11, ok, f"width counts {counts}; sharing counts match enumeration: {oracle_ok}")
    assert ok
