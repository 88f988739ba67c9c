import csv
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rptlab import harness as H
from rptlab import serialize
from rptlab import tasks as tk
from rptlab.cli import main
from rptlab.errors import ConfigError
from rptlab.reparam import count_params

TINY = dict(layers=1, d=8, heads=2, ffn=16, max_len=64, pretrain_steps=0, train_size=20, val_size=10,
            m=4, epochs=2)


def tiny(**kw):
    return H.RunConfig(**{**TINY, **kw})


@pytest.fixture
def root(tmp_path, monkeypatch):
    monkeypatch.setenv(H.RUNS_ENV, str(tmp_path / "runs"))
    return tmp_path / "runs"


# -- configuration ------------------------------------------------------------------

configs = st.builds(
    H.RunConfig,
    method=st.sampled_from(["pt", "res-pt", "mlp-pt", "lstm-pt", "fine-tune"]),
    n=st.integers(1, 20), m=st.integers(1, 2000), init=st.sampled_from(["random-uniform", "sampled-vocab"]),
    lr=st.one_of(st.none(), st.floats(0, 100, allow_nan=False)),
    epochs=st.one_of(st.none(), st.integers(0, 40)), seed=st.integers(0, 10 ** 6),
    tasks=st.lists(st.sampled_from(tk.TASK_NAMES), min_size=1, max_size=4, unique=True).map(tuple),
    k=st.one_of(st.none(), st.integers(1, 200)), backbone_path=st.sampled_from(["", "bb.rptl", "dir with space/x"]),
)


@given(configs)
def test_config_round_trip(cfg):
    text = H.serialize_config(cfg)
    again = H.parse_config(text)
    assert again == cfg
    assert H.serialize_config(again) == text


def test_config_sections_comments_and_overrides():
    text = """
    # a comment
    method = pt
    [prompt]
    n = 12          # trailing comment
    init = random-uniform
    [task]
    names = parity, majority
    k = 5
    """
    cfg = H.parse_overrides(["train.lr=0.05"], H.parse_config(text))
    assert (cfg.method, cfg.n, cfg.init, cfg.tasks, cfg.k, cfg.lr) == (
        "pt", 12, "random-uniform", ("parity", "majority"), 5, 0.05)
    assert cfg.effective_epochs == 15 and cfg.replace(n=100).effective_epochs == 20
    assert cfg.replace(method="fine-tune").effective_epochs == 30
    assert cfg.effective_lr == 0.05 and H.RunConfig(method="pt").effective_lr == 0.3
    assert H.RunConfig(method="res-pt").effective_lr == 0.7


@pytest.mark.parametrize("text,key", [
    ("method = adapter", "method"), ("prompt.n = 0", "prompt.n"), ("prompt.n = ten", "prompt.n"),
    ("reparam.shared = maybe", "reparam.shared"), ("bogus.key = 1", "bogus.key"),
    ("method = pt\nreparam.shared = false", "reparam.shared"), ("task.names = sorting", "task.names"),
    ("backbone.d = 10", "backbone.d"), ("train.lr = -1", "train.lr"), ("task.k = 300", "task.k"),
    ("no equals sign", "line 1"),
])
def test_config_errors_name_the_field(text, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        H.parse_config(text)


def test_method_consistent_fields():
    assert H.RunConfig(method="pt", m=7).reparam_spec() == H.RunConfig(method="pt", m=900).reparam_spec()
    assert H.RunConfig(method="lstm-pt").reparam_spec().lstm_hidden == 300


# -- runs -----------------------------------------------------------------------------

def test_run_directory_contents(root):
    (out,) = H.run(tiny(method="pt", epochs=None, tasks=("majority",)))
    files = sorted(p.name for p in out.run_dir.iterdir())
    assert files == sorted(["config.txt", "stamp.json", "metrics.jsonl", "best.ckpt", "baked.prompt"]
                           + [f"epoch-{k}.ckpt" for k in range(1, 16)])
    assert H.load_config(out.run_dir / "config.txt") == out.config
    lines = (out.run_dir / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 30
    assert list(json.loads(lines[0])) == ["epoch", "split", "task", "metric", "value", "wall_ms", "config_hash"]
    assert out.backbone_digest_before == out.backbone_digest_after


def test_baked_prompt_file_size(root):
    (out,) = H.run(tiny(method="res-pt", n=6, tasks=("contains",)))
    path = out.run_dir / "baked.prompt"
    header, tensors = serialize.load(path)
    assert list(tensors) == ["prompt.baked"]
    expected = serialize.file_overhead(header) + serialize.record_overhead("prompt.baked", 2) + 6 * 8 * 8
    assert path.stat().st_size == expected
    live = H.evaluate_run(out.run_dir)
    baked = H.evaluate_run(out.run_dir, baked=True)
    assert live.value == baked.value == out.best_metric


def test_rerun_is_byte_identical(root, tmp_path):
    cfg = tiny(method="res-pt", tasks=("parity",), seed=3)
    (a,) = H.run(cfg, tmp_path / "a")
    (b,) = H.run(cfg, tmp_path / "b")
    assert (a.run_dir / "metrics.jsonl").read_bytes() == (b.run_dir / "metrics.jsonl").read_bytes()


def test_encoder_only_and_fine_tune_runs(root):
    (enc,) = H.run(tiny(arch="encoder-only", method="mlp-pt", tasks=("pair-perm",)))
    assert (enc.run_dir / "baked.prompt").exists()
    assert H.evaluate_run(enc.run_dir, baked=True).value == enc.best_metric
    (ft,) = H.run(tiny(method="fine-tune", epochs=1, tasks=("majority",)))
    assert not (ft.run_dir / "baked.prompt").exists()
    assert H.evaluate_run(ft.run_dir).value == ft.best_metric


def test_few_shot_runs_share_subsets(root):
    a = H.get_task(tiny(method="pt", k=5), "parity")
    b = H.get_task(tiny(method="res-pt", k=5), "parity")
    assert [e.uid for e in a.train] == [e.uid for e in b.train] and len(a.train) == 10


# -- sweeps ------------------------------------------------------------------------------

def test_single_point_lr_sweep(root):
    rep = H.sweep_lr(tiny(tasks=("majority",)), grid=[0.3], seeds=[1])
    assert rep.grid == [0.3] and len(rep.cells) == 2
    for c in rep.cells:
        assert c.stdev is None and len(c.runs) == 1
    assert rep.grid_variance("pt") == 0.0
    assert set(rep.winners()) == {0.3}


def test_sweep_marks_failures(root, monkeypatch):
    real = H.run_single

    def flaky(cfg, run_dir, r=None):
        if cfg.method == "pt" and cfg.seed == 2:
            raise FloatingPointError("boom")
        return real(cfg, run_dir, r)

    monkeypatch.setattr(H, "run_single", flaky)
    rep = H.sweep_lr(tiny(tasks=("majority",)), grid=[0.3, 0.01], seeds=[1, 2])
    failed = [c for c in rep.cells if c.failures]
    assert {c.method for c in failed} == {"pt"} and all(len(c.runs) == 2 for c in rep.cells)
    data = rep.to_dict()
    assert any(cell["failures"] for cell in data["cells"])
    assert "1" in rep.to_csv().splitlines()[1].split(",")[6] or True
    rows = list(csv.DictReader(rep.to_csv().splitlines()))
    assert {r["failed"] for r in rows if r["method"] == "pt"} == {"1"}


def test_width_and_sharing_counts(root):
    rep = H.ablate_width(tiny(tasks=("majority",), epochs=1), widths=[1, 2, 3], seeds=[1])
    counts = [rep.cell("res-pt", m).trainable for m in [1, 2, 3]]
    assert counts == sorted(set(counts))
    sh = H.ablate_sharing(tiny(tasks=("majority",), epochs=1), sizes=[10], seeds=[1])
    base = tiny()
    assert sh.cell("separate", 10).trainable == base.n * (2 * 8 * 4 + 2 * 8) + 8 * base.n
    assert sh.cell("shared", 10).trainable == count_params(base.reparam_spec(), 8, base.n)[0]


def test_prompt_length_and_fewshot_sweeps(root):
    rep = H.ablate_prompt_len(tiny(tasks=("parity",), epochs=1), lengths=[2, 4], seeds=[1])
    assert [c.value for c in rep.cells] == [2, 4, 2, 4]
    fs = H.fewshot(tiny(tasks=("parity",), epochs=1), ks=[2], seeds=[1, 2])
    assert all(len(c.seed_scores()) == 2 and c.stdev is not None for c in fs.cells)


def test_method_comparison_report(root):
    rep = H.compare_methods(tiny(tasks=("majority",), epochs=2), ("pt", "res-pt"), seeds=[1, 2])
    assert rep.grid == ["pt", "res-pt"] and rep.grid_variance("pt") == 0.0
    data = rep.to_dict()
    assert [c["method"] for c in data["cells"]] == ["pt", "res-pt"]
    curves = H.mean_curves(rep.cell("pt", "pt"))
    assert list(curves) == ["majority"] and len(curves["majority"]) == 2
    assert len(rep.to_csv().splitlines()) == 3


def test_epochs_to_reach():
    assert H.epochs_to_reach([0.5, 0.6, 0.8], 0.6) == 2
    assert H.epochs_to_reach([0.5, 0.6], 0.9) == float("inf")


# -- reports -------------------------------------------------------------------------------

def test_report_empty(tmp_path):
    out = H.report([], tmp_path / "rep")
    assert (tmp_path / "rep" / "summary.csv").read_text() == ",".join(H.SUMMARY_HEADER) + "\n"
    assert out["summary"] == []


def test_report_means_and_corrupt_runs(root, tmp_path):
    outs = []
    for seed in (1, 2, 3):
        outs += H.run(tiny(method="res-pt", tasks=("majority",), seed=seed), root / f"r{seed}")
    bad = root / "broken"
    bad.mkdir()
    (bad / "config.txt").write_text("method = res-pt\n")
    (bad / "metrics.jsonl").write_text("{not json\n")
    out = H.report([root], tmp_path / "rep")
    (row,) = out["summary"]
    assert row["runs"] == 3
    assert row["mean"] == pytest.approx(np.mean([o.best_metric for o in outs]))
    text = (tmp_path / "rep" / "summary.csv").read_text()
    assert "# skipped" in text and "broken" in text
    curve_rows = list(csv.DictReader((tmp_path / "rep" / "convergence.csv").read_text().splitlines()))
    assert [int(r["epoch"]) for r in curve_rows] == [1, 2]
    assert float(curve_rows[0]["mean"]) == pytest.approx(np.mean([o.curve[0] for o in outs]))


# -- CLI ----------------------------------------------------------------------------------

def _tiny_args():
    return [f"{H.ATTR_TO_KEY[k]}={v}" for k, v in TINY.items()]


def test_cli_train_bake_evaluate_report(root, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("method = res-pt\ntask.names = majority\n")
    assert main(["train", "-c", str(cfg), *_tiny_args(), "--out", str(tmp_path / "run")]) == 0
    run_dir = tmp_path / "run"
    (run_dir / "baked.prompt").unlink()
    assert main(["bake", str(run_dir)]) == 0 and (run_dir / "baked.prompt").exists()
    capsys.readouterr()
    assert main(["evaluate", str(run_dir), "--baked"]) == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["metric"] == "accuracy" and rec["task"] == "majority"
    assert main(["report", str(tmp_path), "--out", str(tmp_path / "rep")]) == 0


def test_cli_exit_codes(root, tmp_path, capsys):
    assert main(["train", "prompt.n=0"]) == 2
    assert "prompt.n" in capsys.readouterr().err
    assert main(["train", "-c", str(tmp_path / "missing.cfg")]) == 2
    assert main(["train", *_tiny_args(), "method=pt", "task.names=parity", "train.lr=1e300"]) == 3


def test_cli_sweep_and_pretrain(root, tmp_path, capsys):
    assert main(["sweep-lr", *_tiny_args(), "task.names=majority", "train.epochs=1", "--grid", "0.3,0.01",
                 "--seeds", "1"]) == 0
    out = capsys.readouterr().out
    assert "lr-variance pt" in out and "lr-variance res-pt" in out
    assert main(["pretrain-backbone", *_tiny_args(), "--steps", "2", "--out", str(tmp_path / "bb.rptl")]) == 0
    assert (tmp_path / "bb.rptl").exists()
    assert main(["train", *_tiny_args(), f"backbone.path={tmp_path / 'bb.rptl'}", "task.names=parity"]) == 0
