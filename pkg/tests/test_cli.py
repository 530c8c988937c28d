import json

import numpy as np
import pytest

from mixda import checkpoint as ckpt
from mixda import config as C
from mixda.cli import main
from mixda.synthetic import fact_world, general_sentences

TOY = """[run]
seed = 3
seeds = 0 1
output_dir = out

[data]
general = general.jsonl
domain = facts.tsv
train = train.jsonl
test = test.jsonl
k = 4

[model]
d_model = 16
d_ff = 32
num_layers = 2
max_len = 16
adapter_layers = 0 1
task = classification

[stage1]
epochs = 2
batch_size = 8

[stage2]
epochs = 2
batch_size = 4
lrs = 1e-4 5e-4
batch_sizes = 4 8
"""


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.delenv("MIXDA_SEED", raising=False)
    w = fact_world(24, seed=1)
    (tmp_path / "facts.tsv").write_text("".join(f"{t.subject}\t{t.relation}\t{t.object}\n" for t in w.triples))
    (tmp_path / "general.jsonl").write_text("".join(json.dumps({"text": s}) + "\n" for s in general_sentences(16)))
    ex = w.task_examples()
    (tmp_path / "train.jsonl").write_text("".join(json.dumps(e) + "\n" for e in ex[:20]))
    (tmp_path / "test.jsonl").write_text("".join(json.dumps(e) + "\n" for e in ex[20:]))
    (tmp_path / "toy.ini").write_text(TOY)
    return tmp_path


def run(*argv):
    return main([str(a) for a in argv])


def test_stage1_writes_loadable_adapter_and_is_deterministic(workdir):
    cfgp = workdir / "toy.ini"
    assert run("stage1", "--config", cfgp) == 0
    first = (workdir / "out" / "adapter.ckpt").read_bytes()
    csv1 = (workdir / "out" / "stage1_loss.csv").read_text()
    snap, tensors = ckpt.load(workdir / "out" / "adapter.ckpt")
    assert tensors and all(".domain_adapter.0." in n for n in tensors)
    assert C.model_from_snapshot(snap)[0].num_domain_adapters == 1
    assert run("stage1", "--config", cfgp) == 0
    assert (workdir / "out" / "adapter.ckpt").read_bytes() == first
    assert (workdir / "out" / "stage1_loss.csv").read_text() == csv1


def test_seed_env_changes_output(workdir, monkeypatch):
    cfgp = workdir / "toy.ini"
    run("stage1", "--config", cfgp)
    a = (workdir / "out" / "adapter.ckpt").read_bytes()
    monkeypatch.setenv("MIXDA_SEED", "11")
    run("stage1", "--config", cfgp)
    assert (workdir / "out" / "adapter.ckpt").read_bytes() != a


def test_stage2_eval_pipeline(workdir, capsys):
    cfgp = workdir / "toy.ini"
    run("stage1", "--config", cfgp)
    adapter = workdir / "out" / "adapter.ckpt"
    assert run("stage2", "--config", cfgp, "--adapter", adapter) == 0
    report = (workdir / "out" / "stage2_report.txt").read_text()
    assert "routing: gated" in report and "±" in report
    task = workdir / "out" / "seed_0" / "task.ckpt"
    _, tensors = ckpt.load(task)
    # one adapter -> gate over two experts
    assert tensors["layer.0.gate.up.weight"].shape[-1] == 2
    assert (workdir / "out" / "seed_0" / "gate_weights.csv").read_text().startswith("layer,expert,mean_weight\n")
    capsys.readouterr()
    assert run("eval", "--checkpoint", task, "--data", workdir / "test.jsonl", "--metric", "accuracy") == 0
    out1 = capsys.readouterr().out
    run("eval", "--checkpoint", task, "--data", workdir / "test.jsonl", "--metric", "accuracy")
    assert capsys.readouterr().out == out1
    assert out1.startswith("accuracy\t")
    assert run("eval", "--checkpoint", task, "--data", workdir / "test.jsonl", "--metric", "pearson") == 2


def test_two_adapters_give_three_experts(workdir):
    cfgp = workdir / "toy.ini"
    run("stage1", "--config", cfgp)
    a = workdir / "out" / "adapter.ckpt"
    b = workdir / "b.ckpt"
    b.write_bytes(a.read_bytes())
    assert run("stage2", "--config", cfgp, "--adapter", a, "--adapter", b) == 0
    _, tensors = ckpt.load(workdir / "out" / "seed_0" / "task.ckpt")
    assert tensors["layer.1.gate.up.weight"].shape[-1] == 3
    assert run("stage2", "--config", cfgp, "--adapter", a, "--adapter", a) == 2


def test_eval_reproduces_overfit_training_split(workdir, capsys):
    cfgp = workdir / "toy.ini"
    text = TOY.replace("epochs = 2\nbatch_size = 4", "epochs = 40\nbatch_size = 4\nlr = 5e-3").replace(
        "num_layers = 2", "num_layers = 2\ndropout = 0.0"
    )
    text = text.replace("test = test.jsonl\nk = 4", "k = 4")
    cfgp.write_text(text)
    (workdir / "tiny.jsonl").write_text('{"text": "alpha", "label": 0}\n{"text": "beta", "label": 1}\n' * 8)
    cfgp.write_text(text.replace("train = train.jsonl", "train = tiny.jsonl"))
    assert run("stage2", "--config", cfgp) == 0
    capsys.readouterr()
    task = workdir / "out" / "seed_0" / "task.ckpt"
    assert run("eval", "--checkpoint", task, "--data", workdir / "tiny.jsonl", "--metric", "accuracy") == 0
    assert capsys.readouterr().out.startswith("accuracy\t1.000000")


def test_ablations(workdir):
    cfgp = workdir / "toy.ini"
    run("stage1", "--config", cfgp)
    adapter = workdir / "out" / "adapter.ckpt"
    assert run("ablate", "--config", cfgp, "--mode", "no-moa", "--adapter", adapter) == 0
    _, t = ckpt.load(workdir / "out" / "ablate-no-moa" / "seed_0" / "task.ckpt")
    assert not any(".gate." in n for n in t)
    assert run("ablate", "--config", cfgp, "--mode", "no-old") == 0
    rows = (workdir / "out" / "ablate-no-old" / "stage1_loss.csv").read_text().splitlines()[1:]
    assert rows and all(r.split(",")[2] == "" for r in rows)
    assert run("ablate", "--config", cfgp, "--mode", "no-da") == 0
    _, t = ckpt.load(workdir / "out" / "ablate-no-da" / "seed_0" / "task.ckpt")
    assert not any(".domain_adapter." in n for n in t)
    assert any(".task_adapter." in n for n in t)


def test_grid(workdir, capsys):
    assert run("grid", "--config", workdir / "toy.ini") == 0
    lines = (workdir / "out" / "grid.csv").read_text().splitlines()
    assert lines[0] == "lr,batch_size,best_val" and len(lines) == 5
    assert capsys.readouterr().out.startswith("best lr=")


def test_exit_codes(workdir):
    cfgp = workdir / "toy.ini"
    (workdir / "bad.ini").write_text(TOY + "\n[model]\nwidth = 3\n")
    assert run("stage1", "--config", workdir / "bad.ini") == 2
    (workdir / "bad2.ini").write_text(TOY.replace("adapter_layers = 0 1", "adapter_layers = 0 5"))
    assert run("stage1", "--config", workdir / "bad2.ini") == 2
    (workdir / "bad3.ini").write_text(TOY.replace("facts.tsv", "missing.tsv"))
    assert run("stage1", "--config", workdir / "bad3.ini") == 3
    (workdir / "junk.ckpt").write_bytes(b"garbage")
    assert run("stage2", "--config", cfgp, "--adapter", workdir / "junk.ckpt") == 4
    run("stage1", "--config", cfgp)
    raw = (workdir / "out" / "adapter.ckpt").read_bytes()
    (workdir / "cut.ckpt").write_bytes(raw[:-5])
    assert run("stage2", "--config", cfgp, "--adapter", workdir / "cut.ckpt") == 4
    (workdir / "wide.ini").write_text(TOY.replace("d_ff = 32", "d_ff = 64"))
    assert run("stage2", "--config", workdir / "wide.ini", "--adapter", workdir / "out" / "adapter.ckpt") == 4


def test_gate_closed_stage2_matches_vanilla_eval(workdir):
    """Forced gate-closed training yields the same predictions as a model without adapters."""
    cfgp = workdir / "toy.ini"
    run("stage1", "--config", cfgp)
    closed = TOY.replace("lrs = 1e-4 5e-4", "routing = forced-closed")
    (workdir / "closed.ini").write_text(closed.replace("output_dir = out", "output_dir = closed"))
    assert run("stage2", "--config", workdir / "closed.ini", "--adapter", workdir / "out" / "adapter.ckpt") == 0
    (workdir / "plain.ini").write_text(TOY.replace("output_dir = out", "output_dir = plain").replace(
        "[model]", "[model]\ngate_style = none"))
    assert run("stage2", "--config", workdir / "plain.ini") == 0
    _, a = ckpt.load(workdir / "closed" / "seed_0" / "task.ckpt")
    _, b = ckpt.load(workdir / "plain" / "seed_0" / "task.ckpt")
    for name, arr in b.items():
        assert np.array_equal(arr, a[name]), name
    assert (workdir / "closed" / "seed_0" / "metrics.csv").read_text() == (
        workdir / "plain" / "seed_0" / "metrics.csv"
    ).read_text()
