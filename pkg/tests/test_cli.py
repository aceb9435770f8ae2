import csv
import io
import json

import numpy as np
import pytest

from cpmoe.checkpoint import load_checkpoint
from cpmoe.cli import main, render_report
from cpmoe.metrics import AccuracyMatrix, summarize

SMALL_INI = """
[stream]
m_seen = 3
m_unseen = 2
n_train = 96
n_test = 48
[train]
epochs = 2
"""


@pytest.fixture
def small_cfg(tmp_path):
    p = tmp_path / "small.ini"
    p.write_text(SMALL_INI)
    return str(p)


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_run_writes_all_artifacts(tmp_path, small_cfg, capsys):
    out = tmp_path / "r"
    code, stdout, _ = run(["run", "--config", small_cfg, "--seed", "0", "--out", str(out)], capsys)
    assert code == 0 and "AP=" in stdout
    d = out / "full" / "seed_0"
    for name in ("matrix.csv", "matrix.json", "summary.json", "steps.log", "checkpoint.v1",
                 "manifest.json", "expert_load.csv", "config.resolved.ini"):
        assert (d / name).exists(), name
    assert (out / "config.resolved.ini").exists()
    summary = json.loads((d / "summary.json").read_text())
    assert set(summary) >= {"AP", "AF", "AF_max", "ZST", "variant", "seed"}
    m = AccuracyMatrix.from_json(json.loads((d / "matrix.json").read_text()))
    assert m.R.shape == (5, 3)
    assert summary["AP"] == summarize(m)["AP"]


def test_emitted_numbers_parse_back_exactly(tmp_path, small_cfg, capsys):
    out = tmp_path / "r"
    run(["run", "--config", small_cfg, "--out", str(out)], capsys)
    d = out / "full" / "seed_0"
    state, _, _ = load_checkpoint(d / "checkpoint.v1")
    rows = list(csv.reader(io.StringIO((d / "steps.log").read_text()), delimiter="\t"))
    assert rows[0] == ["task", "epoch", "step", "total", "task_loss", "reg", "aux", "lr", "usage"]
    assert len(rows) - 1 == len(state.steps)
    for row, s in zip(rows[1:], state.steps):
        assert float(row[3]) == s.total and float(row[5]) == s.reg and float(row[7]) == s.lr
        assert [int(v) for v in row[8].split(",")] == s.usage
    grid = list(csv.reader(io.StringIO((d / "matrix.csv").read_text())))
    parsed = np.array([[float(v) for v in r[2:]] for r in grid[1:]])
    assert parsed.tobytes() == state.matrix.R.tobytes()
    load = list(csv.reader(io.StringIO((d / "expert_load.csv").read_text())))
    total = np.sum([s.usage for s in state.steps], axis=0)
    assert load[-1][0] == "all" and [int(v) for v in load[-1][1:]] == total.tolist()


def test_same_seed_same_summary_bytes(tmp_path, small_cfg, capsys):
    for name in ("a", "b"):
        run(["run", "--config", small_cfg, "--seed", "2", "--out", str(tmp_path / name)], capsys)
    a = (tmp_path / "a" / "full" / "seed_2" / "summary.json").read_bytes()
    b = (tmp_path / "b" / "full" / "seed_2" / "summary.json").read_bytes()
    assert a == b


def test_ablate_produces_vanilla_variant(tmp_path, small_cfg, capsys):
    out = tmp_path / "r"
    code, _, _ = run(["run", "--config", small_cfg, "--out", str(out), "--ablate", "cp_bias,te_reg"], capsys)
    assert code == 0
    summary = json.loads((out / "vanilla" / "seed_0" / "summary.json").read_text())
    assert summary["variant"] == "vanilla"
    assert summary["ablation"] == {"cp_bias": False, "te_reg": False, "cka_weighting": True}
    rows = (out / "vanilla" / "seed_0" / "steps.log").read_text().splitlines()[1:]
    assert all(float(r.split("\t")[5]) == 0.0 for r in rows)


def test_resume_reproduces_uninterrupted_run(tmp_path, small_cfg, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    run(["run", "--config", small_cfg, "--seed", "1", "--out", str(a), "--stop-after", "1"], capsys)
    d = a / "full" / "seed_1"
    assert not (d / "summary.json").exists()
    code, stdout, _ = run(["run", "--resume", str(d / "checkpoint.v1")], capsys)
    assert code == 0
    run(["run", "--config", small_cfg, "--seed", "1", "--out", str(b)], capsys)
    e = b / "full" / "seed_1"
    for name in ("matrix.json", "summary.json", "steps.log", "expert_load.csv"):
        assert (d / name).read_bytes() == (e / name).read_bytes(), name


def test_report_tables(tmp_path, small_cfg, capsys):
    out = tmp_path / "r"
    run(["run", "--config", small_cfg, "--seed", "0", "--out", str(out)], capsys)
    code, text, _ = run(["report", str(out)], capsys)
    assert code == 0
    rows = [line for line in text.splitlines() if line.startswith("| 0 |")]
    assert len(rows) == 1
    assert "Ablation comparison" not in text
    assert (out / "report.md").read_text() == text
    _, again, _ = run(["report", str(out)], capsys)
    assert again == text


def test_report_mean_std_and_ablation_table(tmp_path, small_cfg, capsys):
    out = tmp_path / "r"
    run(["run", "--config", small_cfg, "--seed", "0,1", "--out", str(out)], capsys)
    run(["run", "--config", small_cfg, "--seed", "0,1", "--out", str(out), "--ablate", "cka_weighting"], capsys)
    _, text, _ = run(["report", str(out), "--no-write"], capsys)
    assert "## Ablation comparison" in text
    aps = [summarize(AccuracyMatrix.from_json(json.loads(
        (out / "full" / f"seed_{s}" / "matrix.json").read_text())))["AP"] for s in (0, 1)]
    mu, sd = 100 * np.mean(aps), 100 * np.std(aps, ddof=1)
    assert f"{mu:.2f} ± {sd:.2f}" in text
    assert not (out / "report.md").exists()


def test_render_report_is_order_independent():
    rows = [{"variant": v, "seed": s, "ablation": {"cp_bias": v == "full", "te_reg": v == "full",
                                                   "cka_weighting": True},
             "AP": 0.5 + s / 10, "AF": 0.1, "AF_max": 0.2, "ZST": 0.3}
            for v in ("full", "vanilla") for s in (0, 1)]
    assert render_report(rows) == render_report(rows[::-1])


def test_count_params(capsys):
    assert run(["count-params", "--preset", "superni"], capsys)[1].strip() == "99057664 (1.48% of 6.7B)"
    assert run(["count-params", "--preset", "vqa"], capsys)[1].startswith("31457280")
    assert run(["count-params", "--preset", "trivial"], capsys)[1].strip() == "10"
    code, out, _ = run(["count-params", "--layers", "1", "--module", "2:2", "--rank", "1", "--experts", "1"], capsys)
    assert code == 0 and out.strip() == "10"
    assert run(["count-params", "--layers", "1", "--rank", "1"], capsys)[0] == 1
    assert run(["count-params", "--module", "2x2"], capsys)[0] == 1


def test_numerical_subcommands_pass(capsys):
    code, out, _ = run(["verify-theorem1", "--trials", "20"], capsys)
    assert code == 0 and out.strip().splitlines()[-1].startswith("PASS")
    assert len([line for line in out.splitlines() if line.startswith("problem")]) == 20
    code, out, _ = run(["gradcheck"], capsys)
    assert code == 0 and "PASS" in out


def test_probe_report(tmp_path, small_cfg, capsys):
    dump = tmp_path / "probe.json"
    code, out, _ = run(["probe", "--config", small_cfg, "--task", "1", "--dump", str(dump)], capsys)
    assert code == 0
    assert "[h]" in out and "[omega_A]" in out and "[omega_total]" in out
    obj = json.loads(dump.read_text())
    assert len(obj["h"]) == 8 and all(0 <= v <= 1 + 1e-9 for v in obj["h"])
    assert min(obj["omega_A"]["data"]) >= 0
    assert run(["probe", "--config", small_cfg, "--task", "7"], capsys)[0] == 1


def test_exit_codes(tmp_path, capsys):
    assert run(["run", "--config", str(tmp_path / "missing.ini")], capsys)[0] == 3
    bad = tmp_path / "bad.ini"
    bad.write_text("[model]\ntop_k = 9\n")
    code, _, err = run(["run", "--config", str(bad)], capsys)
    assert code == 1 and "top_k" in err and "line 2" in err
    assert run(["run", "--ablate", "nonsense"], capsys)[0] == 1
    assert run(["run", "--seed", "x"], capsys)[0] == 1
    assert run(["frobnicate"], capsys)[0] == 1
    assert run(["report", str(tmp_path)], capsys)[0] == 3
    assert run(["run", "--resume", str(tmp_path / "nope.v1"), "--seed", "1"], capsys)[0] == 1


def test_non_finite_loss_exits_2(tmp_path, small_cfg, capsys, monkeypatch):
    import cpmoe.trainer as trainer

    real = trainer.cross_entropy

    def poisoned(logits, y):
        loss, grad = real(logits, y)
        return float("nan"), grad

    monkeypatch.setattr(trainer, "cross_entropy", poisoned)
    code, _, err = run(["run", "--config", small_cfg, "--out", str(tmp_path / "o")], capsys)
    assert code == 2 and "numerical abort" in err
    assert not (tmp_path / "o" / "full" / "seed_0" / "summary.json").exists()
