import csv
import json

import pytest

from tensorpsr.cli import read_config, run_cli
from tensorpsr.psr import PsrModel


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    traj = d / "traj.jsonl"
    assert run_cli(["gen", "--domain", "tag", "--episodes", "120", "--max-len", "5",
                    "--seed", "7", "--out", str(traj)]) == 0
    return d, traj


def learn(d, traj, name="m.json", *extra):
    out = d / name
    code = run_cli(["learn", "--traj", str(traj), "--out", str(out), "--domain", "tag",
                    "--max-histories", "40", "--max-hist-len", "2", "--alpha", "0.01",
                    "--max-iters", "60", *extra])
    return code, out


def test_gen_line_count(work):
    d, traj = work
    lines = traj.read_text().splitlines()
    assert len(lines) == 120
    assert all(json.loads(line) for line in lines)


def test_gen_deterministic(work):
    d, traj = work
    again = d / "again.jsonl"
    assert run_cli(["gen", "--domain", "tag", "--episodes", "120", "--max-len", "5",
                    "--seed", "7", "--out", str(again)]) == 0
    assert again.read_bytes() == traj.read_bytes()


def test_learn_and_inspect(work, capsys):
    d, traj = work
    code, out = learn(d, traj, "ncp.json", "--method", "ncp", "--rank", "6")
    assert code == 0
    model = PsrModel.load(out)
    assert model.R == 6
    assert model.meta["n_episodes"] == 120
    assert "traj" not in model.meta["config"]
    capsys.readouterr()
    assert run_cli(["inspect", str(out)]) == 0
    text = capsys.readouterr().out
    assert "R=6" in text
    n = 25 * 256
    assert f"one-step coverage: {n}/{n}" in text


def test_learn_model_bytes_deterministic(work):
    d, traj = work
    _, a = learn(d, traj, "a.json", "--method", "cp", "--rank", "4")
    _, b = learn(d, traj, "b.json", "--method", "cp", "--rank", "4")
    assert a.read_bytes() == b.read_bytes()


@pytest.mark.parametrize("method,rank", [("td", "3,3,4"), ("tpsr", "5"), ("cpsr", "5")])
def test_learn_other_methods(work, method, rank):
    d, traj = work
    code, out = learn(d, traj, f"{method}.json", "--method", method, "--rank", rank)
    assert code == 0 and out.exists()


def test_eval_model_and_uniform(work):
    d, traj = work
    _, model = learn(d, traj, "e.json", "--method", "ncp", "--rank", "6")
    reports = []
    for m in (str(model), "uniform"):
        out = d / ("rep_" + m.split("/")[-1])
        assert run_cli(["eval", "--model", m, "--traj", str(traj), "--domain", "tag",
                        "--out", str(out)]) == 0
        with open(out / "report.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert rows[0]["step_k"] == "1" and int(rows[0]["n_queries"]) == 120
        reports.append(float(rows[0]["ae_mean"]))
        assert json.loads((out / "summary.json").read_text())["config_hash"]
    assert all(0 <= r <= 1 for r in reports)


def test_config_file_and_override(tmp_path):
    cfg = tmp_path / "g.cfg"
    cfg.write_text("# corpus\ndomain = tag\nepisodes = 9   # small\nmax-len = 3\nseed = 1\n")
    out = tmp_path / "t.jsonl"
    assert run_cli(["gen", "--config", str(cfg), "--episodes", "4", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 4
    assert read_config(cfg) == {"domain": "tag", "episodes": "9", "max_len": "3", "seed": "1"}


def test_compare_byte_identical(tmp_path):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("\n".join([
        "domain = tag", "methods = CP, TPSR, uniform", "rank = 4", "rounds = 2",
        "n_train_master = 80", "train_len = 4", "n_test_master = 30", "test_len = 3",
        "n_train = 60", "n_test = 20", "max_hist_len = 2", "max_histories = 30",
        "alpha = 0.01", "max_iters = 40", "record_timings = false", ""]))
    outs = [tmp_path / "r1", tmp_path / "r2"]
    for out in outs:
        assert run_cli(["compare", "--config", str(cfg), "--out", str(out)]) == 0
    for name in ("report.csv", "report_rounds.csv", "summary.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    assert run_cli(["compare", "--config", str(cfg), "--set", "rounds", "1",
                    "--out", str(tmp_path / "r3")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "r3" / "report_rounds.csv", newline="")))
    assert {r["round"] for r in rows} == {"0"}


@pytest.mark.parametrize("argv", [
    ["gen", "--domain", "tag", "--bogus", "1", "--out", "x"],
    ["gen", "--domain", "nowhere", "--out", "{tmp}/x.jsonl"],
    ["gen", "--domain", "tag"],
    ["gen", "--episodes", "many", "--out", "{tmp}/x.jsonl"],
    ["compare", "--set", "colour", "red", "--out", "{tmp}/c"],
    ["learn", "--method", "svm", "--traj", "{traj}", "--out", "{tmp}/m.json"],
    ["learn", "--method", "cp", "--alpha", "-1", "--traj", "{traj}", "--out", "{tmp}/m.json"],
    [],
])
def test_config_errors_exit_2(argv, tmp_path, work, capsys):
    argv = [a.format(tmp=tmp_path, traj=work[1]) for a in argv]
    assert run_cli(argv) == 2
    err = capsys.readouterr().err.strip()
    assert err


def test_unknown_config_file_key(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("domain = tag\nshape = round\n")
    assert run_cli(["gen", "--config", str(cfg), "--out", str(tmp_path / "t.jsonl")]) == 2


@pytest.mark.parametrize("argv", [
    ["learn", "--traj", "{tmp}/missing.jsonl", "--out", "{tmp}/m.json"],
    ["inspect", "{tmp}/missing.json"],
    ["gen", "--config", "{tmp}/missing.cfg", "--out", "{tmp}/t.jsonl"],
    ["gen", "--domain", "tag", "--out", "{tmp}/no/such/dir/t.jsonl"],
    ["eval", "--traj", "{tmp}/garbage.jsonl", "--domain", "tag", "--out", "{tmp}/r"],
])
def test_io_errors_exit_3(argv, tmp_path, capsys):
    (tmp_path / "garbage.jsonl").write_text("{not json\n")
    argv = [a.format(tmp=tmp_path) for a in argv]
    assert run_cli(argv) == 3
    err = capsys.readouterr().err
    assert err.count("\n") == 1


def test_learning_failure_exit_4(work, tmp_path):
    _, traj = work
    assert run_cli(["learn", "--method", "td", "--rank", "3,3", "--traj", str(traj),
                    "--out", str(tmp_path / "m.json"), "--max-histories", "20"]) == 4


def test_eval_rejects_mismatched_domain(work, tmp_path):
    d, traj = work
    _, model = learn(d, traj, "mm.json", "--method", "cp", "--rank", "3")
    assert run_cli(["eval", "--model", str(model), "--traj", str(traj), "--domain", "gridworld",
                    "--out", str(tmp_path / "r")]) == 2
