import csv
import json

import numpy as np
import pytest

from hardneg.cli import DEFAULT_CONFIG, main
from hardneg.synthdata import LabeledInputs, default_spec, make_finite_population, write_population_csv
from hardneg.trainer import init_params, params_to_json


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


def write_config(path, **sections):
    path.write_text(json.dumps(sections))
    return str(path)


@pytest.fixture
def small_cfg(tmp_path):
    return write_config(tmp_path / "cfg.json", train={"epochs": 3, "steps_per_epoch": 3, "eval_size": 40})


def test_train_deterministic(tmp_path, small_cfg):
    for name in ("a", "b"):
        assert main(["train", "--config", small_cfg, "--seed", "7", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a/history.csv").read_bytes() == (tmp_path / "b/history.csv").read_bytes()
    m = manifest(tmp_path / "a")
    assert m["command"] == "train" and m["seed"] == 7 and m["outcome"] == "pass"
    assert set(m) >= {"command", "config", "seed", "outputs", "outcome"}
    assert read_csv(tmp_path / "a/history.csv")[0].keys() == {"epoch", "loss", "accuracy"}


def test_manifest_config_reproduces_run(tmp_path, small_cfg):
    assert main(["train", "--config", small_cfg, "--seed", "3", "--out", str(tmp_path / "a")]) == 0
    recorded = manifest(tmp_path / "a")["config"]
    path = write_config(tmp_path / "replay.json", **recorded)
    assert main(["train", "--config", path, "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a/history.csv").read_bytes() == (tmp_path / "b/history.csv").read_bytes()
    assert (tmp_path / "a/params.json").read_bytes() == (tmp_path / "b/params.json").read_bytes()


def test_train_beta_zero_matches_nce(tmp_path, small_cfg):
    assert main(["train", "--config", small_cfg, "--beta", "0", "--tau-plus", "0", "--out", str(tmp_path / "h")]) == 0
    assert main(["train", "--config", small_cfg, "--set", "train.objective=nce", "--out", str(tmp_path / "n")]) == 0
    for a, b in zip(read_csv(tmp_path / "h/history.csv"), read_csv(tmp_path / "n/history.csv")):
        assert float(a["loss"]) == pytest.approx(float(b["loss"]), rel=1e-12)
        assert a["accuracy"] == b["accuracy"]


def test_train_usage_errors(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 2
    assert main(["train", "--nope"]) == 2
    bad = write_config(tmp_path / "bad.json", loss={"gamma": 1})
    assert main(["train", "--config", bad, "--out", str(tmp_path / "x")]) == 2
    invalid = write_config(tmp_path / "inv.json", loss={"tau_plus": 1.5})
    assert main(["train", "--config", invalid, "--out", str(tmp_path / "y")]) == 2
    assert main(["frobnicate"]) == 2
    err = capsys.readouterr().err
    assert "missing.json" in err


def test_verify_prop1(tmp_path):
    out = tmp_path / "v"
    assert main(["verify", "--suite", "prop1", "--beta-grid", "0,1,10,100", "--seed", "7", "--out", str(out)]) == 0
    rows = read_csv(out / "prop1.csv")
    assert list(rows[0]) == ["beta", "gap"]
    gaps = [float(r["gap"]) for r in rows]
    assert all(b < a for a, b in zip(gaps, gaps[1:]))


@pytest.mark.parametrize("suite", ["equivalence", "decomposition", "pu-mixture", "variance", "sampler"])
def test_verify_suites_pass(tmp_path, suite):
    assert main(["verify", "--suite", suite, "--out", str(tmp_path)]) == 0
    assert manifest(tmp_path)["outcome"] == "pass"


def test_verify_unknown_suite():
    assert main(["verify", "--suite", "nosuch"]) == 2


def test_tammes_command(tmp_path):
    assert main(["tammes", "--classes", "2", "--dim", "3", "--t", "1", "--out", str(tmp_path / "a")]) == 0
    assert json.loads((tmp_path / "a/tammes.json").read_text())["objective"] == pytest.approx(4.0, abs=1e-4)
    assert main(["tammes", "--classes", "4", "--dim", "3", "--t", "1", "--out", str(tmp_path / "b")]) == 0
    assert json.loads((tmp_path / "b/tammes.json").read_text())["objective"] == pytest.approx(8 / 3, abs=1e-3)
    assert main(["tammes", "--classes", "1", "--dim", "3", "--out", str(tmp_path / "c")]) == 2


def test_bound_degenerate_optimum(tmp_path):
    cfg = [{"num_classes": 3, "dim": 2, "t": 1.0, "per_class": 4, "noise": 0.0, "seed": 1}]
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    assert main(["bound", "--config-file", str(path), "--out", str(tmp_path)]) == 0
    (rep,) = json.loads((tmp_path / "bound.json").read_text())
    assert rep["epsilon"] == 0.0 and rep["bound"] == 0.0 and rep["empirical_risk"] == 0.0 and rep["holds"]


def test_bound_random_configs(tmp_path):
    assert main(["bound", "--configs", "20", "--seed", "3", "--out", str(tmp_path)]) == 0
    reports = json.loads((tmp_path / "bound.json").read_text())
    valid = [r for r in reports if r["valid"]]
    assert len(valid) == 20 and all(r["holds"] for r in valid)


def test_bound_skips_non_uniform_prior(tmp_path, capsys):
    cfg = [{"num_classes": 2, "dim": 2, "t": 1.0, "per_class": 3, "noise": 0.0, "seed": 1, "rho": [0.3, 0.7]},
           {"num_classes": 2, "dim": 2, "t": 1.0, "per_class": 3, "noise": 0.0, "seed": 1}]
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    assert main(["bound", "--config-file", str(path), "--out", str(tmp_path)]) == 0
    assert "skipped" in capsys.readouterr().err
    assert len(json.loads((tmp_path / "bound.json").read_text())) == 1
    assert manifest(tmp_path)["skipped"][0]["index"] == 0


def _params_file(tmp_path, name, params, t=1.0):
    path = tmp_path / name
    path.write_text(json.dumps(params_to_json(params, t)))
    return str(path)


def test_histogram_conservation_and_single_class(tmp_path):
    rng = np.random.default_rng(0)
    data = make_finite_population(default_spec(), 40, rng)
    write_population_csv(data, tmp_path / "pop.csv")
    params = _params_file(tmp_path, "p.json", init_params([16, 8, 4], rng))
    assert main(["histogram", "--params", params, "--data", str(tmp_path / "pop.csv"), "--bins", "10",
                 "--out", str(tmp_path / "h")]) == 0
    rows = read_csv(tmp_path / "h/histogram.csv")
    assert len(rows) == 10 and float(rows[0]["bin_lo"]) == -1.0 and float(rows[-1]["bin_hi"]) == 1.0
    same = sum(int(r["same_count"]) for r in rows)
    diff = sum(int(r["diff_count"]) for r in rows)
    counts = np.bincount(data.labels)
    n_same = int(sum(c * (c - 1) // 2 for c in counts))
    assert same == n_same and same + diff == 40 * 39 // 2

    one = LabeledInputs(data.inputs[:10], np.zeros(10, dtype=int), np.full(10, 0.1))
    write_population_csv(one, tmp_path / "one.csv")
    assert main(["histogram", "--params", params, "--data", str(tmp_path / "one.csv"), "--bins", "5",
                 "--out", str(tmp_path / "o")]) == 0
    assert all(r["diff_count"] == "0" for r in read_csv(tmp_path / "o/histogram.csv"))


def test_histogram_trained_separates_better(tmp_path):
    assert main(["train", "--epochs", "20", "--out", str(tmp_path / "t")]) == 0
    assert main(["sample", "--size", "120", "--seed", "5", "--out", str(tmp_path / "s")]) == 0
    untrained = _params_file(tmp_path, "u.json", init_params([16, 64, 8], np.random.default_rng(0)))
    data = str(tmp_path / "s/population.csv")
    for name, params in (("trained", str(tmp_path / "t/params.json")), ("untrained", untrained)):
        assert main(["histogram", "--params", params, "--data", data, "--bins", "20",
                     "--out", str(tmp_path / name)]) == 0
    trained_overlap = manifest(tmp_path / "trained")["histogram_intersection"]
    untrained_overlap = manifest(tmp_path / "untrained")["histogram_intersection"]
    assert trained_overlap < untrained_overlap


def test_histogram_unreadable_inputs(tmp_path):
    assert main(["histogram", "--params", str(tmp_path / "no.json"), "--data", str(tmp_path / "no.csv"),
                 "--out", str(tmp_path)]) == 2


def test_sweep_single_cell_and_dedup(tmp_path, small_cfg, capsys):
    assert main(["sweep-beta", "--config", small_cfg, "--beta-grid", "1", "--seeds", "1",
                 "--out", str(tmp_path / "a")]) == 0
    rows = read_csv(tmp_path / "a/sweep.csv")
    assert len(rows) == 1 and list(rows[0]) == ["beta", "mode", "seed", "final_accuracy"]
    assert main(["sweep-beta", "--config", small_cfg, "--beta-grid", "0,1,1", "--seeds", "1",
                 "--out", str(tmp_path / "b")]) == 0
    assert "duplicate" in capsys.readouterr().err
    assert [r["beta"] for r in read_csv(tmp_path / "b/sweep.csv")] == ["0.0", "1.0"]
    assert main(["sweep-beta", "--config", small_cfg, "--beta-grid", "2", "--seeds", "1", "--anneal", "3",
                 "--out", str(tmp_path / "c")]) == 0
    assert read_csv(tmp_path / "c/sweep.csv")[0]["mode"] == "standard+anneal"


def test_sweep_true_positives_not_worse(tmp_path):
    args = ["sweep-beta", "--beta-grid", "5", "--seeds", "3", "--epochs", "20"]
    assert main(args + ["--out", str(tmp_path / "s")]) == 0
    assert main(args + ["--true-positives", "--out", str(tmp_path / "t")]) == 0
    std = np.median([float(r["final_accuracy"]) for r in read_csv(tmp_path / "s/sweep.csv")])
    tp = np.median([float(r["final_accuracy"]) for r in read_csv(tmp_path / "t/sweep.csv")])
    assert tp >= std


def test_default_config_is_complete():
    assert set(DEFAULT_CONFIG) == {"loss", "train", "data"}


def test_inputs_not_mutated(tmp_path, small_cfg):
    before = open(small_cfg).read()
    main(["train", "--config", small_cfg, "--out", str(tmp_path / "a")])
    assert open(small_cfg).read() == before
