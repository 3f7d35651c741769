import json
from dataclasses import replace

import jsonschema
import numpy as np
import pytest

from forgetattack import cli, experiment, metrics
from forgetattack.config import ExperimentConfig, dump_config, load_config, parse_config
from forgetattack.errors import ConfigError
from forgetattack.unlearn import read_mask

SMALL = """
data.n = 300
data.d = 4
data.classes = 3
data.spread = 3.0
data.victim_count = 8
train.hidden = (12, 12)
train.epochs = 15
attack.budget = 6
attack.k_neighbors = 5
attack.restarts = 2
attack.ascent_steps = 40
experiment.seed = 3
"""


@pytest.fixture(scope="module")
def small_cfg():
    return parse_config(SMALL)


def test_parse_overrides_and_seed(small_cfg):
    c = small_cfg
    assert c.data.n == 300 and c.train.hidden == (12, 12) and c.attack.budget == 6
    assert set(c.seeds().values()) == {3}
    assert c.theory.seed == 3
    assert parse_config("seed = 2\ntrain.seed = 9").train.seed == 9


def test_dump_parse_round_trip(small_cfg):
    cfg = replace(small_cfg, mask="random", uq=replace(small_cfg.uq, calibrator="ts"))
    back = parse_config(dump_config(cfg))
    assert back == cfg
    assert back.config_hash() == cfg.config_hash()


def test_config_hash_ignores_out_dir(small_cfg):
    assert replace(small_cfg, out_dir="elsewhere").config_hash() == small_cfg.config_hash()
    assert small_cfg.with_seed(4).config_hash() != small_cfg.config_hash()


@pytest.mark.parametrize("text", [
    "data.n 5",
    "nosuch.key = 1",
    "data.nosuch = 1",
    "mystery = 1",
    "experiment.mask = everything",
    "unlearn.method = retrain",
    "uq.estimator = mc_dropout",
])
def test_parse_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_load_config_file(tmp_path, small_cfg):
    (tmp_path / "c.cfg").write_text(SMALL)
    assert load_config(tmp_path / "c.cfg") == small_cfg


def test_zero_budget_leaves_reports_unchanged(small_cfg):
    cfg = replace(small_cfg, attack=replace(small_cfg.attack, budget=0))
    res = experiment.run_pipeline(cfg)
    assert res.pre.to_dict() | {"label_preservation": None} == res.post.to_dict() | {"label_preservation": None}
    assert res.post.label_preservation == 1.0
    assert res.mask.forget_indices().size == 0


@pytest.fixture(scope="module")
def two_runs(small_cfg, tmp_path_factory):
    a, b = tmp_path_factory.mktemp("a"), tmp_path_factory.mktemp("b")
    return experiment.run_experiment(small_cfg, a), a, b, experiment.run_experiment(small_cfg, b)


def test_report_schema_and_artifacts(two_runs):
    res, a, _, _ = two_runs
    rep = json.loads((a / "report.json").read_text())
    jsonschema.validate(rep, experiment.REPORT_SCHEMA)
    for name in ("model0.uulm", "unlearned0.uulm", "mask.txt", "reliability.csv"):
        assert (a / name).exists()
    assert rep["mask_path"] == "mask.txt"
    assert set(rep["timings"]) >= {"prepare", "craft", "unlearn", "total"}


def test_increments_match_hand_recomputation(two_runs):
    rep = json.loads((two_runs[1] / "report.json").read_text())
    for k in ("ece", "ace", "brier"):
        want = (rep["post"][k] - rep["pre"][k]) / rep["pre"][k]
        assert rep["increments"][k] == pytest.approx(want, rel=1e-12)


def test_reruns_identical_except_timings(two_runs):
    _, a, b, _ = two_runs
    ra, rb = (json.loads((d / "report.json").read_text()) for d in (a, b))
    ra.pop("timings"), rb.pop("timings")
    assert ra == rb
    for name in ("mask.txt", "model0.uulm", "unlearned0.uulm", "reliability.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_random_and_ours_both_reported(small_cfg):
    eces = {k: experiment.run_pipeline(replace(small_cfg, mask=k)).post.ece for k in ("ours", "random")}
    assert all(np.isfinite(v) for v in eces.values())


def test_sisa_pipeline(small_cfg):
    cfg = replace(small_cfg, unlearn=replace(small_cfg.unlearn, method="sisa", sisa_shards=3))
    res = experiment.run_pipeline(cfg)
    assert res.est_post is None
    assert res.pre.ece >= 0 and res.post.ece >= 0


def test_adversarial_defense_changes_training(small_cfg):
    cfg = replace(small_cfg, defense="adversarial_training")
    tc = experiment.effective_train_config(cfg)
    assert tc.adv_epsilon == 0.1 and tc.adv_steps == 5
    assert experiment.effective_train_config(small_cfg).adv_epsilon == 0.0


# -- CLI --------------------------------------------------------------------------


def test_cli_usage_errors(capsys):
    assert cli.main([]) == 2
    assert "usage" in capsys.readouterr().err
    assert cli.main(["run", "--bogus"]) == 2
    assert cli.main(["fly"]) == 2


def test_cli_runtime_error(tmp_path, capsys):
    assert cli.main(["unlearn", "--config", str(tmp_path / "missing.cfg")]) == 1
    (tmp_path / "bad.cfg").write_text("data.nosuch = 1\n")
    assert cli.main(["run", "--config", str(tmp_path / "bad.cfg")]) == 1
    assert "unknown key" in capsys.readouterr().err


def test_cli_theory_emits_csv(tmp_path, capsys):
    (tmp_path / "t.cfg").write_text("theory.d = 5\ntheory.kappas = (0.05, 0.1, 0.2)\ntheory.trials = 3\n"
                                    "theory.n_test = 2000\n")
    assert cli.main(["theory", "--config", str(tmp_path / "t.cfg"), "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "kappa_sweep.csv").read_text().splitlines()
    assert lines[0] == "kappa,p,delta_cal,n_in_bin" and len(lines) == 4
    assert "fit_p0.7" in json.loads(capsys.readouterr().out)


def test_cli_stepwise_matches_run(tmp_path, capsys):
    cfgp = tmp_path / "s.cfg"
    cfgp.write_text(SMALL)
    base = ["--config", str(cfgp), "--out", str(tmp_path / "steps")]
    for cmd in ("gen-data", "train", "attack", "unlearn", "eval-uq"):
        assert cli.main([cmd, *base]) == 0, cmd
    capsys.readouterr()
    assert cli.main(["unlearn", *base]) == 0
    steps = json.loads(capsys.readouterr().out)
    assert cli.main(["run", "--config", str(cfgp), "--out", str(tmp_path / "run")]) == 0
    rep = json.loads((tmp_path / "run" / "report.json").read_text())
    # checkpoints store float32 parameters, so the stepwise path agrees up to rounding
    assert steps["post"]["ece"] == pytest.approx(rep["post"]["ece"], abs=1e-6)
    masks = [read_mask(tmp_path / d / "mask.txt").forget_indices() for d in ("steps", "run")]
    np.testing.assert_array_equal(*masks)


def test_cli_seed_override(tmp_path, capsys):
    cfgp = tmp_path / "s.cfg"
    cfgp.write_text(SMALL)
    assert cli.main(["run", "--config", str(cfgp), "--seed", "5", "--mask-kind", "random",
                     "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert set(rep["seeds"].values()) == {5}


def test_report_helper_roundtrip():
    r = metrics.Report(0.1, 0.1, 0.2, 0.9)
    assert metrics.increment_ratios(r, r)["ece"] == 0.0
