import json
import os

import pandas as pd
import pytest
import yaml

from auction_bandit import ContractViolation, cli
from auction_bandit.io import file_sha256, write_table

SMALL = {
    "seed": 3,
    "market": {"generator": {
        "keyword_count": 4,
        "impressions_per_keyword": {"family": "constant", "value": 120},
        "bidders_per_keyword": {"family": "constant", "value": 5},
        "cvr_distribution": {"family": "lognormal", "median": 0.05, "sigma": 0.5, "low": 0.005, "high": 0.4},
        "entrant_participation_ratio": 1.0,
    }},
    "simulation": {"replications": 2},
    "grids": {"prior_means": [0.001, 0.01, 0.1], "tau": [0.0, 0.5, 1.0]},
    "estimate": {"mc_samples": 200},
    "caps": {"tighten": 0.5},
}


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "exp.yaml"
    p.write_text(yaml.safe_dump(SMALL))
    return p


def run(*argv):
    return cli.run([str(a) for a in argv])


@pytest.mark.filterwarnings("ignore::UserWarning")
@pytest.mark.parametrize("command", cli.COMMANDS)
def test_every_command_writes_outputs_and_manifest(command, config, tmp_path):
    out = tmp_path / command
    assert run(command, "--config", config, "--out", out) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["command"] == command and man["seed"] == 3
    assert man["outputs"]
    for name, digest in man["outputs"].items():
        assert file_sha256(out / name) == digest
    assert man["defaults"]["propensity_floor"] == 1e-3
    assert man["allow_exploratory"] is False


@pytest.mark.filterwarnings("ignore::UserWarning")
def test_manifest_replay_and_parallelism_are_byte_identical(config, tmp_path):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert run("sweep", "--config", config, "--out", a) == 0
    assert run("sweep", "--config", a / "manifest.json", "--out", b, "--jobs", 2) == 0
    assert run("sweep", "--config", config, "--out", c, "--jobs", 3) == 0
    for d in (b, c):
        for name in ("sweep.csv", "thickness.csv", "thickness_gap.csv", "manifest.json"):
            assert (d / name).read_bytes() == (a / name).read_bytes()


def test_seed_flag_overrides_config(config, tmp_path):
    assert run("simulate", "--config", config, "--seed", 9, "--out", tmp_path / "o") == 0
    assert json.loads((tmp_path / "o" / "manifest.json").read_text())["seed"] == 9


def test_per_auction_simulation_writes_trajectory_log(config, tmp_path):
    assert run("simulate", "--config", config, "--record-level", "per-auction", "--out", tmp_path / "o") == 0
    log = pd.read_csv(tmp_path / "o" / "trajectory_log.csv")
    assert {"keyword_id", "auction_index", "quality_score", "won", "revenue"} <= set(log.columns)
    out = pd.read_csv(tmp_path / "o" / "outcomes.csv")
    total = out.loc[out.keyword_id == "ALL", "mean_revenue"].item()
    assert log["revenue"].sum() / 2 == pytest.approx(total)


def test_estimate_from_logged_file(config, tmp_path):
    assert run("simulate", "--config", config, "--record-level", "per-auction", "--out", tmp_path / "s") == 0
    spec = dict(SMALL, estimate={"mc_samples": 100, "log": str(tmp_path / "s" / "trajectory_log.csv")})
    p = tmp_path / "e.yaml"
    p.write_text(yaml.safe_dump(spec))
    assert run("estimate", "--config", p, "--out", tmp_path / "e") == 0
    est = pd.read_csv(tmp_path / "e" / "estimates.csv")
    assert len(est) > 0 and est["cvr_hat_ips"].notna().all()


@pytest.mark.parametrize(
    "patch,field",
    [
        ({"seed": -1}, "seed"),
        ({"bogus": 1}, "bogus"),
        ({"simulation": {"replications": 0}}, "simulation.replications"),
        ({"policy": {"kind": "egreedy"}}, "policy.kind"),
        ({"grids": {"prior_means": [0.0]}}, "grids.prior_means"),
        ({"market": {"generator": {"entrant_fraction": 2.0}}}, "market.generator.entrant_fraction"),
        ({"market": {}}, "market"),
    ],
)
def test_invalid_spec_exits_2_naming_field(patch, field, tmp_path, capsys):
    spec = {**SMALL, **patch}
    p = tmp_path / "bad.yaml"
    p.write_text(yaml.safe_dump(spec))
    command = "sweep" if "grids" in patch else "simulate"
    assert run(command, "--config", p, "--out", tmp_path / "o") == 2
    assert field in capsys.readouterr().err


def test_exploratory_policy_needs_flag_and_is_stamped(tmp_path, capsys):
    spec = {**SMALL, "policy": {"kind": "ts", "prior_mean": 0.3}}
    p = tmp_path / "x.yaml"
    p.write_text(yaml.safe_dump(spec))
    assert run("simulate", "--config", p, "--out", tmp_path / "o") == 2
    assert "allow_exploratory" in capsys.readouterr().err
    assert run("simulate", "--config", p, "--allow-exploratory", "--out", tmp_path / "o") == 0
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["allow_exploratory"] is True and man["outside_validity"] is True


def test_unwritable_output_exits_2(config, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert run("simulate", "--config", config, "--out", blocker / "sub") == 2


def test_missing_config_and_log_exit_2(tmp_path):
    assert run("simulate", "--config", tmp_path / "none.yaml", "--out", tmp_path / "o") == 2
    p = tmp_path / "l.yaml"
    p.write_text(yaml.safe_dump({"market": {"log": "missing.csv"}}))
    assert run("simulate", "--config", p, "--out", tmp_path / "o") == 2


def test_contract_violation_exits_1(config, tmp_path, monkeypatch):
    def boom(*a):
        raise ContractViolation("bad belief", "engine", 4)

    monkeypatch.setitem(cli.PIPELINES, "simulate", boom)
    assert run("simulate", "--config", config, "--out", tmp_path / "o") == 1


def test_demo_config_runs(tmp_path):
    assert os.path.exists(cli.demo_config_path())
    assert run("generate", "--config", cli.demo_config_path(), "--out", tmp_path) == 0
    assert (tmp_path / "market.csv").stat().st_size > 0


def test_write_table_is_full_precision(tmp_path):
    write_table([{"x": 0.1 + 0.2, "b": True, "s": "a", "n": None}], tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text() == "x,b,s,n\n0.30000000000000004,1,a,\n"
