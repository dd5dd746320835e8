import csv
import json
from pathlib import Path

import numpy as np
import pytest

from commontrends import cli, config as cfgmod, grid
from commontrends.errors import ConfigError

LENGTH = 120


def tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    """Two boxes at one depth, written as a grid CSV."""
    d = tmp_path_factory.mktemp("toy")
    cli.run_simulate(d / "toy.csv", "grid-csv", length=LENGTH, depths=(10.0,), n_factors=1,
                     max_boxes=2, seed=3)
    return d / "toy.csv"


@pytest.fixture(scope="module")
def panel6(tmp_path_factory):
    d = tmp_path_factory.mktemp("panel")
    cli.run_simulate(d / "p.csv", "panel-csv", length=LENGTH, depths=(10.0, 150.0), n_factors=2,
                     max_boxes=6, seed=4)
    return d / "p.csv"


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_toy_decompose(toy, tmp_path):
    out = tmp_path / "out"
    assert run("decompose", "--input", toy, "--format", "grid-csv", "--depths", 10,
               "--output", out) == 0
    files = sorted(p.name for p in (out / "10m" / "decomp").iterdir())
    assert files == ["20N_110E.csv", "20N_115E.csv", "params.csv"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["series"] == 2 and manifest["failures"] == []
    rows = list(csv.reader(open(out / "10m" / "decomp" / "20N_110E.csv")))
    assert tuple(rows[0]) == cli.DECOMP_HEADER and len(rows) == LENGTH + 1
    assert rows[1][:2] == ["1958", "1"]
    echoed = json.loads((out / "config.json").read_text())
    assert echoed["depths"] == [10.0] and echoed["rank"]["fixed"] == 4
    assert echoed["change_points"]["min_persist"] == 24


def test_rerun_is_byte_identical_and_reuses(toy, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    args = ("decompose", "--input", toy, "--format", "grid-csv", "--depths", 10)
    assert run(*args, "--output", a) == 0
    assert run(*args, "--output", b) == 0
    ta, tb = tree(a), tree(b)
    # config.json echoes the output directory itself
    ta.pop("config.json"), tb.pop("config.json")
    assert ta == tb
    before = tree(a)
    assert run(*args, "--output", a) == 0
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["reused"] == 2
    after = tree(a)
    assert after.pop("manifest.json") != before.pop("manifest.json")
    assert after == before


def test_changed_settings_invalidate_reuse(toy, tmp_path):
    out = tmp_path / "o"
    args = ("decompose", "--input", toy, "--format", "grid-csv", "--depths", 10, "--output", out)
    assert run(*args) == 0
    assert run(*args, "--trend-order", 2) == 0
    assert json.loads((out / "manifest.json").read_text())["reused"] == 0


def test_worker_count_does_not_change_outputs(panel6, tmp_path):
    a, b = tmp_path / "w1", tmp_path / "w2"
    base = ("common-trends", "--input", panel6, "--format", "panel-csv", "--depths", 10,
            "--rank", 2)
    assert run(*base, "--workers", 1, "--output", a) == 0
    assert run(*base, "--workers", 2, "--output", b) == 0
    ta, tb = tree(a), tree(b)
    ta.pop("config.json"), tb.pop("config.json")
    assert ta == tb


def test_common_trends_and_report(panel6, tmp_path):
    out = tmp_path / "ct"
    args = ("--input", panel6, "--format", "panel-csv", "--depths", 10, 150, "--rank", 2,
            "--output", out)
    assert run("common-trends", *args) == 0
    d = out / "10m"
    states = list(csv.reader(open(d / "trends" / "states.csv")))
    assert states[0] == ["year", "month", "trend1", "trend2"] and len(states) == LENGTH + 1
    model = json.loads((d / "trends" / "model.json").read_text())
    assert model["n"] == 2 and len(model["eigenvalues_real"]) == 2
    assert all(abs(complex(a, b)) < 1 for a, b in zip(model["eigenvalues_real"],
                                                     model["eigenvalues_imag"]))
    for j in (1, 2):
        rows = list(csv.reader(open(d / "maps" / f"trend{j}.csv")))
        assert rows[0] == ["box_id", "south", "west", "loading", "correlation"]
        assert len(rows) == 7
    recon = list(csv.reader(open(d / "recon" / "20N_110E.csv")))
    assert recon[0] == ["year", "month", "trends_1", "trends_1-2"]
    # a rerun of common-trends reuses every decomposition
    assert run("common-trends", *args) == 0
    assert json.loads((out / "manifest.json").read_text())["reused"] == 12

    assert run("report", *args) == 0
    rep = out / "reports"
    strat = list(csv.reader(open(rep / "stratification.csv")))
    assert strat[0][:3] == ["box_id", "year", "month"] and len(strat) == 6 * LENGTH + 1
    for name in ("change_points_univariate.csv", "change_points_common.csv"):
        rows = list(csv.reader(open(rep / name)))
        assert rows[0] == ["series_id", "depth_m", "index", "year", "month", "type",
                           "slope_before", "slope_after"]


def test_single_trend_request(panel6, tmp_path):
    out = tmp_path / "one"
    assert run("common-trends", "--input", panel6, "--format", "panel-csv", "--depths", 10,
               "--rank", 1, "--output", out) == 0
    assert sorted(p.name for p in (out / "10m" / "maps").iterdir()) == ["trend1.csv"]
    recon = list(csv.reader(open(out / "10m" / "recon" / "20N_110E.csv")))
    assert recon[0] == ["year", "month", "trends_1"]


def test_empty_depth_list_is_a_config_error(toy, tmp_path):
    cfg = cfgmod.RunConfig(input=str(toy), depths=())
    with pytest.raises(ConfigError, match="empty"):
        cfg.validate()
    toml = tmp_path / "c.toml"
    toml.write_text(f'input = "{toy}"\ndepths = []\n')
    assert run("decompose", "--config", toml, "--output", tmp_path / "x") == 1


def test_config_file_and_unknown_keys(toy, tmp_path):
    toml = tmp_path / "c.toml"
    toml.write_text(f'input = "{toy}"\ndepths = [10]\n[rank]\nfixed = 2\n'
                    '[change_points]\nmin_persist = 12\n')
    cfg = cfgmod.load(toml)
    assert cfg.rank.fixed == 2 and cfg.change_points.min_persist == 12 and cfg.depths == (10.0,)
    toml.write_text(f'input = "{toy}"\n[rank]\nfixd = 2\n')
    with pytest.raises(ConfigError, match="fixd"):
        cfgmod.load(toml)


def test_missing_depth_in_input(panel6, tmp_path):
    assert run("decompose", "--input", panel6, "--format", "panel-csv", "--depths", 50,
               "--output", tmp_path / "o") == 1


def test_failing_series_gives_exit_code_2(panel6, tmp_path):
    panels = grid.read_panels(panel6)
    p = panels[10.0]
    data = p.data.copy()
    data[:, 2] = np.nan
    bad = type(p)(p.series_ids, data, p.time_origin, depths=p.depths)
    # keep the broken box through the panel reader by writing it explicitly
    grid.export({10.0: bad}, tmp_path / "bad.csv", "panel-csv")
    out = tmp_path / "o"
    code = run("decompose", "--input", tmp_path / "bad.csv", "--format", "panel-csv",
               "--depths", 10, "--output", out)
    assert code == 2
    manifest = json.loads((out / "manifest.json").read_text())
    assert [f["box_id"] for f in manifest["failures"]] == [p.series_ids[2]]
    assert not (out / "10m" / "decomp" / f"{p.series_ids[2]}.csv").exists()
    assert len(list((out / "10m" / "decomp").glob("*N_*.csv"))) == 5


def test_simulate_command(tmp_path):
    assert run("simulate", "--output", tmp_path / "s.jsonl", "--format", "jsonl", "--length", 60,
               "--depths", 10, 50, "--max-boxes", 3, "--factors", 2) == 0
    panels = grid.read_panels(tmp_path / "s.jsonl")
    assert list(panels) == [10.0, 50.0] and panels[10.0].n_series == 3
    truth = np.load(tmp_path / "s.jsonl.truth.npz")
    assert truth["factors_10"].shape == (60, 2)
    # more factors than boxes cannot be planted
    assert run("simulate", "--output", tmp_path / "t.csv", "--length", 60, "--max-boxes", 3) == 1
