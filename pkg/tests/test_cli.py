import csv
import json

import pytest

from trendcast import cli
from trendcast.config import RunConfig, load_config, parse_value
from trendcast.errors import ConfigError

from conftest import synthetic_series, write_csv

CONFIG = """# small run
lookbacks = 20, 50   # two lookbacks
trend_lookback = 20
window = 20
epochs = 2
units = 4
gbt_trees = 10
seed = 7
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    raw = root / "raw"
    raw.mkdir()
    for i, t in enumerate(["AAA", "BBB", "CCC"]):
        write_csv(raw / f"{t}.csv", synthetic_series(t, n=500, seed=i))
    (raw / "BAD.csv").write_text("date,open\n2020-01-01,1\n")
    cfg = root / "run.cfg"
    cfg.write_text(CONFIG)
    out = root / "out"
    assert cli.main(["--config", str(cfg), "--out", str(out), "ingest", "--data-dir", str(raw)]) == 0
    return root, cfg, out


def run(ws, *args):
    root, cfg, out = ws
    return cli.main(["--config", str(cfg), "--out", str(out), *args])


def read(path):
    with open(path) as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def test_ingest_outputs(workspace):
    _, _, out = workspace
    assert sorted(p.name for p in (out / "clean").iterdir()) == ["AAA.csv", "BBB.csv", "CCC.csv"]
    skipped = read(out / "skipped_files.csv")
    assert [r["file"] for r in skipped] == ["BAD.csv"] and "missing column" in skipped[0]["reason"]
    assert len(read(out / "stationarity.csv")) == 3
    assert (out / "cleaning_log.csv").exists()


def test_ingest_empty_dir(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert cli.main(["--out", str(tmp_path / "o"), "ingest", "--data-dir", str(tmp_path / "empty")]) == 2
    assert "no input files" in capsys.readouterr().err


def test_stats_and_features(workspace):
    _, _, out = workspace
    assert run(workspace, "stats") == 0
    assert len(read(out / "table1.csv")) == 3
    assert run(workspace, "features") == 0
    assert (out / "features" / "AAA.csv").read_text().startswith("date,sma_20,sma_50")


def test_backtest_with_subperiods(workspace):
    _, _, out = workspace
    assert run(workspace, "--set", "models=ols", "backtest") == 0
    rows = read(out / "backtest" / "metrics.csv")
    assert {r["ticker"] for r in rows} == {"AAA", "BBB", "CCC"}
    pnl = read(out / "backtest" / "AAA_ols_pnl.csv")
    mid = pnl[len(pnl) // 2]["date"]
    nxt = pnl[len(pnl) // 2 + 1]["date"]
    spans = f"{pnl[0]['date']}:{mid},{nxt}:{pnl[-1]['date']}"
    assert run(workspace, "--set", "models=ols", "--set", "tickers=AAA", "backtest", "--subperiods", spans) == 0
    assert len(read(out / "backtest" / "subperiods.csv")) == 2


def test_seed_required(tmp_path, workspace):
    root, _, out = workspace
    nocfg = tmp_path / "noseed.cfg"
    nocfg.write_text(CONFIG.replace("seed = 7\n", ""))
    code = cli.main(["--config", str(nocfg), "--out", str(tmp_path / "o"), "compare", "--store", str(out / "clean")])
    assert code == 2


def test_compare_deterministic_and_totals(workspace):
    _, _, out = workspace
    assert run(workspace, "compare") == 0
    names = ["table4.csv", "table5.csv", "metrics.csv", "cross_section.csv", "manifest.json"]
    first = {n: (out / n).read_bytes() for n in names}
    assert run(workspace, "compare") == 0
    assert {n: (out / n).read_bytes() for n in names} == first

    t4 = read(out / "table4.csv")
    body, total = t4[:-1], t4[-1]
    assert total["ticker"] == "TOTAL" and len(body) == 3
    for m in ("lstm", "ols", "lasso", "ridge", "gbt"):
        assert float(total[m]) == pytest.approx(sum(float(r[m]) for r in body), abs=1e-12)
    t5 = read(out / "table5.csv")
    for r in t5[:-1]:
        gain = next(x for x in body if x["ticker"] == r["ticker"])["lstm"]
        assert float(r["lstm_pnl"]) - float(r["baseline_pnl"]) == pytest.approx(float(gain), abs=1e-12)
    assert (out / "table4.csv").read_text().startswith("# ")
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["data_checksums"]) == {"AAA.csv", "BBB.csv", "CCC.csv"}
    assert (out / "plots" / "AAA_fig1_predicted.csv").exists()
    assert (out / "plots" / "AAA_fig2_lstm_cum.csv").exists()


def test_report_after_compare(workspace):
    _, _, out = workspace
    assert run(workspace, "compare") == 0
    assert run(workspace, "report") == 0
    text = (out / "summary.txt").read_text()
    assert "tickers: 3" in text and "data checksums: match" in text


def test_train_and_grid(workspace):
    _, _, out = workspace
    assert run(workspace, "--set", "tickers=AAA", "--set", "models=lstm,ridge", "train") == 0
    assert (out / "models" / "AAA_lstm.ckpt").exists() and (out / "models" / "AAA_ridge.json").exists()
    grid = ["--set", "grid_epochs=1", "--set", "grid_batch=32", "--set", "grid_lookback=20",
            "--set", "grid_units=2,3", "--set", "grid_dropout=0.0", "--set", "grid_gamma=2.0"]
    assert run(workspace, "--set", "tickers=AAA", *grid, "grid") == 0
    assert len(read(out / "grid" / "AAA_leaderboard.csv")) == 2


def test_robustness(workspace):
    _, _, out = workspace
    assert run(workspace, "--set", "tickers=AAA", "--set", "models=ols", "robustness", "--kind", "rsi") == 0
    assert len(read(out / "robustness" / "AAA_rsi.csv")) == 3


def test_theorem_guards(tmp_path, capsys):
    assert cli.main(["--out", str(tmp_path), "theorem", "--n", "500"]) == 2
    assert "--n" in capsys.readouterr().err
    assert cli.main(["--out", str(tmp_path), "theorem", "--rho", "1.5"]) == 2


@pytest.mark.slow
def test_theorem_rho_zero_exits_zero(tmp_path):
    assert cli.main(["--out", str(tmp_path), "--seed", "0", "theorem", "--rho", "0"]) == 0


def test_flags_after_subcommand(tmp_path):
    assert cli.main(["theorem", "--n", "10", "--out", str(tmp_path)]) == 2


# ---------------------------------------------------------------- config

def test_load_config(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text(CONFIG + "early_stopping = off\nmodels = ols, gbt\n")
    cfg = load_config(p)
    assert cfg.lookbacks == (20, 50) and cfg.seed == 7 and cfg.early_stopping is False
    assert cfg.models == ("ols", "gbt")
    assert cfg.train_config().max_epochs == 2 and cfg.experiment().gbt.n_trees == 10


def test_config_errors(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("nosuch = 1\n")
    with pytest.raises(ConfigError, match="unknown key"):
        load_config(p)
    p.write_text("epochs = many\n")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")
    with pytest.raises(ConfigError):
        RunConfig(models=("svm",)).validate()
    with pytest.raises(ConfigError):
        RunConfig().validate(need_seed=True)


def test_parse_value():
    assert parse_value("seed", "none") is None
    assert parse_value("grid_dropout", "0.1, 0.2") == (0.1, 0.2)
    assert parse_value("cost_bps", "5") == 5.0
