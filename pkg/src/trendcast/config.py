"""Run configuration: defaults, flat ``key = value`` files, command-line overrides."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields, replace
from pathlib import Path

from . import backtest as bt
from . import lstm
from .dataset import DatasetConfig
from .errors import ConfigError


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.replace(" ", "").split(",") if x)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.replace(" ", "").split(",") if x)


def _strs(text: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in text.split(",") if x.strip())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class RunConfig:
    data_dir: str | None = None
    output_dir: str = "out"
    tickers: tuple[str, ...] = ()
    lookbacks: tuple[int, ...] = (50, 100, 300)
    trend_lookback: int = 100
    window: int = 100
    rsi_window: int = 14
    macd_spans: tuple[int, ...] = (12, 26, 9)
    cost_bps: float = 2.0
    target: str = "signal_diff"
    position_mode: str = "anticipated_trend"
    models: tuple[str, ...] = bt.MODELS
    loss: str = "mse"
    epochs: int = 100
    batch: int = 64
    units: int = 64
    dropout: float = 0.2
    gamma: float = 2.0
    learning_rate: float = 1e-3
    patience: int = 10
    early_stopping: bool = True
    gbt_trees: int = 200
    grid_epochs: tuple[int, ...] = (50, 100, 150)
    grid_batch: tuple[int, ...] = (32, 64, 128)
    grid_lookback: tuple[int, ...] = (50, 100, 150)
    grid_units: tuple[int, ...] = (32, 64, 128)
    grid_dropout: tuple[float, ...] = (0.1, 0.2, 0.3)
    grid_gamma: tuple[float, ...] = (1.0, 2.0, 3.0)
    grid_budget: int | None = None
    seed: int | None = None
    workers: int = 1

    PARSERS = {
        "tickers": _strs, "models": _strs, "lookbacks": _ints, "macd_spans": _ints,
        "grid_epochs": _ints, "grid_batch": _ints, "grid_lookback": _ints, "grid_units": _ints,
        "grid_dropout": _floats, "grid_gamma": _floats, "early_stopping": _bool,
    }

    def validate(self, need_seed: bool = False) -> None:
        if need_seed and self.seed is None:
            raise ConfigError("a seed is required for training commands (--seed or 'seed = ...')")
        if self.data_dir is not None and not Path(self.data_dir).is_dir():
            raise ConfigError(f"data_dir {self.data_dir} does not exist")
        bad = set(self.models) - set(bt.MODELS) - {"baseline"}
        if bad:
            raise ConfigError(f"unknown models: {sorted(bad)}")
        if self.position_mode not in bt.POSITION_MODES:
            raise ConfigError(f"unknown position_mode {self.position_mode!r}")
        if self.target not in ("signal_diff", "return"):
            raise ConfigError(f"unknown target {self.target!r}")
        if self.loss not in ("mse", "sharpe"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if len(self.macd_spans) != 3:
            raise ConfigError("macd_spans needs fast,slow,signal")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def dataset(self) -> DatasetConfig:
        return DatasetConfig(lookbacks=tuple(self.lookbacks), rsi_window=self.rsi_window,
                             macd_spans=tuple(self.macd_spans), trend_lookback=self.trend_lookback,
                             window=self.window, target=self.target)

    def train_config(self) -> lstm.TrainConfig:
        return lstm.TrainConfig(loss=self.loss, gamma=self.gamma, learning_rate=self.learning_rate,
                                batch_size=self.batch, max_epochs=self.epochs, patience=self.patience,
                                hidden_size=self.units, dropout=self.dropout, seed=self.seed or 0,
                                early_stopping=self.early_stopping)

    def experiment(self) -> bt.ExperimentConfig:
        cfg = bt.ExperimentConfig(dataset=self.dataset(), train=self.train_config(), cost_bps=self.cost_bps,
                                  position_mode=self.position_mode, seed=self.seed or 0)
        return replace(cfg, gbt=replace(cfg.gbt, n_trees=self.gbt_trees))

    def grid(self) -> bt.GridSpec:
        return bt.GridSpec(self.grid_epochs, self.grid_batch, self.grid_lookback, self.grid_units,
                           self.grid_dropout, self.grid_gamma)

    def as_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v) for f in fields(self)}


KEYS = {f.name for f in fields(RunConfig)}


def parse_value(key: str, text: str):
    text = text.strip()
    if key in RunConfig.PARSERS:
        return RunConfig.PARSERS[key](text)
    optional = text.lower() in ("", "none")
    if key == "data_dir":
        return None if optional else text
    if key in ("grid_budget", "seed"):
        return None if optional else int(text)
    default = getattr(RunConfig(), key)
    if isinstance(default, bool):
        return _bool(text)
    return type(default)(text)


def load_config(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    """Read a flat ``key = value`` file; ``#`` starts a comment, unknown keys are an error."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} not found")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    try:
        parser.read_string("[run]\n" + p.read_text())
    except configparser.Error as exc:
        raise ConfigError(f"{p}: {exc}") from exc
    cfg = base or RunConfig()
    updates = {}
    for key, text in parser["run"].items():
        if key not in KEYS:
            raise ConfigError(f"{p}: unknown key {key!r}")
        try:
            updates[key] = parse_value(key, text)
        except ValueError as exc:
            raise ConfigError(f"{p}: bad value for {key}: {exc}") from exc
    return replace(cfg, **updates)
