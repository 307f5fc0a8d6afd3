"""Flat key=value run configuration."""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .distgeo import InnerLoopConfig
from .evaluation import MetricConfig, MmdConfig
from .model import ModelConfig
from .training import MODES, TrainConfig


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text: str):
    return None if str(text).strip().lower() in ("", "none") else float(text)


def _bandwidth(text: str):
    return "median" if str(text).strip() == "median" else float(text)


def _mode(text: str) -> str:
    if text not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    return text


# key -> (parser, default, help)
SCHEMA: dict[str, tuple] = {
    "dataset": (str, "", "expanded training/reference dataset (JSON lines)"),
    "output_dir": (str, "run", "directory for checkpoints, logs and reports"),
    "seed": (int, 0, "64-bit master seed"),
    "workers": (int, 1, "worker processes for per-molecule work"),
    # model
    "hidden": (int, 256, "hidden width of every MPNN and the flow network"),
    "layers": (int, 3, "message-passing layers"),
    "z_dim": (int, 10, "latent dimension"),
    "cnf_steps": (int, 20, "RK4 steps of the flow"),
    "init_gain": (float, 1.0, "weight init gain"),
    # training
    "learning_rate": (float, 0.001, "Adam learning rate"),
    "batch_size": (int, 128, "samples per step"),
    "epochs": (int, 1, "training epochs"),
    "lam": (float, 1.0, "weight of the KL term"),
    "alpha": (float, 1.0, "weight of the flow likelihood term"),
    "mode": (_mode, "full", "full or ablation_no_recon"),
    "recon_heavy_only": (_bool, False, "reconstruction loss over heavy atoms only"),
    "checkpoint_every": (int, 1, "checkpoint period in epochs (0 = only final)"),
    # inner solver used in training
    "inner_steps": (int, 100, "unrolled GD steps in training"),
    "inner_lr": (float, 0.01, "GD step size in training"),
    "inner_init_scale": (float, 1.0, "std of the random solver start"),
    "inner_restarts": (int, 1, "solver restarts per training sample"),
    # solver used for sampling / solve
    "solve_steps": (int, 5000, "GD steps when sampling or solving"),
    "solve_lr": (float, 0.08, "GD step size when sampling or solving"),
    "solve_restarts": (int, 10, "restarts when sampling or solving"),
    "solve_tol": (_opt_float, 1e-10, "early-stop threshold on H (none disables)"),
    # metrics
    "delta": (float, 0.5, "COV threshold in Angstrom"),
    "heavy_only": (_bool, True, "metrics over heavy atoms only"),
    "generated_multiplier": (int, 2, "generated conformers per reference conformer"),
    "mmd_bandwidth": (_bandwidth, "median", "median or a fixed kernel width"),
    "mmd_strict": (_bool, False, "only C-O pairs instead of all C/O pairs"),
}

PATH_KEYS = ("dataset",)


def default_config_path() -> Path:
    return Path(str(resources.files("confgen") / "default.cfg"))


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (x.strip() for x in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        raw[key] = value
    return raw


def _config_errors(fn):
    # invalid values surface as ConfigError so the CLI reports an input error
    @functools.wraps(fn)
    def wrapper(self):
        try:
            return fn(self)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return wrapper


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {k: v[1] for k, v in SCHEMA.items()})

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: dict | None = None) -> "RunConfig":
        cfg = cls()
        if path is not None:
            p = Path(path)
            if not p.is_file():
                raise ConfigError(f"config file not found: {p}")
            cfg.update(parse_text(p.read_text(), str(p)))
        if overrides:
            cfg.update({k: v for k, v in overrides.items() if v is not None})
        return cfg

    def update(self, raw: dict):
        for key, value in raw.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown key {key!r}")
            parser = SCHEMA[key][0]
            try:
                self.values[key] = parser(value) if isinstance(value, str) else value
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None

    def __getattr__(self, key):
        try:
            return self.__dict__["values"][key]
        except KeyError:
            raise AttributeError(key) from None

    def validate_paths(self, *keys: str):
        for key in keys:
            value = self.values[key]
            if not value or not Path(value).is_file():
                raise ConfigError(f"{key}: file not found: {value!r}")

    @_config_errors
    def model(self) -> ModelConfig:
        v = self.values
        return ModelConfig(v["hidden"], v["layers"], v["z_dim"], v["cnf_steps"], v["init_gain"])

    @_config_errors
    def train_inner(self) -> InnerLoopConfig:
        v = self.values
        return InnerLoopConfig(steps=v["inner_steps"], learning_rate=v["inner_lr"],
                               init_scale=v["inner_init_scale"], restarts=v["inner_restarts"])

    @_config_errors
    def solve_inner(self) -> InnerLoopConfig:
        v = self.values
        return InnerLoopConfig(steps=v["solve_steps"], learning_rate=v["solve_lr"],
                               init_scale=v["inner_init_scale"], restarts=v["solve_restarts"],
                               tol=v["solve_tol"])

    @_config_errors
    def train(self) -> TrainConfig:
        v = self.values
        return TrainConfig(learning_rate=v["learning_rate"], batch_size=v["batch_size"],
                           epochs=v["epochs"], lam=v["lam"], alpha=v["alpha"],
                           inner=self.train_inner(), seed=v["seed"], mode=v["mode"],
                           recon_heavy_only=v["recon_heavy_only"],
                           checkpoint_every=v["checkpoint_every"])

    @_config_errors
    def metric(self) -> MetricConfig:
        v = self.values
        return MetricConfig(v["delta"], v["heavy_only"], v["generated_multiplier"])

    @_config_errors
    def mmd(self) -> MmdConfig:
        return MmdConfig(bandwidth=self.values["mmd_bandwidth"])

    def dump(self) -> str:
        return "".join(f"{k} = {'none' if v is None else v}\n" for k, v in self.values.items())
