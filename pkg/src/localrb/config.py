"""Run configuration: flat, namespaced ``key = value`` files plus overrides.

Example::

    # Test 1
    problem.name = f1
    greedy.N = 20
    greedy.tol = 1e-4
    train.mode = fixed
    train.lattice = 75
    metric.mode = anisotropic
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .backends import AnalyticL2, GalerkinCD
from .backends.grid import SpatialGrid
from .greedy import OfflineConfig
from .metric import ParameterDomain

__all__ = ["ConfigError", "RunConfig", "parse_text", "load_config", "DEFAULTS", "PROBLEMS"]

PROBLEMS = ("f1", "f2", "f3", "f3xi", "cd")


class ConfigError(ValueError):
    pass


def _floats(text: str) -> tuple:
    return tuple(float(t) for t in text.replace(";", ",").split(",") if t.strip())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_floats(text: str):
    return None if text.strip().lower() in ("", "none", "auto") else _floats(text)


#: key -> (parser, default)
DEFAULTS = {
    "problem.name": (str, "f1"),
    "problem.lower": (_opt_floats, None),
    "problem.upper": (_opt_floats, None),
    "problem.xi": (_opt_floats, None),
    "problem.grid": (int, 75),
    "problem.h": (float, 0.0125),
    "problem.degree": (int, 1),
    "problem.inner": (str, "h1"),
    "problem.error_norm": (str, "auto"),
    "greedy.N": (int, 20),
    "greedy.tol": (float, 1e-4),
    "greedy.seed": (int, 0),
    "greedy.random_start": (_bool, False),
    "greedy.max_samples": (int, 5000),
    "greedy.stall_iterations": (int, 3),
    "greedy.chunk": (int, 128),
    "metric.mode": (str, "anisotropic"),
    "metric.delta": (_opt_floats, None),
    "metric.delta_fraction": (float, 1e-2),
    "metric.interpolation": (str, "auto"),
    "train.mode": (str, "fixed"),
    "train.lattice": (int, 75),
    "train.Q_m": (int, 500),
    "train.Q_M": (int, 5625),
    "train.pool_factor": (int, 50),
    "train.pool_cap": (int, 20000),
    "train.lloyd_sweeps": (int, 3),
    "train.generator": (str, "sampling"),
    "out.dir": (str, "run"),
    "out.bundle": (str, "bundle.lrb"),
    "out.snapshots": (_bool, True),
}


def parse_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


@dataclass
class RunConfig:
    """Validated experiment configuration."""

    values: dict = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, raw: dict) -> "RunConfig":
        vals = {k: d for k, (_, d) in DEFAULTS.items()}
        for key, text in raw.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            parser = DEFAULTS[key][0]
            try:
                vals[key] = parser(text) if isinstance(text, str) else text
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from exc
        cfg = cls(vals)
        cfg.validate()
        return cfg

    def __getitem__(self, key):
        return self.values[key]

    def validate(self):
        v = self.values
        if v["problem.name"] not in PROBLEMS:
            raise ConfigError(f"problem.name must be one of {PROBLEMS}")
        if v["greedy.N"] < 1:
            raise ConfigError("greedy.N must be at least 1")
        if not 0.0 < v["greedy.tol"] < 1.0:
            raise ConfigError("greedy.tol must lie in (0, 1)")
        if v["train.lattice"] < 2:
            raise ConfigError("train.lattice must be at least 2")
        if not 1 <= v["train.Q_m"] <= v["train.Q_M"]:
            raise ConfigError("need 1 <= train.Q_m <= train.Q_M")
        if v["train.mode"] not in ("fixed", "adaptive"):
            raise ConfigError("train.mode must be fixed or adaptive")
        if v["train.generator"] not in ("sampling", "bisection"):
            raise ConfigError("train.generator must be sampling or bisection")
        if v["metric.mode"] not in ("anisotropic", "isotropic"):
            raise ConfigError("metric.mode must be anisotropic or isotropic")
        if not 0 <= v["greedy.seed"] < 2**64:
            raise ConfigError("greedy.seed must be a 64-bit unsigned integer")
        try:
            self.domain()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def domain(self) -> ParameterDomain:
        v = self.values
        if v["problem.name"] == "cd":
            lo, hi = (-2.5, -math.pi / 4), (0.0, math.pi / 4)
        else:
            lo, hi = (-0.5, -0.5), (0.5, 0.5)
        lo = v["problem.lower"] or lo
        hi = v["problem.upper"] or hi
        return ParameterDomain(np.array(lo), np.array(hi))

    def backend(self):
        """Construct the problem backend; invalid settings raise ``ConfigError``."""
        v = self.values
        try:
            if v["problem.name"] == "cd":
                norm = "l2" if v["problem.error_norm"] == "auto" else v["problem.error_norm"]
                return GalerkinCD(h=v["problem.h"], degree=v["problem.degree"], domain=self.domain(),
                                  inner_product=v["problem.inner"], error_norm=norm)
            n = v["problem.grid"]
            norm = "linf" if v["problem.error_norm"] == "auto" else v["problem.error_norm"]
            return AnalyticL2(v["problem.name"], grid=SpatialGrid((-1.0, -1.0), (1.0, 1.0), (n, n)),
                              domain=self.domain(), xi=v["problem.xi"], error_norm=norm)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def offline(self) -> OfflineConfig:
        v = self.values
        try:
            return OfflineConfig(
                N=v["greedy.N"], tol=v["greedy.tol"], train_mode=v["train.mode"], lattice=v["train.lattice"],
                Q_m=v["train.Q_m"], Q_M=v["train.Q_M"], metric_mode=v["metric.mode"],
                delta_fraction=v["metric.delta_fraction"], delta=v["metric.delta"], seed=v["greedy.seed"],
                random_start=v["greedy.random_start"], max_samples=v["greedy.max_samples"],
                stall_iterations=v["greedy.stall_iterations"], chunk=v["greedy.chunk"],
                pool_factor=v["train.pool_factor"], pool_cap=v["train.pool_cap"],
                lloyd_sweeps=v["train.lloyd_sweeps"], generator=v["train.generator"],
                interpolation=v["metric.interpolation"],
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def to_text(self) -> str:
        lines = []
        for key in DEFAULTS:
            val = self.values[key]
            if val is None:
                text = "none"
            elif isinstance(val, tuple):
                text = ",".join(repr(x) for x in val)
            elif isinstance(val, bool):
                text = "true" if val else "false"
            else:
                text = repr(val) if isinstance(val, float) else str(val)
            lines.append(f"{key} = {text}")
        return "\n".join(lines) + "\n"


def load_config(path=None, overrides=()) -> RunConfig:
    """Read ``path`` (optional) and apply ``key=value`` overrides in order."""
    raw = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw.update(parse_text(fh.read()))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, val = (s.strip() for s in item.split("=", 1))
        raw[k] = val
    return RunConfig.from_mapping(raw)
