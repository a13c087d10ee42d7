"""Analysis configuration: YAML/JSON files merged with command-line values."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .data import Schema
from .engine import JackknifeOptions, ModelOptions, QuadratureOptions
from .single_index import FitOptions


class ConfigError(ValueError):
    pass


@dataclass
class AnalysisConfig:
    data: str | None = None
    schema: dict = field(default_factory=dict)
    treatment: str | None = None
    alphas: list[float] = field(default_factory=lambda: [0.0])
    end_time: float | None = None
    terminal: str = "add"
    max_visits: int | None = None
    knots: list[list[float]] = field(default_factory=list)
    degree: int = 3
    intensity: dict = field(default_factory=dict)
    outcome: dict = field(default_factory=dict)
    quadrature: dict = field(default_factory=dict)
    jackknife: dict = field(default_factory=dict)
    rho_floor: float = 1e-10
    weight_cap_quantile: float | None = None
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if not self.alphas:
            raise ConfigError("the alpha list must not be empty")
        self.alphas = [float(a) for a in self.alphas]
        if any(not math.isfinite(a) for a in self.alphas):
            raise ConfigError("alpha values must be finite")
        if self.knots and not isinstance(self.knots[0], (list, tuple)):
            self.knots = [self.knots]
        self.knots = [[float(k) for k in seq] for seq in self.knots]
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        for name in ("intensity", "outcome", "quadrature", "jackknife"):
            if not isinstance(getattr(self, name), dict):
                raise ConfigError(f"{name!r} must be a mapping")

    @classmethod
    def from_dict(cls, d: dict) -> "AnalysisConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def schema_obj(self) -> Schema:
        return Schema.from_mapping(self.schema)

    def model_options(self) -> ModelOptions:
        if not self.knots:
            raise ConfigError("knots are required")
        fit_keys = {"kernel", "abs_tol", "x_tol", "max_iter", "bw_method", "bw_range", "h0", "norm1_tol",
                    "norm1_max_iter"}
        out = dict(self.outcome)
        formula = out.pop("formula", None)
        fitter = out.pop("fitter", "fixed-coef")
        bad = sorted(set(out) - fit_keys)
        if bad:
            raise ConfigError(f"unknown outcome options: {', '.join(bad)}")
        if "bw_range" in out:
            out["bw_range"] = tuple(out["bw_range"])
        inten = dict(self.intensity)
        bad = sorted(set(inten) - {"formula", "kernel", "bandwidth"})
        if bad:
            raise ConfigError(f"unknown intensity options: {', '.join(bad)}")
        try:
            return ModelOptions(
                intensity_formula=inten.get("formula"),
                intensity_kernel=inten.get("kernel", "epanechnikov"),
                bandwidth=inten.get("bandwidth"),
                outcome_formula=formula,
                fitter=fitter,
                outcome=FitOptions(**out),
                knots=[tuple(k) for k in self.knots],
                degree=self.degree,
                quadrature=QuadratureOptions(**self.quadrature),
                rho_floor=self.rho_floor,
                weight_cap_quantile=self.weight_cap_quantile,
                jackknife=JackknifeOptions(**self.jackknife),
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def read_mapping(path: str | Path) -> dict:
    """Parse a YAML or JSON file into a dict (JSON is valid YAML, but the
    suffix picks the stricter parser when it says JSON)."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    loaded = json.loads(text) if path.suffix.lower() == ".json" else yaml.safe_load(text)
    if loaded is None:
        return {}
    if not isinstance(loaded, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return loaded


def merge(base: dict, overrides: dict) -> dict:
    """Nested merge; ``None`` values in ``overrides`` leave ``base`` alone."""
    out = dict(base)
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = value
    return out
