"""Experiment configuration: a dataclass loadable from TOML or JSON."""

from __future__ import annotations

import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..domain import Annulus, Ball, Domain
from ..environ import EnvSpec
from ..schedule import ScaleParams, build_schedule, locate_scale

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

EXPERIMENTS = ("schedule", "env-check", "alpha", "annulus-check", "tails", "barrier", "couple", "rate", "audit")


@dataclass
class ExperimentConfig:
    experiment: str = "rate"
    seed: int = 0
    paths: int = 2000
    out: str = "results"
    threads: int = 1
    env: dict = field(default_factory=dict)  # EnvSpec fields
    domain: dict = field(default_factory=lambda: {"kind": "ball", "radius": 1.0})
    schedule: dict = field(default_factory=dict)  # ScaleParams fields
    n_max: int = 3
    epsilons: list = field(default_factory=lambda: [1 / 25, 1 / 50, 1 / 100])
    dt_rel: float = 1e-3
    dt_max: float | None = None
    f: object = "zero"
    g: object = "minus_one"
    points: list | None = None
    options: dict = field(default_factory=dict)  # experiment-specific knobs

    def validate(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.paths < 1:
            raise ValueError("paths must be positive")
        eps = [float(e) for e in self.epsilons]
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise ValueError("epsilons must be strictly decreasing")
        table = self.table()
        for e in eps:
            locate_scale(table, e)

    def env_spec(self) -> EnvSpec:
        spec = dict(self.env)
        spec.setdefault("seed", int(self.seed))
        return EnvSpec(**spec)

    def scale_params(self) -> ScaleParams:
        return ScaleParams(**self.schedule)

    def table(self):
        return build_schedule(self.scale_params(), self.n_max)

    def make_domain(self) -> Domain:
        return make_domain(self.domain, self.env_spec().d)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        return cls(**data)


def make_domain(spec: dict, d: int = 3) -> Domain:
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind == "ball":
        return Ball(float(spec.get("radius", 1.0)), d, spec.get("center"))
    if kind == "annulus":
        return Annulus(float(spec["r1"]), float(spec["r2"]), d, spec.get("center"))
    raise ValueError(f"unknown domain kind {kind!r}")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    text = path.read_bytes()
    if path.suffix == ".json":
        data = json.loads(text)
        # a manifest stores the config under "config"
        data = data.get("config", data)
    else:
        data = tomllib.loads(text.decode())
    return ExperimentConfig.from_dict(data)
