"""Experiment configuration: a TOML file with fixed sections, strictly validated.

Unknown sections or keys are rejected by name.  Every section is optional and
falls back to the defaults below.  See ``README.md`` for the schema.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import sys
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .potentials import PotentialFamily


class ConfigError(ValueError):
    """Field-level validation failure."""


# section -> key -> (default, accepted types)
_NUM = (int, float)
SCHEMA: dict[str, dict[str, tuple[Any, tuple]]] = {
    "model": {
        "family": ("gaussian", (str,)),
        "params": ({}, (dict,)),
        "c_V": (None, _NUM),
    },
    "lattice": {
        "N": (8, (int,)),
    },
    "pinning": {
        "enabled": (True, (bool,)),
        "J": (0.0, _NUM),
        "J_list": ([0.0], (list,)),
    },
    "mcmc": {
        "sweeps": (10_000, (int,)),
        "burn_in": (1_000, (int,)),
        "thin": (1, (int,)),
        "seed": (0, (int,)),
        "replicas": (1, (int,)),
    },
    "renorm": {
        "l": (2, (int,)),
        "epsilon": (0.5, _NUM),
        "r_list": ([2, 4, 6, 8], (list,)),
    },
    "hswalk": {
        "dt": (0.01, _NUM),
        "horizon": (1e4, _NUM),
        "replicas": (10_000, (int,)),
        "start": ([0, 0], (list,)),
        "targets": ([[0, 0], [1, 0], [1, 1]], (list,)),
        "dry": ([], (list,)),
        "prerun_sweeps": (2_000, (int,)),
        "noise_blocks": (1, (int,)),
        "fields": (100, (int,)),
        "hit_distances": ([1, 2, 3], (list,)),
        "hit_replicas": (2_000, (int,)),
        "dump_count": (10, (int,)),
    },
    "estimators": {
        "d_max": (8, (int,)),
        "fit_min": (2, _NUM),
        "fit_max": (8, _NUM),
        "margin": (None, (int,)),
        "method": ("product", (str,)),
        "directions": ("axis+diagonal", (str,)),
        "norm": ("linf", (str,)),
        "N_list": ([4, 8, 16, 32], (list,)),
    },
    "enumerate": {
        "shape": ("box", (str,)),
        "width": (4, (int,)),
        "height": (3, (int,)),
        "cap": (16, (int,)),
    },
    "tuples": {
        "instances": (1000, (int,)),
        "radius": (6, (int,)),
    },
    "outputs": {
        "directory": ("out", (str,)),
        "formats": (["csv", "json"], (list,)),
    },
}

FAMILIES = ("gaussian", "cosine", "logcosh")
DEFAULT_PARAMS = {"gaussian": {"kappa": 1.0}, "cosine": {"beta": 0.5}, "logcosh": {"lam": 0.5}}
FORMATS = ("csv", "json")


def defaults() -> dict:
    return {s: {k: copy.deepcopy(v[0]) for k, v in keys.items()} for s, keys in SCHEMA.items()}


def _check_type(name: str, value, types: tuple) -> None:
    ok = isinstance(value, types) and not (isinstance(value, bool) and bool not in types)
    if not ok:
        want = "/".join(t.__name__ for t in types)
        raise ConfigError(f"{name}: expected {want}, got {type(value).__name__}")


def _site(name: str, v) -> tuple[int, int]:
    if not (isinstance(v, list) and len(v) == 2 and all(isinstance(c, int) and not isinstance(c, bool) for c in v)):
        raise ConfigError(f"{name}: expected a pair of integers, got {v!r}")
    return (v[0], v[1])


class ExperimentConfig:
    """Resolved configuration.  ``data`` holds plain nested dicts (JSON-serializable)."""

    def __init__(self, data: dict):
        self.data = data
        self.validate()

    # -- construction ------------------------------------------------------
    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        data = defaults()
        for section, body in raw.items():
            if section not in SCHEMA:
                raise ConfigError(f"unknown section '{section}'")
            if not isinstance(body, dict):
                raise ConfigError(f"section '{section}' must be a table")
            for key, value in body.items():
                if key not in SCHEMA[section]:
                    raise ConfigError(f"unknown key '{section}.{key}'")
                default, types = SCHEMA[section][key]
                if value is not None:
                    _check_type(f"{section}.{key}", value, types)
                data[section][key] = copy.deepcopy(value)
        return cls(data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config is not valid TOML: {exc}") from exc
        return cls.from_dict(raw)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        data = copy.deepcopy(self.data)
        data["mcmc"]["seed"] = seed
        return ExperimentConfig(data)

    # -- validation --------------------------------------------------------
    def validate(self) -> None:
        d = self.data
        m = d["model"]
        if m["family"] not in FAMILIES:
            raise ConfigError(f"model.family: must be one of {', '.join(FAMILIES)}")
        try:
            fam = self.family()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"model: {exc}") from exc
        from .potentials import certify_bounds

        rep = certify_bounds(fam)
        if not rep.passed:
            raise ConfigError(f"model: curvature bounds not certified ({rep})")
        if d["lattice"]["N"] < 1:
            raise ConfigError("lattice.N: must be at least 1")
        J = d["pinning"]["J"]
        if not (isinstance(J, (int, float)) and (math.isfinite(J) or J == -math.inf)):
            raise ConfigError("pinning.J: must be finite")
        for j in d["pinning"]["J_list"]:
            _check_type("pinning.J_list[]", j, _NUM)
        mc = d["mcmc"]
        if mc["sweeps"] < 1:
            raise ConfigError("mcmc.sweeps: must be positive")
        if not 0 <= mc["burn_in"] < mc["sweeps"]:
            raise ConfigError("mcmc.burn_in: must satisfy 0 <= burn_in < sweeps")
        if mc["thin"] < 1:
            raise ConfigError("mcmc.thin: must be positive")
        if not 0 <= mc["seed"] < 2**64:
            raise ConfigError("mcmc.seed: must be an unsigned 64-bit integer")
        if mc["replicas"] < 1:
            raise ConfigError("mcmc.replicas: must be positive")
        rn = d["renorm"]
        if rn["l"] < 1:
            raise ConfigError("renorm.l: must be at least 1")
        if not 0 < rn["epsilon"] < 1:
            raise ConfigError("renorm.epsilon: must lie in (0, 1)")
        for r in rn["r_list"]:
            _check_type("renorm.r_list[]", r, (int,))
            if r < 1:
                raise ConfigError("renorm.r_list: radii must be at least 1")
        hw = d["hswalk"]
        if hw["dt"] <= 0:
            raise ConfigError("hswalk.dt: must be positive")
        if hw["horizon"] <= 0:
            raise ConfigError("hswalk.horizon: must be positive")
        for key in ("replicas", "noise_blocks", "fields", "hit_replicas"):
            if hw[key] < 1:
                raise ConfigError(f"hswalk.{key}: must be positive")
        if hw["prerun_sweeps"] < 0 or hw["dump_count"] < 0:
            raise ConfigError("hswalk: prerun_sweeps and dump_count must be nonnegative")
        _site("hswalk.start", hw["start"])
        for t in hw["targets"]:
            _site("hswalk.targets[]", t)
        for a in hw["dry"]:
            _site("hswalk.dry[]", a)
        for k in hw["hit_distances"]:
            _check_type("hswalk.hit_distances[]", k, (int,))
            if k < 1:
                raise ConfigError("hswalk.hit_distances: must be at least 1")
        es = d["estimators"]
        if es["d_max"] < 1:
            raise ConfigError("estimators.d_max: must be positive")
        if es["fit_min"] > es["fit_max"]:
            raise ConfigError("estimators.fit_min: must not exceed fit_max")
        if es["method"] not in ("product", "green"):
            raise ConfigError("estimators.method: must be 'product' or 'green'")
        if es["method"] == "green" and m["family"] != "gaussian":
            raise ConfigError("estimators.method: 'green' needs model.family = 'gaussian'")
        if es["directions"] not in ("axis", "diagonal", "axis+diagonal"):
            raise ConfigError("estimators.directions: must be 'axis', 'diagonal' or 'axis+diagonal'")
        if es["norm"] not in ("linf", "l1", "l2"):
            raise ConfigError("estimators.norm: must be 'linf', 'l1' or 'l2'")
        for n in es["N_list"]:
            _check_type("estimators.N_list[]", n, (int,))
        en = d["enumerate"]
        if en["shape"] not in ("box", "rect"):
            raise ConfigError("enumerate.shape: must be 'box' or 'rect'")
        if en["width"] < 1 or en["height"] < 1:
            raise ConfigError("enumerate: width and height must be positive")
        if d["tuples"]["instances"] < 1 or d["tuples"]["radius"] < 1:
            raise ConfigError("tuples: instances and radius must be positive")
        for f in d["outputs"]["formats"]:
            if f not in FORMATS:
                raise ConfigError(f"outputs.formats: unknown format '{f}'")

    # -- accessors ---------------------------------------------------------
    def __getitem__(self, section: str) -> dict:
        return self.data[section]

    def family(self) -> PotentialFamily:
        m = self.data["model"]
        params = m["params"] or DEFAULT_PARAMS[m["family"]]
        return PotentialFamily.from_config(m["family"], params, m["c_V"])

    @property
    def J(self) -> float | None:
        p = self.data["pinning"]
        return float(p["J"]) if p["enabled"] else None

    @property
    def seed(self) -> int:
        return self.data["mcmc"]["seed"]

    def sampler_params(self, J=...):
        from .gibbs import SamplerParams

        mc = self.data["mcmc"]
        return SamplerParams(
            J=self.J if J is ... else J,
            sweeps=mc["sweeps"],
            burn_in=mc["burn_in"],
            thin=mc["thin"],
            seed=mc["seed"],
            replicas=mc["replicas"],
        )

    def canonical_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()
