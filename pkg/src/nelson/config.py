"""JSON run configuration: schema, defaults and construction of model objects."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import dataclass
from typing import Any

import jsonschema
import numpy as np
import sympy as sp

from .basis import TestFunctionBasis
from .cost import CostFunction
from .diffusion import DiffusionSpec, InitialLaw, SingularDiffusionError
from .dual import SolverOptions
from .marginals import EmpiricalFlow, GaussianFlow, GridDensityFlow

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


_num = {"type": "number"}
_matrix = {"oneOf": [_num, {"type": "array", "items": {"type": "array", "items": _num}}]}
_expr = {"oneOf": [_num, {"type": "string"}]}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


SCHEMA = _obj({
    "seed": {"type": "integer", "minimum": 0},
    "workers": {"type": "integer", "minimum": 1},
    "cost": _obj({
        "kind": {"enum": ["quadratic", "power", "power_log"]},
        "p": {"type": "number", "exclusiveMinimum": 1},
        "scale": {"type": "number", "exclusiveMinimum": 0},
    }, ["kind"]),
    "diffusion": _obj({
        "dim": {"type": "integer", "minimum": 1, "maximum": 3},
        "T": {"type": "number", "exclusiveMinimum": 0},
        "m0": _obj({
            "kind": {"enum": ["dirac", "gaussian"]},
            "at": {"type": "array", "items": _num},
            "mean": {"type": "array", "items": _num},
            "cov": _matrix,
        }, ["kind"]),
        "sigma": _matrix,
        "drift": _obj({"kind": {"enum": ["zero", "linear"]}, "A": _matrix}, ["kind"]),
    }, ["T"]),
    "marginals": {"oneOf": [
        _obj({"type": {"const": "gaussian"}, "mean": {"type": "array", "items": _expr}, "cov": _expr},
             ["type", "cov"]),
        _obj({"type": {"const": "grid"}, "file": {"type": "string"}}, ["type", "file"]),
        _obj({"type": {"const": "empirical"}, "file": {"type": "string"}}, ["type", "file"]),
    ]},
    "basis": _obj({
        "time_knots": {"type": "integer", "minimum": 2},
        "space_knots": {"type": "integer", "minimum": 5},
        "kind": {"enum": ["bspline", "rbf"]},
        "box": {"oneOf": [{"const": "auto"},
                          {"type": "array", "minItems": 2, "maxItems": 2,
                           "items": {"type": "array", "items": _num}}]},
        "time_boundary": {"enum": ["free", "vanishing"]},
    }),
    "solver": _obj({
        "tol_foc": {"type": "number", "exclusiveMinimum": 0},
        "max_iter": {"type": "integer", "minimum": 1},
        "restarts": {"type": "integer", "minimum": 1},
        "memory": {"type": "integer", "minimum": 1},
    }),
    "mc": _obj({
        "n_paths": {"type": "integer", "minimum": 2},
        "n_steps": {"type": "integer", "minimum": 1},
        "slices": {"type": "integer", "minimum": 2},
    }),
    "R": _obj({
        "kind": {"enum": ["variance_target", "mean_field_quadratic"]},
        "lambda": {"type": "number", "minimum": 0},
        "v_star_factor": {"type": "number", "exclusiveMinimum": 0},
        "m_star": _expr,
    }, ["kind"]),
    "mfg": _obj({
        "n_knots": {"type": "integer", "minimum": 2},
        "max_evals": {"type": "integer", "minimum": 1},
        "mean_params": {"type": "boolean"},
        "v0": {"type": "number", "exclusiveMinimum": 0},
    }),
}, ["cost", "diffusion"])

DEFAULTS = {
    "seed": 0,
    "workers": 1,
    "cost": {"scale": 1.0},
    "diffusion": {"dim": 1, "m0": {"kind": "gaussian"}, "drift": {"kind": "zero"}},
    "basis": {"time_knots": 12, "space_knots": 16, "kind": "bspline", "box": "auto", "time_boundary": "free"},
    "solver": {"max_iter": 2000, "restarts": 3, "memory": 20},
    "mc": {"n_paths": 100_000, "n_steps": 400, "slices": 17},
    "mfg": {"n_knots": 4, "max_evals": 300, "mean_params": False, "v0": 1.0},
}


def _merge(base, extra):
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class RunConfig:
    raw: dict

    def __getitem__(self, key):
        return self.raw[key]

    def get(self, key, default=None):
        return self.raw.get(key, default)

    @property
    def hash(self):
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()[:16]

    # -- builders ---------------------------------------------------------------
    def cost(self) -> CostFunction:
        c = self.raw["cost"]
        if c["kind"] == "quadratic":
            return CostFunction.quadratic()
        if "p" not in c:
            raise ConfigError("cost.p is required for power costs")
        maker = CostFunction.power if c["kind"] == "power" else CostFunction.power_log
        return maker(c["p"], c.get("scale", 1.0))

    def spec(self, flow=None) -> DiffusionSpec:
        d = self.raw["diffusion"]
        q, T = d["dim"], float(d["T"])
        m0 = d["m0"]
        if m0["kind"] == "dirac":
            law = InitialLaw.dirac(m0.get("at", [0.0] * q))
        elif "cov" in m0:
            law = InitialLaw.gaussian(m0.get("mean", [0.0] * q), m0["cov"])
        elif flow is not None and isinstance(flow, GaussianFlow):
            # initial law read off the prescribed flow
            law = InitialLaw.gaussian(flow.mean(0.0), flow.cov(0.0))
        else:
            law = InitialLaw.gaussian(m0.get("mean", [0.0] * q), np.eye(q))
        drift = d["drift"]
        b = None
        if drift["kind"] == "linear":
            A = np.asarray(drift["A"], dtype=float) * (np.eye(q) if np.ndim(drift["A"]) == 0 else 1.0)
            b = lambda t, x, A=A: x @ A.T
        sigma = d.get("sigma")
        try:
            kw = {"sigma": sigma} if sigma is not None else {}
            if b is not None:
                kw["b"] = b
            return DiffusionSpec(q, T, law, **kw)
        except SingularDiffusionError as e:
            raise ConfigError(f"diffusion.sigma: {e}") from e

    def flow(self):
        m = self.raw.get("marginals")
        if m is None:
            raise ConfigError("missing required key 'marginals'")
        d = self.raw["diffusion"]
        q, T = d["dim"], float(d["T"])
        if m["type"] == "gaussian":
            t = sp.Symbol("t", real=True)

            def fn(e):
                f = sp.lambdify(t, sp.sympify(e, locals={"t": t}), "numpy")
                return lambda s: float(f(s))

            var = fn(m["cov"])
            means = [fn(e) for e in m.get("mean", [0] * q)]
            if len(means) != q:
                raise ConfigError(f"marginals.mean must have {q} entries")
            if min(var(s) for s in np.linspace(0, T, 101)) <= 0:
                raise ConfigError("marginals.cov must be positive on [0, T]")
            return GaussianFlow(lambda s: np.array([f(s) for f in means]),
                                lambda s: var(s) * np.eye(q), T, q)
        if m["type"] == "grid":
            return GridDensityFlow.from_csv(m["file"])
        return EmpiricalFlow.from_csv(m["file"])

    def basis(self, flow) -> TestFunctionBasis:
        b = self.raw["basis"]
        return TestFunctionBasis.for_flow(flow, b["time_knots"], b["space_knots"], b["kind"],
                                          b["time_boundary"], b["box"])

    def solver(self) -> SolverOptions:
        s = self.raw["solver"]
        return SolverOptions(tol_foc=s.get("tol_foc"), max_iter=s["max_iter"], restarts=s["restarts"],
                             memory=s["memory"], seed=self.raw["seed"])


def validate(raw: dict) -> RunConfig:
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as e:
        where = ".".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config key '{where}': {e.message}") from None
    full = _merge(DEFAULTS, raw)
    if full["diffusion"].get("drift", {}).get("kind") == "linear" and "A" not in full["diffusion"]["drift"]:
        raise ConfigError("config key 'diffusion.drift.A' is required for a linear drift")
    cfg = RunConfig(full)
    cfg.spec()
    log.info("configuration with defaults: %s", json.dumps(full, sort_keys=True))
    return cfg


def parse_config(path) -> RunConfig:
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from None
    return validate(raw)


def with_overrides(cfg: RunConfig, **kv: Any) -> RunConfig:
    return RunConfig(_merge(cfg.raw, {k: v for k, v in kv.items() if v is not None}))
