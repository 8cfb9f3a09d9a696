"""Uncertain LTI model, disturbance sampling and scenario-count bounds.

The system is ``x[k+1] = A x[k] + B u[k] + w[k]`` with ``w[k]`` in R^n and
inputs ``u[0..N]`` parametrized by affine disturbance feedback

    u[k] = sum_{i<k} M[k, i] w[i] + v[k].
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from smpc.errors import InvalidInput


def _arr(x, ndim):
    a = np.array(x, dtype=float)
    if ndim == 2:
        a = np.atleast_2d(a)
    else:
        a = np.atleast_1d(a).ravel()
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LtiModel:
    """Dynamics, polytopic state/input constraints ``C x <= d``, ``Hu u <= hu``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    d: np.ndarray
    Hu: np.ndarray
    hu: np.ndarray
    N: int
    dt: float = 1.0

    def __post_init__(self):
        for name, nd in (("A", 2), ("B", 2), ("C", 2), ("d", 1), ("Hu", 2), ("hu", 1)):
            object.__setattr__(self, name, _arr(getattr(self, name), nd))
        object.__setattr__(self, "N", int(self.N))
        n, m = self.B.shape
        if self.A.shape != (n, n):
            raise InvalidInput(f"A has shape {self.A.shape}, expected {(n, n)}")
        if self.C.shape[1] != n or self.C.shape[0] != self.d.size:
            raise InvalidInput("C/d shapes are inconsistent")
        if self.Hu.shape[1] != m or self.Hu.shape[0] != self.hu.size:
            raise InvalidInput("Hu/hu shapes are inconsistent")
        if self.N < 1:
            raise InvalidInput("horizon N must be >= 1")
        for a in (self.A, self.B, self.C, self.d, self.Hu, self.hu):
            if not np.all(np.isfinite(a)):
                raise InvalidInput("model contains non-finite entries")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def nc(self) -> int:
        return self.C.shape[0]

    @property
    def ncu(self) -> int:
        return self.Hu.shape[0]

    @property
    def n_row(self) -> int:
        """Constraint rows per scenario: state rows for x1..x_{N+1}, input rows for u0..uN."""
        return (self.N + 1) * (self.nc + self.ncu)

    def to_dict(self) -> dict:
        return {
            "A": self.A.tolist(), "B": self.B.tolist(), "C": self.C.tolist(),
            "d": self.d.tolist(), "Hu": self.Hu.tolist(), "hu": self.hu.tolist(),
            "N": self.N, "dt": self.dt,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LtiModel":
        return cls(**{k: data[k] for k in ("A", "B", "C", "d", "Hu", "hu", "N", "dt")})

    def digest(self) -> str:
        return _digest(self.to_dict())


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True, eq=False)
class DisturbanceSpec:
    """i.i.d. per-step disturbance, uniform on the box [lower, upper]."""

    lower: np.ndarray
    upper: np.ndarray
    seed: int = 0
    kind: str = "uniform_box"

    def __post_init__(self):
        object.__setattr__(self, "lower", _arr(self.lower, 1))
        object.__setattr__(self, "upper", _arr(self.upper, 1))
        object.__setattr__(self, "seed", int(self.seed))
        if self.kind != "uniform_box":
            raise InvalidInput(f"unsupported disturbance kind {self.kind!r}")
        if self.lower.shape != self.upper.shape:
            raise InvalidInput("lower/upper shapes differ")
        if not (np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper))):
            raise InvalidInput("disturbance support must be compact")
        if np.any(self.lower > self.upper):
            raise InvalidInput("lower bound exceeds upper bound")

    def with_seed(self, seed: int) -> "DisturbanceSpec":
        return DisturbanceSpec(self.lower, self.upper, seed, self.kind)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "lower": self.lower.tolist(), "upper": self.upper.tolist(), "seed": self.seed}

    @classmethod
    def from_dict(cls, data: dict) -> "DisturbanceSpec":
        return cls(data["lower"], data["upper"], data.get("seed", 0), data.get("kind", "uniform_box"))

    def digest(self) -> str:
        """Digest of the distribution and seed, recorded with every scenario set."""
        return _digest(self.to_dict())


@dataclass(frozen=True, eq=False)
class ScenarioSet:
    """Row j holds one disturbance sequence [w0' ... wN'] of length n(N+1)."""

    W: np.ndarray
    seed: int
    spec_hash: str

    @property
    def count(self) -> int:
        return self.W.shape[0]

    def subset(self, rows) -> "ScenarioSet":
        W = np.ascontiguousarray(self.W[rows])
        W.setflags(write=False)
        return ScenarioSet(W, self.seed, self.spec_hash)


@dataclass(frozen=True)
class RiskSpec:
    epsilon: float
    delta: float

    def __post_init__(self):
        if not (0.0 < self.epsilon < 1.0 and 0.0 < self.delta < 1.0):
            raise InvalidInput("epsilon and delta must lie in (0, 1)")


def make_rng(*key: int) -> np.random.Generator:
    """Counter-based Philox generator keyed by one or more integers."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


def draw_disturbances(spec: DisturbanceSpec, rng: np.random.Generator, shape) -> np.ndarray:
    """Array of shape ``(*shape, n)`` of i.i.d. draws from ``spec``."""
    n = spec.lower.size
    u = rng.random((*tuple(shape), n))
    w = spec.lower + (spec.upper - spec.lower) * u
    return np.clip(w, spec.lower, spec.upper)


def sample_scenarios(spec: DisturbanceSpec, model: LtiModel, count: int, seed: int | None = None) -> ScenarioSet:
    if count < 1:
        raise InvalidInput("scenario count must be >= 1")
    if spec.lower.size != model.n:
        raise InvalidInput(f"disturbance dimension {spec.lower.size} != state dimension {model.n}")
    seed = spec.seed if seed is None else int(seed)
    w = draw_disturbances(spec, make_rng(seed), (count, model.N + 1))
    W = w.reshape(count, -1)
    W.setflags(write=False)
    return ScenarioSet(W, seed, spec.with_seed(seed).digest())


def required_scenario_count(risk: RiskSpec, d: int) -> int:
    """Smallest N_s with N_s >= (5/eps)(ln(4/delta) + d ln(40/eps))."""
    if d < 1:
        raise InvalidInput("decision dimension must be >= 1")
    eps, delta = risk.epsilon, risk.delta
    bound = 5.0 / eps * (math.log(4.0 / delta) + d * math.log(40.0 / eps))
    return max(1, math.ceil(bound))


def required_gamma_count(risk: RiskSpec) -> int:
    """Smallest N_gamma with N_gamma >= (7.47/eps) ln(1/delta), at least 1."""
    bound = 7.47 / risk.epsilon * math.log(1.0 / risk.delta)
    return max(1, math.ceil(bound))


@dataclass
class Policy:
    """Affine disturbance feedback: ``gains[k, i]`` is M[k, i] (m x n), used for i < k only."""

    gains: np.ndarray
    v: np.ndarray

    @classmethod
    def open_loop(cls, model: LtiModel, v) -> "Policy":
        N, n, m = model.N, model.n, model.m
        return cls(np.zeros((N + 1, N + 1, m, n)), np.asarray(v, dtype=float).reshape(N + 1, m))


def rollout(model: LtiModel, x0, policy: Policy, wseq):
    """Propagate one disturbance sequence; returns (states x0..x_{N+1}, inputs u0..uN)."""
    N, n, m = model.N, model.n, model.m
    gains = np.asarray(policy.gains, dtype=float)
    v = np.asarray(policy.v, dtype=float).reshape(N + 1, m)
    w = np.asarray(wseq, dtype=float).reshape(N + 1, n)
    if gains.shape != (N + 1, N + 1, m, n):
        raise InvalidInput(f"gains shape {gains.shape} != {(N + 1, N + 1, m, n)}")
    x = np.empty((N + 2, n))
    u = np.empty((N + 1, m))
    x[0] = np.asarray(x0, dtype=float).ravel()
    for k in range(N + 1):
        u[k] = v[k]
        for i in range(k):
            u[k] += gains[k, i] @ w[i]
        x[k + 1] = model.A @ x[k] + model.B @ u[k] + w[k]
    return x, u


def rollout_residuals(model: LtiModel, x0, policy: Policy, wseq) -> np.ndarray:
    """Constraint residuals in stacked order: C x_k - d for k=1..N+1, then Hu u_k - hu for k=0..N."""
    x, u = rollout(model, x0, policy, wseq)
    state = (x[1:] @ model.C.T - model.d).ravel()
    inputs = (u @ model.Hu.T - model.hu).ravel()
    return np.concatenate([state, inputs])
