"""Longitudinal lane-keeping study: ego vehicle following a randomly driven leader.

State ``x = [s, v, s_env, v_env]``, input ``a`` (ego acceleration).  The
leader's position and speed receive additive uniform noise each step.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from smpc.controller import (
    ClosedLoopTrace,
    CostSpec,
    FullFeedbackController,
    OnlineArtifact,
    OpenLoopController,
    ProposedController,
    assemble_cost,
    closed_loop_run,
)
from smpc.errors import InvalidInput
from smpc.model import DisturbanceSpec, LtiModel, RiskSpec
from smpc.numerics import Status
from smpc.pipeline import OfflineResult, run_offline

KINDS = ("open_loop", "full", "proposed")


@dataclass
class LaneScenario:
    """Simulation parameters; defaults are the reference lane-keeping setup.

    ``epsilon``/``delta`` are not given with the setup and default to 0.05/0.01.
    """

    s_0: float = 6.0
    v_0: float = 6.0
    v_ref: float = 5.0
    s_0_env: float = 20.0
    v_0_env: float = 4.5
    w_s_env: tuple = (-0.6, 0.6)
    w_v_env: tuple = (-0.8, 0.8)
    dt: float = 0.2
    a_max: float = 10.0
    a_min: float = -10.0
    d_safe: float = 10.0
    d_follow: float = 16.0
    N_MPC: int = 5
    N_s: int = 10_000
    N_gamma: int = 2000
    N_ini: int = 200
    N_trial: int = 50
    N_task: int = 20
    N_online: int = 100
    epsilon: float = 0.05
    delta: float = 0.01
    trunc_tol: float = 1e-10
    seed: int = 42
    overrides: list = field(default_factory=list)

    @classmethod
    def from_dict(cls, data: dict) -> "LaneScenario":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise InvalidInput(f"unknown config keys: {sorted(unknown)}")
        defaults = cls()
        norm = {k: tuple(v) if isinstance(v, list) and k != "overrides" else v for k, v in data.items()}
        changed = [k for k in norm if k != "overrides" and norm[k] != getattr(defaults, k)]
        ls = cls(**data)
        ls.w_s_env, ls.w_v_env = tuple(ls.w_s_env), tuple(ls.w_v_env)
        ls.overrides = sorted(set(ls.overrides) | set(changed))
        ls.validate()
        return ls

    def replace(self, **kw) -> "LaneScenario":
        ls = dataclasses.replace(self, **kw)
        ls.overrides = sorted(set(self.overrides) | set(kw))
        ls.validate()
        return ls

    def validate(self):
        if self.N_MPC < 1 or self.N_s < 1 or self.N_gamma < 1 or self.N_ini < 1:
            raise InvalidInput("horizon and sample counts must be positive")
        if self.a_min >= self.a_max:
            raise InvalidInput("a_min must be below a_max")
        if not (0 < self.epsilon < 1 and 0 < self.delta < 1):
            raise InvalidInput("epsilon and delta must lie in (0, 1)")
        for lo, hi in (self.w_s_env, self.w_v_env):
            if lo > hi:
                raise InvalidInput("disturbance range has lower > upper")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["w_s_env"], d["w_v_env"] = list(self.w_s_env), list(self.w_v_env)
        return d

    @property
    def x_S(self) -> np.ndarray:
        return np.array([self.s_0, self.v_0, self.s_0_env, self.v_0_env])

    @property
    def risk(self) -> RiskSpec:
        return RiskSpec(self.epsilon, self.delta)


def build_lane_model(ls: LaneScenario):
    """(LtiModel, DisturbanceSpec, CostSpec) for the scenario.

    Constraint rows (C x <= d):
      safety  s_env - s >= d_safe - (v_env - v) dt  ->  [1, dt, -1, -dt] x <= -d_safe
      follow  s_env - s <= d_follow                 ->  [-1, 0, 1, 0]   x <= d_follow
    and a_min <= a <= a_max on the input.
    """
    dt = ls.dt
    A = np.array([[1, dt, 0, 0], [0, 1, 0, 0], [0, 0, 1, dt], [0, 0, 0, 1]], dtype=float)
    B = np.array([[0.0], [dt], [0.0], [0.0]])
    C = np.array([[1.0, dt, -1.0, -dt], [-1.0, 0.0, 1.0, 0.0]])
    d = np.array([-ls.d_safe, ls.d_follow])
    Hu = np.array([[1.0], [-1.0]])
    hu = np.array([ls.a_max, -ls.a_min])
    model = LtiModel(A, B, C, d, Hu, hu, ls.N_MPC, dt)
    lower = [0.0, 0.0, ls.w_s_env[0], ls.w_v_env[0]]
    upper = [0.0, 0.0, ls.w_s_env[1], ls.w_v_env[1]]
    dist = DisturbanceSpec(lower, upper, ls.seed)
    cost = assemble_cost(model, np.diag([0.0, 1.0, 0.0, 0.0]), np.eye(1), [0.0, ls.v_ref, 0.0, 0.0])
    return model, dist, cost


def build_artifact(ls: LaneScenario) -> OfflineResult:
    """Run the offline pipeline for the scenario; the config is echoed into the artifact."""
    model, dist, cost = build_lane_model(ls)
    return run_offline(model, dist, cost, ls.risk, ls.N_s, ls.N_gamma, ls.N_ini, ls.trunc_tol, config=ls.to_dict())


def gap_slack(states, ls: LaneScenario) -> np.ndarray:
    """(n_steps, 2) slacks of the safety and follow constraints; negative = violated."""
    x = np.atleast_2d(states)
    gap = x[:, 2] - x[:, 0]
    safety = gap - (ls.d_safe - (x[:, 3] - x[:, 1]) * ls.dt)
    follow = ls.d_follow - gap
    return np.stack([safety, follow], axis=1)


def make_controller(kind: str, ls: LaneScenario, art: OnlineArtifact | None = None, n_online: int | None = None,
                    seed: int | None = None):
    model, dist, cost = build_lane_model(ls)
    n_online = ls.N_online if n_online is None else n_online
    seed = ls.seed if seed is None else seed
    if kind == "proposed":
        if art is None:
            raise InvalidInput("the proposed controller needs an offline artifact")
        return ProposedController(art)
    if kind == "full":
        return FullFeedbackController(model, dist, cost, n_online, seed)
    if kind == "open_loop":
        return OpenLoopController(model, dist, cost, n_online, seed)
    raise InvalidInput(f"unknown controller kind {kind!r}")


# ------------------------------------------------------------------ ROA


@dataclass
class GridSpec:
    s_min: float = 4.0
    s_max: float = 18.0
    s_step: float = 1.0
    v_min: float = 0.0
    v_max: float = 10.0
    v_step: float = 1.0

    @classmethod
    def parse(cls, text: str) -> "GridSpec":
        """Parse ``"s=4:18:1,v=0:10:1"`` (either part may be omitted)."""
        g = cls()
        if not text:
            return g
        for part in text.split(","):
            key, _, rng = part.partition("=")
            vals = [float(t) for t in rng.split(":")]
            if key.strip() not in ("s", "v") or len(vals) not in (1, 3):
                raise InvalidInput(f"bad grid spec component {part!r}")
            if len(vals) == 1:
                vals = [vals[0], vals[0], 1.0]
            lo, hi, step = vals
            if step <= 0 or hi < lo:
                raise InvalidInput(f"bad grid range {part!r}")
            setattr(g, f"{key.strip()}_min", lo)
            setattr(g, f"{key.strip()}_max", hi)
            setattr(g, f"{key.strip()}_step", step)
        return g

    def axes(self):
        s = np.arange(self.s_min, self.s_max + 0.5 * self.s_step, self.s_step)
        v = np.arange(self.v_min, self.v_max + 0.5 * self.v_step, self.v_step)
        return s, v


@dataclass
class RoaGrid:
    kind: str
    s: np.ndarray
    v: np.ndarray
    feasible: np.ndarray   # (len(s), len(v)) booleans

    @property
    def count(self) -> int:
        return int(self.feasible.sum())

    def rows(self):
        return [[float(s), float(v), int(self.feasible[i, j])]
                for i, s in enumerate(self.s) for j, v in enumerate(self.v)]


def roa_grid(kind: str, ls: LaneScenario, grid: GridSpec, art: OnlineArtifact | None = None) -> RoaGrid:
    """Feasibility of the t=0 problem at each ego (s0, v0) node, leader fixed."""
    ctrl = make_controller(kind, ls, art)
    s_axis, v_axis = grid.axes()
    feas = np.zeros((s_axis.size, v_axis.size), dtype=bool)
    for i, s in enumerate(s_axis):
        for j, v in enumerate(v_axis):
            x = np.array([s, v, ls.s_0_env, ls.v_0_env])
            feas[i, j] = ctrl.step(x, 0, 0).status is Status.OPTIMAL
    return RoaGrid(kind, s_axis, v_axis, feas)


# --------------------------------------------------------------- trials


@dataclass
class CostSummary:
    kind: str
    traces: list
    costs: np.ndarray          # cumulative cost of completed trials, by trial index (nan if infeasible)

    @property
    def completed(self) -> np.ndarray:
        return np.isfinite(self.costs)

    @property
    def n_infeasible(self) -> int:
        return int((~self.completed).sum())

    @property
    def mean(self) -> float:
        c = self.costs[self.completed]
        return float(c.mean()) if c.size else float("nan")

    @property
    def std(self) -> float:
        c = self.costs[self.completed]
        return float(c.std(ddof=1)) if c.size > 1 else float("nan")

    def solve_times(self) -> np.ndarray:
        return np.concatenate([t.solve_times for t in self.traces]) if self.traces else np.zeros(0)


def run_trials(ls: LaneScenario, kinds=KINDS, art: OnlineArtifact | None = None, seed: int | None = None,
               n_trials: int | None = None, steps: int | None = None) -> dict:
    """Closed-loop trials with common random numbers across controllers.

    Each trial runs ``N_task + 1`` steps (time 0 through N_task).
    """
    model, dist, cost = build_lane_model(ls)
    seed = ls.seed if seed is None else seed
    n_trials = ls.N_trial if n_trials is None else n_trials
    T = ls.N_task + 1 if steps is None else steps
    out = {}
    for kind in kinds:
        ctrl = make_controller(kind, ls, art, seed=seed)
        traces = [closed_loop_run(ctrl, model, cost, ls.x_S, T, dist, seed, trial) for trial in range(n_trials)]
        costs = np.array([tr.total_cost if tr.completed else np.nan for tr in traces])
        out[kind] = CostSummary(kind, traces, costs)
    return out
