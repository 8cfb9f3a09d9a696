"""Online MPC problems (proposed, full feedback, open loop) and closed-loop runs."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from smpc import numerics
from smpc.errors import ArtifactVersionError, InvalidInput
from smpc.feature import FeatureMap
from smpc.model import DisturbanceSpec, LtiModel, draw_disturbances, make_rng
from smpc.numerics import QpProblem, SolveReport, Status
from smpc.scaling import ScaledFeasibleSet
from smpc.stacker import BlockFactors, build_block_factors

ARTIFACT_VERSION = "1.0.0"

# rng stream tags; keep stable, they are part of the reproducibility contract
TAG_TRUE = 1
TAG_ONLINE = 2


@dataclass(eq=False)
class CostSpec:
    """Nominal cost ``0.5 z'Hz + q'z + c`` over ``z = [x0; v]``.

    Equals ``sum_{k=0}^{N} (xbar_k - x_ref)' Q (xbar_k - x_ref) + v_k' R v_k``
    along the nominal rollout.
    """

    Q_stage: np.ndarray
    R_stage: np.ndarray
    x_ref: np.ndarray
    H: np.ndarray
    q: np.ndarray
    c: float

    @property
    def n(self) -> int:
        return self.Q_stage.shape[0]

    def evaluate(self, x0, v) -> float:
        z = np.concatenate([np.ravel(x0), np.ravel(v)])
        return float(0.5 * z @ self.H @ z + self.q @ z + self.c)

    def stage(self, x, u) -> float:
        e = np.ravel(x) - self.x_ref[0]
        u = np.ravel(u)
        return float(e @ self.Q_stage @ e + u @ self.R_stage @ u)

    def to_dict(self) -> dict:
        return {"Q_stage": self.Q_stage.tolist(), "R_stage": self.R_stage.tolist(), "x_ref": self.x_ref.tolist()}


def nominal_maps(model: LtiModel):
    """(Phi, Gamma) with stacked nominal states xbar_0..xbar_N = Phi x0 + Gamma v."""
    N, n, m = model.N, model.n, model.m
    Phi = np.zeros(((N + 1) * n, n))
    Gam = np.zeros(((N + 1) * n, (N + 1) * m))
    Ak = np.eye(n)
    powers = [Ak]
    for _ in range(N):
        powers.append(powers[-1] @ model.A)
    for k in range(N + 1):
        Phi[k * n:(k + 1) * n] = powers[k]
        for i in range(k):
            Gam[k * n:(k + 1) * n, i * m:(i + 1) * m] = powers[k - 1 - i] @ model.B
    return Phi, Gam


def assemble_cost(model: LtiModel, Q_stage, R_stage, x_ref=None) -> CostSpec:
    N, n, m = model.N, model.n, model.m
    Q_stage = np.atleast_2d(np.asarray(Q_stage, dtype=float))
    R_stage = np.atleast_2d(np.asarray(R_stage, dtype=float))
    numerics.check_psd(Q_stage)
    numerics.check_psd(R_stage)
    x_ref = np.zeros(n) if x_ref is None else np.asarray(x_ref, dtype=float)
    x_ref = np.broadcast_to(x_ref.reshape(-1, n), (N + 1, n)).copy()

    Phi, Gam = nominal_maps(model)
    S = np.hstack([Phi, Gam])
    Qb = np.kron(np.eye(N + 1), Q_stage)
    Rb = np.zeros((n + (N + 1) * m,) * 2)
    Rb[n:, n:] = np.kron(np.eye(N + 1), R_stage)
    r = x_ref.ravel()
    H = 2.0 * (S.T @ Qb @ S + Rb)
    H = 0.5 * (H + H.T)
    q = -2.0 * S.T @ Qb @ r
    c = float(r @ Qb @ r)
    return CostSpec(Q_stage, R_stage, x_ref, H, q, c)


def _v_cost(cost: CostSpec, x_t):
    """Quadratic/linear/constant terms in v with x0 pinned to x_t."""
    n = cost.n
    H = cost.H
    Hvv = H[n:, n:]
    qv = H[n:, :n] @ x_t + cost.q[n:]
    const = 0.5 * x_t @ H[:n, :n] @ x_t + cost.q[:n] @ x_t + cost.c
    return Hvv, qv, const


@dataclass(eq=False)
class OnlineArtifact:
    """Everything the proposed online controller needs; size is independent of N_s."""

    model: LtiModel
    fm: FeatureMap
    sfs: ScaledFeasibleSet
    cost: CostSpec
    version: str = ARTIFACT_VERSION
    seeds: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def n_feature(self) -> int:
        return self.fm.n_feature

    def check(self):
        if self.version != ARTIFACT_VERSION:
            raise ArtifactVersionError(f"artifact version {self.version} != {ARTIFACT_VERSION}")


@dataclass
class StepResult:
    status: Status
    u_applied: np.ndarray
    v_star: np.ndarray
    y_trun_star: np.ndarray
    objective: float
    solve_time: float
    n_vars: int = 0
    n_rows: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL


def build_online_qp(art: OnlineArtifact, x_t) -> QpProblem:
    """Box-constrained QP over ``[f; v]``; the x0 slice becomes constant rows."""
    art.check()
    x_t = np.asarray(x_t, dtype=float).ravel()
    if x_t.size != art.model.n:
        raise InvalidInput(f"state dimension {x_t.size} != {art.model.n}")
    sfs = art.sfs
    nf = art.n_feature
    nv = sfs.dims["v"][1] - sfs.dims["v"][0]
    nz = nf + nv
    lo, hi = sfs.lower, sfs.upper
    Hvv, qv, _ = _v_cost(art.cost, x_t)
    Q = np.zeros((nz, nz))
    Q[nf:, nf:] = Hvv
    q = np.zeros(nz)
    q[nf:] = qv
    I = np.eye(nz)
    xs = sfs.slice("x0")
    xi = art.fm.x_basis.T @ x_t
    nx = xi.size
    G = np.vstack([I, -I, np.zeros((2 * nx, nz))])
    h = np.concatenate([hi[:nz], -lo[:nz], hi[xs] - xi, xi - lo[xs]])
    return QpProblem(Q, q, G, h)


def _finish(rep: SolveReport, nf, const, elapsed, qp, art=None) -> StepResult:
    if rep.optimal:
        f, v = rep.primal[:nf], rep.primal[nf:]
        y_trun = art.fm.feature_to_trun(f) if art is not None else f
        obj = rep.objective + const
    else:
        v = np.full(qp.n_vars - nf, np.nan)
        y_trun = np.full(nf, np.nan)
        obj = np.inf
    return StepResult(rep.status, v, v, y_trun, obj, elapsed, qp.n_vars, qp.n_rows, {"primal": rep.primal})


def solve_step(art: OnlineArtifact, x_t) -> StepResult:
    t0 = time.perf_counter()
    qp = build_online_qp(art, x_t)
    rep = numerics.solve_qp(qp)
    elapsed = time.perf_counter() - t0
    _, _, const = _v_cost(art.cost, np.asarray(x_t, dtype=float).ravel())
    res = _finish(rep, art.n_feature, const, elapsed, qp, art)
    res.u_applied = res.v_star[: art.model.m]
    return res


# ---------------------------------------------------------------- baselines


@dataclass(eq=False)
class BaselineQp:
    qp: QpProblem
    y_cols: np.ndarray   # flat y indices of the gain variables, in order
    const: float


def _sample_rows(factors: BlockFactors, W, x_t):
    """Per-sample constant part ``C_blk x_t + D_map w - d_stack`` stacked."""
    d = W @ factors.D_map.T - factors.d_stack + factors.C_blk @ x_t
    return d.ravel()


def build_full_feedback_qp(model: LtiModel, W_online, cost: CostSpec, x_t, factors: BlockFactors | None = None) -> BaselineQp:
    """Scenario program over causal gains and nominal inputs.

    Gain entries that must vanish by causality are eliminated, as are
    entries whose constraint column is zero on every online sample.
    """
    factors = factors or build_block_factors(model)
    x_t = np.asarray(x_t, dtype=float).ravel()
    W = np.atleast_2d(np.asarray(W_online, dtype=float)).reshape(-1, model.n * (model.N + 1))
    S = W.shape[0]
    lay = factors.layout
    n_row = factors.K_B.shape[0]
    # kron(w_j, K_B) for every sample: (S, n_row, L, N m) -> (S n_row, dim_y)
    Ay = (W[:, None, :, None] * factors.K_B[None, :, None, :]).reshape(S * n_row, lay.dim)
    cols = np.flatnonzero(~lay.causal_zero & (np.abs(Ay).max(axis=0, initial=0.0) > 0.0)) if S else np.zeros(0, int)
    Ay = Ay[:, cols]
    Bv = np.tile(factors.B_blk, (S, 1))
    G = np.hstack([Ay, Bv])
    h = -_sample_rows(factors, W, x_t)
    Hvv, qv, const = _v_cost(cost, x_t)
    ny, nv = cols.size, Hvv.shape[0]
    Q = np.zeros((ny + nv, ny + nv))
    Q[ny:, ny:] = Hvv
    q = np.r_[np.zeros(ny), qv]
    return BaselineQp(QpProblem(Q, q, G, h), cols, const)


def build_open_loop_qp(model: LtiModel, W_online, cost: CostSpec, x_t, factors: BlockFactors | None = None) -> BaselineQp:
    factors = factors or build_block_factors(model)
    x_t = np.asarray(x_t, dtype=float).ravel()
    W = np.atleast_2d(np.asarray(W_online, dtype=float)).reshape(-1, model.n * (model.N + 1))
    S = W.shape[0]
    G = np.tile(factors.B_blk, (S, 1))
    h = -_sample_rows(factors, W, x_t)
    Hvv, qv, const = _v_cost(cost, x_t)
    return BaselineQp(QpProblem(Hvv, qv, G, h), np.zeros(0, int), const)


def build_reduced_qp(rc, cost: CostSpec, x_t) -> BaselineQp:
    """Sampled program in feature coordinates: ``A_red y_trun + B_bar v + C_bar x0 + d_bar <= 0``.

    Variables are ``[f; v]`` with ``y_trun = fm.feature_to_trun(f)``, so every
    solution has a causal reconstruction.
    """
    fm, sp = rc.fm, rc.sp
    x_t = np.asarray(x_t, dtype=float).ravel()
    F = np.eye(fm.n_keep) if fm.basis is None else fm.basis
    Gf = rc.blocks() @ F
    S, n_row = sp.n_samples, sp.n_row
    G = np.hstack([Gf.reshape(S * n_row, -1), np.tile(sp.factors.B_blk, (S, 1))])
    h = -_sample_rows(sp.factors, sp.W, x_t)
    Hvv, qv, const = _v_cost(cost, x_t)
    nf, nv = F.shape[1], Hvv.shape[0]
    Q = np.zeros((nf + nv, nf + nv))
    Q[nf:, nf:] = Hvv
    return BaselineQp(QpProblem(Q, np.r_[np.zeros(nf), qv], G, h), np.arange(nf), const)


def solve_baseline(bq: BaselineQp, m: int) -> StepResult:
    t0 = time.perf_counter()
    rep = numerics.solve_qp(bq.qp)
    elapsed = time.perf_counter() - t0
    res = _finish(rep, bq.y_cols.size, bq.const, elapsed, bq.qp)
    res.u_applied = res.v_star[:m]
    return res


# ------------------------------------------------------------- controllers


class ProposedController:
    kind = "proposed"

    def __init__(self, art: OnlineArtifact):
        art.check()
        self.art = art

    def step(self, x_t, t: int = 0, trial: int = 0) -> StepResult:
        return solve_step(self.art, x_t)


class _ScenarioController:
    builder = None

    def __init__(self, model: LtiModel, dist: DisturbanceSpec, cost: CostSpec, n_samples: int = 100, seed: int = 0):
        self.model, self.dist, self.cost = model, dist, cost
        self.n_samples = int(n_samples)
        self.seed = int(seed)
        self.factors = build_block_factors(model)

    def samples(self, t: int, trial: int) -> np.ndarray:
        """Fresh online scenarios, keyed by (seed, trial, step)."""
        if self.n_samples == 0:
            return np.zeros((0, self.model.n * (self.model.N + 1)))
        rng = make_rng(self.seed, TAG_ONLINE, trial, t)
        w = draw_disturbances(self.dist, rng, (self.n_samples, self.model.N + 1))
        return w.reshape(self.n_samples, -1)

    def build(self, x_t, t: int = 0, trial: int = 0) -> BaselineQp:
        return type(self).builder(self.model, self.samples(t, trial), self.cost, x_t, self.factors)

    def step(self, x_t, t: int = 0, trial: int = 0) -> StepResult:
        t0 = time.perf_counter()
        bq = self.build(x_t, t, trial)
        res = solve_baseline(bq, self.model.m)
        res.solve_time = time.perf_counter() - t0
        return res


class FullFeedbackController(_ScenarioController):
    kind = "full"
    builder = staticmethod(build_full_feedback_qp)


class OpenLoopController(_ScenarioController):
    kind = "open_loop"
    builder = staticmethod(build_open_loop_qp)


# ------------------------------------------------------------- closed loop


@dataclass
class ClosedLoopTrace:
    states: np.ndarray        # (T+1, n) when the run completes
    inputs: np.ndarray        # (T, m)
    stage_costs: np.ndarray   # (T,)
    solve_times: np.ndarray   # (T,)
    statuses: list
    infeasible_at: int | None = None

    @property
    def total_cost(self) -> float:
        return float(self.stage_costs.sum())

    @property
    def completed(self) -> bool:
        return self.infeasible_at is None

    def rows(self):
        """CSV rows ``t, x..., u..., stage_cost, solve_time, status``; the final state gets status ``end``."""
        out = []
        n = self.states.shape[1]
        m = self.inputs.shape[1]
        for t in range(max(len(self.statuses), len(self.states))):
            x = self.states[t] if t < len(self.states) else np.full(n, np.nan)
            u = self.inputs[t] if t < len(self.inputs) else np.full(m, np.nan)
            c = self.stage_costs[t] if t < len(self.stage_costs) else np.nan
            s = self.solve_times[t] if t < len(self.solve_times) else np.nan
            st = self.statuses[t] if t < len(self.statuses) else "end"
            out.append([t, *x, *u, c, s, st])
        return out


def true_disturbances(dist: DisturbanceSpec, seed: int, trial: int, T: int) -> np.ndarray:
    """Disturbance realization shared by all controllers for a given trial."""
    return draw_disturbances(dist, make_rng(seed, TAG_TRUE, trial), (T,))


def closed_loop_run(controller, model: LtiModel, cost: CostSpec, x_S, T: int, true_dist: DisturbanceSpec,
                    seed: int, trial: int = 0) -> ClosedLoopTrace:
    """Receding-horizon run over T steps; an infeasible solve ends the trial."""
    n, m = model.n, model.m
    x = np.asarray(x_S, dtype=float).ravel().copy()
    ws = true_disturbances(true_dist, seed, trial, T)
    states, inputs, costs, times, statuses = [x.copy()], [], [], [], []
    infeasible_at = None
    for t in range(T):
        res = controller.step(x, t, trial)
        times.append(res.solve_time)
        statuses.append(res.status.value)
        if not res.optimal:
            infeasible_at = t
            break
        u = np.asarray(res.u_applied, dtype=float).ravel()
        costs.append(cost.stage(x, u))
        inputs.append(u)
        x = model.A @ x + model.B @ u + ws[t]
        states.append(x.copy())
    return ClosedLoopTrace(
        np.array(states).reshape(-1, n), np.array(inputs).reshape(-1, m), np.array(costs),
        np.array(times), statuses, infeasible_at,
    )
