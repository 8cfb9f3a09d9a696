"""Dense SVD, LP and convex QP behind small, solver-agnostic contracts.

LPs and QPs are handed to Clarabel (a primal-dual interior point method with
infeasibility certificates).  Residuals in the returned report are recomputed
here from the primal/dual pair so the ``Optimal`` status means the same thing
regardless of the backend.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import clarabel
import numpy as np
import scipy.linalg
import scipy.sparse as sp

from smpc.errors import InvalidInput

RANK_TOL = 1e-10
PSD_PIVOT_TOL = 1e-12
KKT_TOL = 1e-7


class Status(str, Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    ITER_LIMIT = "IterLimit"


@dataclass
class SvdFactors:
    """Thin SVD ``M = U @ diag(S) @ Vt`` with singular values descending."""

    U: np.ndarray
    S: np.ndarray
    Vt: np.ndarray
    rank_tol: float = RANK_TOL

    @property
    def rank(self) -> int:
        if self.S.size == 0 or self.S[0] == 0.0:
            return 0
        return int(np.count_nonzero(self.S > self.rank_tol * self.S[0]))

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.S) @ self.Vt


@dataclass
class QpProblem:
    """min 0.5 x'Qx + q'x  s.t.  G x <= h,  E x = b."""

    Q: np.ndarray
    q: np.ndarray
    G: np.ndarray | None = None
    h: np.ndarray | None = None
    E: np.ndarray | None = None
    b: np.ndarray | None = None

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).ravel()
        nx = self.q.size
        self.Q = np.asarray(self.Q, dtype=float).reshape(nx, nx)
        self.G, self.h = _rows(self.G, self.h, nx, "G/h")
        self.E, self.b = _rows(self.E, self.b, nx, "E/b")

    @property
    def n_vars(self) -> int:
        return self.q.size

    @property
    def n_rows(self) -> int:
        return self.G.shape[0] + self.E.shape[0]


@dataclass
class SolveReport:
    status: Status
    primal: np.ndarray
    objective: float
    primal_inf: float = np.inf
    dual_inf: float = np.inf
    iterations: int = 0
    dual_ineq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    dual_eq: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL


def _rows(M, v, nx, name):
    if M is None or (np.size(M) == 0 and (v is None or np.size(v) == 0)):
        return np.zeros((0, nx)), np.zeros(0)
    M = np.atleast_2d(np.asarray(M, dtype=float))
    v = np.asarray(v, dtype=float).ravel()
    if M.shape[1] != nx or M.shape[0] != v.size:
        raise InvalidInput(f"{name}: shapes {M.shape} and {v.shape} do not match {nx} variables")
    return M, v


def _check_finite(*arrays):
    for a in arrays:
        if a is not None and not np.all(np.isfinite(a)):
            raise InvalidInput("non-finite entries in solver input")


def svd(M, rank_tol: float = RANK_TOL) -> SvdFactors:
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        raise InvalidInput("svd of an empty matrix")
    _check_finite(M)
    U, S, Vt = np.linalg.svd(np.atleast_2d(M), full_matrices=False)
    return SvdFactors(U, S, Vt, rank_tol)


def check_psd(Q, tol: float = PSD_PIVOT_TOL):
    """Raise InvalidInput unless Q is symmetric positive semidefinite.

    Uses a Bunch-Kaufman LDL' factorization; the block-diagonal D must have no
    eigenvalue below ``-tol * max(1, |D|max)``.
    """
    Q = np.asarray(Q, dtype=float)
    if Q.size == 0:
        return
    scale = max(1.0, np.abs(Q).max())
    if np.abs(Q - Q.T).max() > 1e-10 * scale:
        raise InvalidInput("cost matrix is not symmetric")
    _, D, _ = scipy.linalg.ldl(0.5 * (Q + Q.T))
    eig = np.linalg.eigvalsh(D)
    if eig.min() < -tol * max(1.0, np.abs(D).max()):
        raise InvalidInput(f"cost matrix is indefinite (pivot eigenvalue {eig.min():.3e})")


def _settings(max_iter):
    s = clarabel.DefaultSettings()
    s.verbose = False
    s.max_iter = max_iter
    s.tol_gap_abs = 1e-9
    s.tol_gap_rel = 1e-9
    s.tol_feas = 1e-9
    s.tol_ktratio = 1e-7
    return s


def _solve(Q, q, G, h, E, b, max_iter) -> SolveReport:
    nx = q.size
    A = np.vstack([E, G])
    rhs = np.concatenate([b, h])
    cones = []
    if E.shape[0]:
        cones.append(clarabel.ZeroConeT(E.shape[0]))
    if G.shape[0]:
        cones.append(clarabel.NonnegativeConeT(G.shape[0]))
    P = sp.triu(sp.csc_matrix(Q), format="csc")
    if A.shape[0] == 0:
        # Clarabel needs at least one row; a vacuous 0 <= 1 keeps the contract.
        A = np.zeros((1, nx))
        rhs = np.ones(1)
        cones = [clarabel.NonnegativeConeT(1)]
        G, h = A, rhs
    solver = clarabel.DefaultSolver(P, q, sp.csc_matrix(A), rhs, cones, _settings(max_iter))
    sol = solver.solve()
    x = np.asarray(sol.x, dtype=float)
    z = np.asarray(sol.z, dtype=float)
    me = E.shape[0]
    mu, lam = z[:me], z[me:]

    st = sol.status
    if st == clarabel.SolverStatus.PrimalInfeasible or st == clarabel.SolverStatus.AlmostPrimalInfeasible:
        return SolveReport(Status.INFEASIBLE, x, np.inf, iterations=sol.iterations)
    if st == clarabel.SolverStatus.DualInfeasible or st == clarabel.SolverStatus.AlmostDualInfeasible:
        return SolveReport(Status.UNBOUNDED, x, -np.inf, iterations=sol.iterations)

    pinf, dinf = kkt_residuals(Q, q, G, h, E, b, x, lam, mu)
    objective = float(0.5 * x @ Q @ x + q @ x)
    solved = st == clarabel.SolverStatus.Solved or st == clarabel.SolverStatus.AlmostSolved
    status = Status.OPTIMAL if solved and pinf <= KKT_TOL and dinf <= KKT_TOL else Status.ITER_LIMIT
    return SolveReport(status, x, objective, pinf, dinf, sol.iterations, lam, mu)


def kkt_residuals(Q, q, G, h, E, b, x, lam, mu):
    """Scaled primal infeasibility and stationarity residuals."""
    viol = [0.0]
    if G.shape[0]:
        viol.append(np.max(G @ x - h))
    if E.shape[0]:
        viol.append(np.max(np.abs(E @ x - b)))
    bnd = max([1.0] + [np.abs(v).max() for v in (h, b) if v.size])
    pinf = max(viol) / bnd
    Qx = Q @ x
    Atz = G.T @ lam + E.T @ mu
    grad = Qx + q + Atz
    scale = 1.0 + max(np.abs(Qx).max(initial=0.0), np.abs(q).max(initial=0.0), np.abs(Atz).max(initial=0.0))
    return float(pinf), float(np.abs(grad).max(initial=0.0) / scale)


def solve_qp(p: QpProblem, max_iter: int = 200) -> SolveReport:
    _check_finite(p.Q, p.q, p.G, p.h, p.E, p.b)
    check_psd(p.Q)
    return _solve(p.Q, p.q, p.G, p.h, p.E, p.b, max_iter)


def solve_lp(c, G=None, h=None, E=None, b=None, max_iter: int = 200) -> SolveReport:
    c = np.asarray(c, dtype=float).ravel()
    nx = c.size
    G, h = _rows(G, h, nx, "G/h")
    E, b = _rows(E, b, nx, "E/b")
    _check_finite(c, G, h, E, b)
    return _solve(np.zeros((nx, nx)), c, G, h, E, b, max_iter)
