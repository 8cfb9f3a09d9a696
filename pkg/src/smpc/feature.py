"""Feature extraction for the disturbance-feedback gains.

``A_bar = kron(W, K_B)`` row block by row block, so its SVD follows from the
SVDs of the two small factors:

    A_bar = (U_W kron U_K) (S_W kron S_K) (V_W' kron V_K').

Coordinates of ``(S_W kron S_K)(V_W' kron V_K') y`` attached to vanishing
singular-value products never reach the constraints and are dropped.  What is
left, ``y_trun = P y``, is the feature feedback policy.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from smpc import numerics
from smpc.errors import RangeError
from smpc.stacker import GainLayout, StackedProblem

log = logging.getLogger(__name__)

DEFAULT_TOL = numerics.RANK_TOL
RANGE_TOL = 1e-8


def factor_kron_svd(sp: StackedProblem, rank_tol: float = numerics.RANK_TOL):
    """Thin SVDs of the scenario matrix W and the gain-to-constraint factor K_B."""
    return numerics.svd(sp.W, rank_tol), numerics.svd(sp.factors.K_B, rank_tol)


def kron_svd_reconstruct(svd_W, svd_K) -> np.ndarray:
    """Dense ``(U_W kron U_K)(S_W kron S_K)(V_W' kron V_K')``, for verification."""
    return np.kron(svd_W.U, svd_K.U) @ np.diag(np.kron(svd_W.S, svd_K.S)) @ np.kron(svd_W.Vt, svd_K.Vt)


def state_basis(C_blk, tol: float = numerics.RANK_TOL) -> np.ndarray:
    """Orthonormal basis of the initial-state directions the constraints can see.

    Coordinate axes are projected onto the row space of ``C_blk`` and
    Gram-Schmidt orthonormalized in order, so the basis is the identity when
    ``C_blk`` has full column rank and axis-like otherwise.
    """
    f = numerics.svd(C_blk, tol)
    Vr = f.Vt[: f.rank].T
    n = C_blk.shape[1]
    if Vr.shape[1] == n:
        return np.eye(n)
    cols = []
    for e in np.eye(n):
        u = Vr @ (Vr.T @ e)
        for q in cols:
            u = u - (q @ u) * q
        nu = np.linalg.norm(u)
        if nu > 1e-8:
            cols.append(u / nu)
        if len(cols) == Vr.shape[1]:
            break
    return np.array(cols).T.reshape(n, len(cols))


@dataclass(eq=False)
class FeatureMap:
    """Truncation ``y_trun = P y`` and its causal right inverse.

    ``basis`` is None when ``P_bar`` (P without causally-zero columns) has full
    row rank; otherwise online feature variables are coefficients ``c`` with
    ``y_trun = basis @ c``.  ``recon`` maps feature coordinates to a full y
    (zeros on the causal index set).
    """

    svd_W: numerics.SvdFactors
    svd_K: numerics.SvdFactors
    keep: np.ndarray          # (K, 2) index pairs (a into W factors, b into K_B factors)
    sigma: np.ndarray         # products S_W[a] * S_K[b] for kept pairs
    P: np.ndarray             # (K, dim_y)
    causal_zero: np.ndarray   # boolean mask over y
    P_bar: np.ndarray         # (K, dim_y - |I|)
    P_bar_pinv: np.ndarray    # minimum-norm right inverse of P_bar on its range
    range_basis: np.ndarray   # orthonormal basis of range(P_bar), (K, r)
    basis: np.ndarray | None
    recon: np.ndarray         # (dim_y, n_feature)
    x_basis: np.ndarray       # (n, r_x) initial-state coordinates seen by constraints
    layout: GainLayout
    tol: float

    @property
    def n_keep(self) -> int:
        return self.keep.shape[0]

    @property
    def n_feature(self) -> int:
        return self.recon.shape[1]

    @property
    def n_aux(self) -> int:
        """Extra coefficient dimension introduced by a rank-deficient P_bar."""
        return 0 if self.basis is None else self.basis.shape[1]

    @property
    def heuristic(self) -> bool:
        """True when nonzero singular values were truncated (no confidence bound carries over)."""
        return self.tol > DEFAULT_TOL

    def feature_to_trun(self, f) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        return f if self.basis is None else self.basis @ f


def _kept_pairs(svd_W, svd_K, tol):
    prod = np.outer(svd_W.S, svd_K.S)
    top = prod.max(initial=0.0)
    if top == 0.0:
        return np.zeros((0, 2), dtype=int), np.zeros(0)
    a, b = np.nonzero(prod > tol * top)
    s = prod[a, b]
    order = np.lexsort((b, a, -s))
    return np.stack([a[order], b[order]], axis=1), s[order]


def build_feature_map(svd_W, svd_K, layout: GainLayout, C_blk, tol: float = DEFAULT_TOL) -> FeatureMap:
    keep, sigma = _kept_pairs(svd_W, svd_K, tol)
    if tol > DEFAULT_TOL:
        log.warning("truncation tolerance %.1e > %.1e: heuristic, no confidence bound", tol, DEFAULT_TOL)
    a, b = keep[:, 0], keep[:, 1]
    # rows sigma_ab * kron(V_W[a], V_K[b]), laid out to match y
    P = (sigma[:, None, None] * svd_W.Vt[a][:, :, None] * svd_K.Vt[b][:, None, :]).reshape(len(a), layout.dim)
    causal_zero = layout.causal_zero
    P_bar = P[:, ~causal_zero]

    if P_bar.size:
        f = numerics.svd(P_bar)
        r = f.rank
        range_basis = f.U[:, :r]
        P_bar_pinv = (f.Vt[:r].T / f.S[:r]) @ f.U[:, :r].T
    else:
        r = 0
        range_basis = np.zeros((P_bar.shape[0], 0))
        P_bar_pinv = np.zeros((P_bar.shape[1], P_bar.shape[0]))
    basis = None if r == P.shape[0] else range_basis

    to_free = P_bar_pinv if basis is None else P_bar_pinv @ basis
    recon = np.zeros((layout.dim, to_free.shape[1]))
    recon[~causal_zero] = to_free

    return FeatureMap(
        svd_W=svd_W, svd_K=svd_K, keep=keep, sigma=sigma, P=P, causal_zero=causal_zero,
        P_bar=P_bar, P_bar_pinv=P_bar_pinv, range_basis=range_basis, basis=basis, recon=recon,
        x_basis=state_basis(C_blk), layout=layout, tol=tol,
    )


def reconstruct_policy(fm: FeatureMap, y_trun) -> np.ndarray:
    """Minimum-norm causal y with ``P y = y_trun``; RangeError if none exists."""
    y_trun = np.asarray(y_trun, dtype=float).ravel()
    ybar = fm.P_bar_pinv @ y_trun
    miss = np.linalg.norm(fm.P_bar @ ybar - y_trun)
    if miss > RANGE_TOL * (1.0 + np.linalg.norm(y_trun)):
        raise RangeError(f"y_trun is outside the causal range of P (residual {miss:.2e})")
    y = np.zeros(fm.layout.dim)
    y[~fm.causal_zero] = ybar
    return y


@dataclass(eq=False)
class ReducedConstraints:
    """``A_red y_trun + B_bar v + C_bar x0 + d_bar <= 0`` with ``A_red = (U_W kron U_K)`` on kept columns."""

    fm: FeatureMap
    sp: StackedProblem

    @property
    def n_cols(self) -> int:
        return self.fm.n_keep

    def blocks(self, rows=None) -> np.ndarray:
        """(n_samples, n_row, K) scenario blocks of A_red for the selected samples."""
        UW = self.fm.svd_W.U if rows is None else self.fm.svd_W.U[rows]
        a, b = self.fm.keep[:, 0], self.fm.keep[:, 1]
        return UW[:, a][:, None, :] * self.fm.svd_K.U[:, b][None, :, :]

    def A_red(self) -> np.ndarray:
        return self.blocks().reshape(-1, self.n_cols)

    def apply(self, y_trun) -> np.ndarray:
        """(N_s, n_row) array of A_red y_trun without materializing A_red."""
        fm = self.fm
        T = np.zeros((fm.svd_W.S.size, fm.svd_K.S.size))
        T[fm.keep[:, 0], fm.keep[:, 1]] = np.asarray(y_trun, dtype=float).ravel()
        return fm.svd_W.U @ (fm.svd_K.U @ T.T).T

    def residual_blocks(self, y_trun, v, x0) -> np.ndarray:
        f = self.sp.factors
        common = f.B_blk @ np.asarray(v, dtype=float).ravel() + f.C_blk @ np.asarray(x0, dtype=float).ravel()
        return self.apply(y_trun) + common + self.sp.d_blocks()

    def residuals(self, y_trun, v, x0) -> np.ndarray:
        return self.residual_blocks(y_trun, v, x0).ravel()


def reduce_constraints(fm: FeatureMap, sp: StackedProblem) -> ReducedConstraints:
    return ReducedConstraints(fm, sp)
