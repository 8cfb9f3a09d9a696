"""Scenario-stacked constraint system ``A_bar y + B_bar v + C_bar x0 + d_bar <= 0``.

Row order inside one scenario block: state constraints for x1..x_{N+1}
(``nc`` rows each), then input constraints for u0..uN (``ncu`` rows each).

The gain vector y is grouped by scalar disturbance component: block
``l = i*n + c`` holds column c of the gains acting on w_i,
``[M[1,i][:, c]; ...; M[N,i][:, c]]``.  M[0, .] never exists (u0 has no
feedback), so y has ``n(N+1) * N * m`` entries and the gain-to-constraint
factor ``K_B`` has N block columns, one per input u1..uN.  With this layout
the scenario block of A_bar is exactly ``kron(w_row, K_B)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from smpc.errors import InvalidInput
from smpc.model import LtiModel, Policy, ScenarioSet


@dataclass(frozen=True)
class GainLayout:
    """Flat y index -> (input step k, disturbance step i, input row a, state column c)."""

    N: int
    n: int
    m: int

    @property
    def n_blocks(self) -> int:
        return self.n * (self.N + 1)

    @property
    def block_size(self) -> int:
        return self.N * self.m

    @property
    def dim(self) -> int:
        return self.n_blocks * self.block_size

    def index(self, k, i, a, c):
        if not 1 <= k <= self.N:
            raise IndexError(f"input step {k} carries no feedback")
        return (i * self.n + c) * self.block_size + (k - 1) * self.m + a

    @cached_property
    def coords(self) -> np.ndarray:
        """(dim, 4) array of (k, i, a, c) for each flat index."""
        l, rest = np.divmod(np.arange(self.dim), self.block_size)
        i, c = np.divmod(l, self.n)
        kk, a = np.divmod(rest, self.m)
        return np.stack([kk + 1, i, a, c], axis=1)

    @cached_property
    def causal_zero(self) -> np.ndarray:
        """Boolean mask of entries M[k, i] with i >= k (gain on a future disturbance)."""
        k, i = self.coords[:, 0], self.coords[:, 1]
        return i >= k

    def to_policy(self, y, v) -> Policy:
        y = np.asarray(y, dtype=float).ravel()
        gains = np.zeros((self.N + 1, self.N + 1, self.m, self.n))
        k, i, a, c = self.coords.T
        gains[k, i, a, c] = y
        gains[np.arange(self.N + 1)[:, None] <= np.arange(self.N + 1)[None, :]] = 0.0
        return Policy(gains, np.asarray(v, dtype=float).reshape(self.N + 1, self.m))

    def from_gains(self, gains) -> np.ndarray:
        k, i, a, c = self.coords.T
        y = np.asarray(gains, dtype=float)[k, i, a, c].copy()
        y[self.causal_zero] = 0.0
        return y


@dataclass(frozen=True, eq=False)
class BlockFactors:
    K_B: np.ndarray
    B_blk: np.ndarray
    C_blk: np.ndarray
    D_map: np.ndarray
    d_stack: np.ndarray
    layout: GainLayout


def build_block_factors(model: LtiModel) -> BlockFactors:
    N, n, m, nc, ncu = model.N, model.n, model.m, model.nc, model.ncu
    A, B, C, Hu = model.A, model.B, model.C, model.Hu
    # CA^p for p = 0..N+1
    CA = [C]
    for _ in range(N + 1):
        CA.append(CA[-1] @ A)
    ns = (N + 1) * nc
    n_row = model.n_row

    K_B = np.zeros((n_row, N * m))
    B_blk = np.zeros((n_row, (N + 1) * m))
    C_blk = np.zeros((n_row, n))
    D_map = np.zeros((n_row, (N + 1) * n))
    for r in range(N + 1):  # state row block r constrains x_{r+1}
        rows = slice(r * nc, (r + 1) * nc)
        C_blk[rows] = CA[r + 1]
        for k in range(r + 1):
            B_blk[rows, k * m:(k + 1) * m] = CA[r - k] @ B
            D_map[rows, k * n:(k + 1) * n] = CA[r - k]
            if k >= 1:
                K_B[rows, (k - 1) * m:k * m] = CA[r - k] @ B
    for k in range(N + 1):  # input row block k constrains u_k
        rows = slice(ns + k * ncu, ns + (k + 1) * ncu)
        B_blk[rows, k * m:(k + 1) * m] = Hu
        if k >= 1:
            K_B[rows, (k - 1) * m:k * m] = Hu
    d_stack = np.concatenate([np.tile(model.d, N + 1), np.tile(model.hu, N + 1)])
    return BlockFactors(K_B, B_blk, C_blk, D_map, d_stack, GainLayout(N, n, m))


@dataclass(frozen=True, eq=False)
class StackedProblem:
    """Factor-form stacked constraints; dense matrices are materialized on demand."""

    factors: BlockFactors
    scen: ScenarioSet

    @property
    def W(self) -> np.ndarray:
        return self.scen.W

    @property
    def n_samples(self) -> int:
        return self.W.shape[0]

    @property
    def n_row(self) -> int:
        return self.factors.K_B.shape[0]

    @property
    def layout(self) -> GainLayout:
        return self.factors.layout

    @property
    def dim_y(self) -> int:
        return self.layout.dim

    @property
    def dim_v(self) -> int:
        return self.factors.B_blk.shape[1]

    def A_bar(self) -> np.ndarray:
        """Dense (N_s n_row) x dim_y matrix; test-sized instances only."""
        return np.vstack([np.kron(w[None, :], self.factors.K_B) for w in self.W])

    def B_bar(self) -> np.ndarray:
        return np.tile(self.factors.B_blk, (self.n_samples, 1))

    def C_bar(self) -> np.ndarray:
        return np.tile(self.factors.C_blk, (self.n_samples, 1))

    def d_blocks(self) -> np.ndarray:
        """(N_s, n_row) array whose row j is D_map w_j - d_stack."""
        return self.W @ self.factors.D_map.T - self.factors.d_stack

    def d_bar(self) -> np.ndarray:
        return self.d_blocks().ravel()

    def gain_blocks(self, y) -> np.ndarray:
        """(N_s, n_row) array of A_bar y, computed without forming A_bar."""
        Y = np.asarray(y, dtype=float).reshape(self.layout.n_blocks, self.layout.block_size)
        return self.W @ (self.factors.K_B @ Y.T).T

    def residual_blocks(self, y, v, x0) -> np.ndarray:
        f = self.factors
        common = f.B_blk @ np.asarray(v, dtype=float).ravel() + f.C_blk @ np.asarray(x0, dtype=float).ravel()
        return self.gain_blocks(y) + common + self.d_blocks()


def build_stacked(model: LtiModel, scen: ScenarioSet, factors: BlockFactors | None = None) -> StackedProblem:
    if scen.W.shape[1] != model.n * (model.N + 1):
        raise InvalidInput(f"scenario width {scen.W.shape[1]} != n(N+1) = {model.n * (model.N + 1)}")
    return StackedProblem(factors or build_block_factors(model), scen)


def residuals(sp: StackedProblem, y, v, x0) -> np.ndarray:
    """``A_bar y + B_bar v + C_bar x0 + d_bar``, flattened sample by sample."""
    y = np.asarray(y, dtype=float).ravel()
    if y.size != sp.dim_y or np.size(v) != sp.dim_v:
        raise InvalidInput("decision vector dimensions do not match the stacked problem")
    return sp.residual_blocks(y, v, x0).ravel()
