"""Probabilistic scaling of a box in feature space.

The decision vector is ``z = [f; v; xi]``: feature coordinates of the gains,
nominal inputs, and the initial state expressed in the coordinates the
constraints can see (``xi = x_basis' x0``).  A candidate box
``z_c + diag(h) B_inf`` is fitted inside the polytope of a few samples, then
rescaled by an order statistic of per-sample maximal scalings so that it
lies in the chance-constrained set with the requested confidence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from smpc import numerics
from smpc.errors import BoundaryCenter, EmptyCandidateSet, InsufficientSamples, InvalidInput, NonpositiveScaling
from smpc.feature import FeatureMap, ReducedConstraints
from smpc.model import RiskSpec, ScenarioSet, required_gamma_count
from smpc.stacker import BlockFactors


@dataclass(eq=False)
class SampledPolytope:
    """Stacked rows ``G z <= g``; rows of sample ``provenance[j]`` form block j."""

    G: np.ndarray
    g: np.ndarray
    provenance: np.ndarray
    n_row: int

    @property
    def dim(self) -> int:
        return self.G.shape[1]

    def blocks(self):
        S = self.provenance.size
        return self.G.reshape(S, self.n_row, -1), self.g.reshape(S, self.n_row)


def _feature_gain_matrix(fm: FeatureMap) -> np.ndarray:
    return np.eye(fm.n_keep) if fm.basis is None else fm.basis


def polytope_blocks(fm: FeatureMap, rc: ReducedConstraints, rows):
    """Per-sample (G, g) blocks for samples of the truncation set, through A_red."""
    rows = np.asarray(rows)
    f = rc.sp.factors
    Gf = rc.blocks(rows) @ _feature_gain_matrix(fm)
    return _assemble(Gf, f, fm, rc.sp.d_blocks()[rows])


def fresh_polytope_blocks(fm: FeatureMap, factors: BlockFactors, W):
    """Per-sample (G, g) blocks for arbitrary disturbance sequences, through reconstruction.

    The gain part is ``kron(w, K_B) @ recon`` so constraints are those of the
    full causal policy, not of the truncated coordinates.
    """
    W = np.atleast_2d(np.asarray(W, dtype=float))
    lay = fm.layout
    R = fm.recon.reshape(lay.n_blocks, lay.block_size, -1)
    KR = np.einsum("rk,lkf->lrf", factors.K_B, R)
    Gf = np.einsum("jl,lrf->jrf", W, KR)
    d = W @ factors.D_map.T - factors.d_stack
    return _assemble(Gf, factors, fm, d)


def _assemble(Gf, f: BlockFactors, fm: FeatureMap, d_blocks):
    S, n_row = d_blocks.shape
    Gv = np.broadcast_to(f.B_blk, (S, *f.B_blk.shape))
    Cx = f.C_blk @ fm.x_basis
    Gx = np.broadcast_to(Cx, (S, *Cx.shape))
    G = np.concatenate([Gf, Gv, Gx], axis=2)
    return G, -d_blocks


def sampled_polytope(fm: FeatureMap, rc: ReducedConstraints, rows) -> SampledPolytope:
    rows = np.asarray(rows)
    G, g = polytope_blocks(fm, rc, rows)
    return SampledPolytope(G.reshape(-1, G.shape[2]), g.ravel(), rows, G.shape[1])


def chebyshev_center(poly_G, poly_g=None):
    """Center and radius of the largest Euclidean ball inside ``G z <= g``.

    Accepts a SampledPolytope or a bare (G, g) pair.
    """
    if isinstance(poly_G, SampledPolytope):
        G, g = poly_G.G, poly_G.g
    else:
        G, g = np.asarray(poly_G, dtype=float), np.asarray(poly_g, dtype=float)
    norms = np.linalg.norm(G, axis=1)
    nz = G.shape[1]
    Glp = np.hstack([G, norms[:, None]])
    Glp = np.vstack([Glp, np.r_[np.zeros(nz), -1.0]])
    glp = np.r_[g, 0.0]
    c = np.r_[np.zeros(nz), -1.0]
    rep = numerics.solve_lp(c, Glp, glp)
    if rep.status is numerics.Status.UNBOUNDED:
        raise EmptyCandidateSet("sampled polytope is unbounded; no finite Chebyshev ball")
    if not rep.optimal:
        raise EmptyCandidateSet(f"Chebyshev LP returned {rep.status.value}")
    radius = rep.primal[-1]
    if radius <= 1e-9:
        raise EmptyCandidateSet(f"sampled polytope has empty interior (radius {radius:.2e})")
    return rep.primal[:nz], float(radius)


def fit_shape(poly_G, z_c, poly_g=None, tol: float = 1e-11, max_iter: int = 200) -> np.ndarray:
    """Diagonal of the largest-volume box ``z_c + diag(h) B_inf`` inside the polytope.

    Maximizes ``sum(log h)`` subject to ``G z_c + |G| h <= g`` with a
    primal-dual interior point iteration.
    """
    if isinstance(poly_G, SampledPolytope):
        G, g = poly_G.G, poly_G.g
    else:
        G, g = np.asarray(poly_G, dtype=float), np.asarray(poly_g, dtype=float)
    A = np.abs(G)
    s = g - G @ z_c
    live = A.max(axis=1) > 0.0
    if np.any(s[~live] < 0.0):
        raise BoundaryCenter("center violates a constraint with no dependence on z")
    A, s = A[live], s[live]
    if np.any(s <= 0.0):
        raise BoundaryCenter(f"center is not strictly interior (min slack {s.min():.2e})")
    if np.any(A.max(axis=0, initial=0.0) == 0.0):
        raise InvalidInput("a coordinate is unconstrained; the box volume is unbounded")

    # row scaling keeps the iteration well conditioned
    A = A / s[:, None]
    s = np.ones_like(s)
    m = A.shape[0]
    h = np.full(A.shape[1], 0.5 / A.sum(axis=1).max())
    t = s - A @ h
    lam = 1.0 / (t * m) * A.shape[1]
    for _ in range(max_iter):
        r_d = -1.0 / h + A.T @ lam
        gap = lam @ t
        if gap <= tol * A.shape[1] and np.abs(r_d * h).max() <= tol:
            break
        mu = 0.1 * gap / m
        r_c = lam * t - mu
        Hm = np.diag(1.0 / h**2) + (A.T * (lam / t)) @ A
        rhs = -r_d + A.T @ (r_c / t)
        dh = np.linalg.solve(Hm, rhs)
        dt = -A @ dh
        dlam = (-r_c - lam * dt) / t
        alpha = 1.0
        for x, dx in ((h, dh), (t, dt), (lam, dlam)):
            neg = dx < 0
            if np.any(neg):
                alpha = min(alpha, 0.99 * np.min(-x[neg] / dx[neg]))
        h = h + alpha * dh
        t = s - A @ h
        lam = lam + alpha * dlam
    return h


def gamma_of_sample(z_c, h, G_w, g_w) -> float:
    """Largest gamma with ``z_c + gamma diag(h) B_inf`` inside ``G_w z <= g_w``."""
    return float(gammas_of_blocks(z_c, h, np.asarray(G_w)[None], np.asarray(g_w)[None])[0])


def gammas_of_blocks(z_c, h, G, g) -> np.ndarray:
    """Vectorized maximal scalings for per-sample blocks ``G (S, rows, dim)``, ``g (S, rows)``.

    Rows with zero spread are vacuous (+inf) when satisfied at the center and
    make the sample unsatisfiable (-inf) otherwise.
    """
    num = g - G @ z_c
    den = np.abs(G) @ h
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(den > 0.0, num / den, np.where(num >= 0.0, np.inf, -np.inf))
    return ratio.min(axis=1)


def discard_index(n_gamma: int, epsilon: float) -> int:
    return max(1, math.floor(n_gamma * epsilon / 2.0 + 1e-9))


def select_gamma_star(gammas, risk: RiskSpec, check_count: bool = True):
    """The r-th smallest gamma (1-indexed), r = floor(N_gamma eps / 2)."""
    gammas = np.asarray(gammas, dtype=float).ravel()
    need = required_gamma_count(risk)
    if check_count and gammas.size < need:
        raise InsufficientSamples(f"{gammas.size} gamma samples < required {need}")
    r = discard_index(gammas.size, risk.epsilon)
    if r > gammas.size:
        raise InsufficientSamples("discard index exceeds sample count")
    gamma_star = float(np.sort(gammas, kind="stable")[r - 1])
    if not gamma_star > 0.0:
        raise NonpositiveScaling(f"selected scaling {gamma_star:.3e} is not positive")
    return gamma_star, r


@dataclass(eq=False)
class ScaledFeasibleSet:
    """``S = z_c + gamma_star diag(h) B_inf`` over ``z = [f; v; xi]``."""

    z_c: np.ndarray
    h: np.ndarray
    gamma_star: float
    dims: dict
    risk: RiskSpec
    n_gamma: int
    r: int
    gammas: np.ndarray = field(repr=False)
    radius: float = 0.0

    @property
    def h_inv(self) -> np.ndarray:
        return 1.0 / self.h

    @property
    def lower(self) -> np.ndarray:
        return self.z_c - self.gamma_star * self.h

    @property
    def upper(self) -> np.ndarray:
        return self.z_c + self.gamma_star * self.h

    def slice(self, name) -> slice:
        a, b = self.dims[name]
        return slice(a, b)

    def contains(self, z, tol: float = 0.0) -> bool:
        return bool(np.all(np.abs(self.h_inv * (np.asarray(z) - self.z_c)) <= self.gamma_star * (1.0 + tol)))

    def sample(self, rng, count: int) -> np.ndarray:
        u = rng.uniform(-1.0, 1.0, size=(count, self.z_c.size))
        return self.z_c + self.gamma_star * self.h * u


def z_dims(fm: FeatureMap, dim_v: int) -> dict:
    nf, nx = fm.n_feature, fm.x_basis.shape[1]
    return {"feature": (0, nf), "v": (nf, nf + dim_v), "x0": (nf + dim_v, nf + dim_v + nx)}


def candidate_set(fm: FeatureMap, rc: ReducedConstraints, rows):
    """Chebyshev center and volume-maximal diagonal box for the samples ``rows``."""
    poly = sampled_polytope(fm, rc, rows)
    z_c, radius = chebyshev_center(poly)
    h = fit_shape(poly, z_c)
    return z_c, h, radius


def build_scaled_set(
    fm: FeatureMap,
    rc: ReducedConstraints,
    risk: RiskSpec,
    gamma_rows,
    z_c,
    h,
    scen_gamma: ScenarioSet | None = None,
    allow_foreign: bool = False,
    radius: float = 0.0,
) -> ScaledFeasibleSet:
    """Scale the candidate box by the order statistic of per-sample gammas.

    By default gammas come from rows ``gamma_rows`` of the truncation scenario
    set.  A separate ``scen_gamma`` must carry the same provenance unless
    ``allow_foreign`` is set.
    """
    if scen_gamma is None:
        G, g = polytope_blocks(fm, rc, gamma_rows)
    else:
        own = rc.sp.scen
        if not allow_foreign and (scen_gamma.spec_hash != own.spec_hash or scen_gamma.seed != own.seed):
            raise InvalidInput("gamma samples do not come from the truncation scenario set")
        G, g = fresh_polytope_blocks(fm, rc.sp.factors, scen_gamma.W)
    gammas = gammas_of_blocks(z_c, h, G, g)
    gamma_star, r = select_gamma_star(gammas, risk)
    return ScaledFeasibleSet(
        z_c=np.asarray(z_c, dtype=float), h=np.asarray(h, dtype=float), gamma_star=gamma_star,
        dims=z_dims(fm, rc.sp.dim_v), risk=risk, n_gamma=gammas.size, r=r, gammas=gammas, radius=radius,
    )
