import numpy as np
import pytest

from smpc import numerics
from smpc.controller import assemble_cost, build_full_feedback_qp, build_reduced_qp
from smpc.feature import build_feature_map, factor_kron_svd, reduce_constraints
from smpc.lane import LaneScenario, build_artifact
from smpc.model import DisturbanceSpec, LtiModel, sample_scenarios
from smpc.stacker import build_stacked, residuals

# criterion id -> (passed, detail); filled by test_acceptance and printed at the end of the run
ACCEPTANCE = {}


def random_model(rng, n=None, m=None, N=None, nc=None, loose=False):
    """Small random LTI model with box-like constraints."""
    n = n or int(rng.integers(1, 5))
    m = m or int(rng.integers(1, 3))
    N = N or int(rng.integers(1, 6))
    nc = nc or int(rng.integers(1, 4))
    A = rng.normal(size=(n, n))
    A *= 0.9 / max(1.0, np.abs(np.linalg.eigvals(A)).max())
    B = rng.normal(size=(n, m))
    C = rng.normal(size=(nc, n))
    big = 50.0 if loose else 5.0
    d = rng.uniform(1.0, 2.0, size=nc) * big
    Hu = np.vstack([np.eye(m), -np.eye(m)])
    hu = np.full(2 * m, big)
    return LtiModel(A, B, C, d, Hu, hu, N)


def random_stacked(rng, n_samples=None, **kw):
    model = random_model(rng, **kw)
    n_samples = n_samples or int(rng.integers(1, 21))
    spec = DisturbanceSpec(-np.ones(model.n) * 0.3, np.ones(model.n) * 0.3, int(rng.integers(1 << 31)))
    scen = sample_scenarios(spec, model, n_samples)
    return model, scen, build_stacked(model, scen)


def random_causal_y(rng, layout):
    y = rng.normal(size=layout.dim)
    y[layout.causal_zero] = 0.0
    return y


def truncation_case(seed):
    """Solve one random sampled program in full and reduced form.

    Returns (full objective, reduced objective, max reconstructed residual).
    """
    r = np.random.default_rng(seed)
    model, scen, sp = random_stacked(r, n=int(r.integers(1, 5)), N=int(r.integers(1, 6)),
                                     n_samples=int(r.integers(1, 21)), loose=True)
    x_ref = r.normal(size=model.n) * 40.0
    cost = assemble_cost(model, np.eye(model.n), 0.1 * np.eye(model.m), x_ref)
    x0 = r.normal(size=model.n)
    fm = build_feature_map(*factor_kron_svd(sp), sp.layout, sp.factors.C_blk)
    rc = reduce_constraints(fm, sp)
    full = build_full_feedback_qp(model, scen.W, cost, x0, sp.factors)
    red = build_reduced_qp(rc, cost, x0)
    rf, rr = numerics.solve_qp(full.qp), numerics.solve_qp(red.qp)
    assert rf.optimal and rr.optimal, (rf.status, rr.status)
    nf = red.y_cols.size
    y = fm.recon @ rr.primal[:nf]
    res = residuals(sp, y, rr.primal[nf:], x0)
    return rf.objective + full.const, rr.objective + red.const, float(res.max())


@pytest.fixture(scope="session")
def lane_offline():
    """Offline result for the default lane-keeping setup."""
    return build_artifact(LaneScenario())


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
