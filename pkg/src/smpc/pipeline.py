"""Offline pipeline and the binary artifact container.

Stages: sample -> stack -> factor -> truncate -> candidate set -> gamma
scaling -> serialize.  The artifact is a small container::

    magic  b"SMPCART\\x00"
    u64    header length (little endian)
    header UTF-8 JSON: version, config echo, array table, metadata
    data   little-endian float64 arrays, concatenated in table order
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np

from smpc import feature, scaling, stacker
from smpc.controller import ARTIFACT_VERSION, CostSpec, OnlineArtifact
from smpc.errors import ArtifactVersionError, InsufficientSamples, PipelineAbort
from smpc.feature import FeatureMap
from smpc.model import DisturbanceSpec, LtiModel, RiskSpec, sample_scenarios
from smpc.numerics import SvdFactors
from smpc.scaling import ScaledFeasibleSet
from smpc.stacker import GainLayout

log = logging.getLogger(__name__)

MAGIC = b"SMPCART\x00"

# timing fields are excluded when comparing payloads across runs
TIMING_KEYS = ("stage_seconds", "total_seconds")
STAGES = ("sample", "stack", "factor", "truncate", "candidate_set", "gamma_scaling", "serialize")


@dataclass
class OfflineResult:
    artifact: OnlineArtifact
    stage_seconds: dict = field(default_factory=dict)
    total_seconds: float = 0.0
    stacked: stacker.StackedProblem | None = None
    reduced: feature.ReducedConstraints | None = None


def run_offline(
    model: LtiModel,
    dist: DisturbanceSpec,
    cost: CostSpec,
    risk: RiskSpec,
    n_samples: int,
    n_gamma: int,
    n_ini: int = 200,
    trunc_tol: float = feature.DEFAULT_TOL,
    config: dict | None = None,
) -> OfflineResult:
    """Build the online artifact; n_ini head rows fit the box, the next n_gamma rows scale it."""
    if n_ini + n_gamma > n_samples:
        raise InsufficientSamples(f"n_ini + n_gamma = {n_ini + n_gamma} exceeds N_s = {n_samples}")
    times = {}
    t_all = time.perf_counter()

    def stage(name, fn, *a, **kw):
        t0 = time.perf_counter()
        try:
            out = fn(*a, **kw)
        except PipelineAbort as exc:
            exc.stage = name
            raise
        times[name] = time.perf_counter() - t0
        log.info("stage %-14s %.3fs", name, times[name])
        return out

    scen = stage("sample", sample_scenarios, dist, model, n_samples)
    sp = stage("stack", stacker.build_stacked, model, scen)
    svd_W, svd_K = stage("factor", feature.factor_kron_svd, sp)
    fm = stage("truncate", feature.build_feature_map, svd_W, svd_K, sp.layout, sp.factors.C_blk, trunc_tol)
    rc = feature.reduce_constraints(fm, sp)
    ini_rows = np.arange(n_ini)
    gamma_rows = np.arange(n_ini, n_ini + n_gamma)
    z_c, h, radius = stage("candidate_set", scaling.candidate_set, fm, rc, ini_rows)
    sfs = stage("gamma_scaling", scaling.build_scaled_set, fm, rc, risk, gamma_rows, z_c, h, radius=radius)

    meta = {
        "scenario_digest": scenario_digest(scen.W),
        "spec_hash": scen.spec_hash,
        "n_samples": n_samples,
        "n_ini": n_ini,
        "n_gamma": n_gamma,
        "trunc_tol": trunc_tol,
        "heuristic_truncation": fm.heuristic,
        "rank_W": svd_W.rank,
        "rank_K": svd_K.rank,
        "n_keep": fm.n_keep,
        "dim_y": sp.dim_y,
        "n_feature": fm.n_feature,
        "config": config or {},
    }
    art = OnlineArtifact(model, fm, sfs, cost, ARTIFACT_VERSION, {"scenario_seed": scen.seed}, meta)
    t0 = time.perf_counter()
    blob = encode_artifact(art)
    times["serialize"] = time.perf_counter() - t0
    total = time.perf_counter() - t_all
    art.meta["stage_seconds"] = times
    art.meta["total_seconds"] = total
    art.meta["payload_bytes"] = len(blob)
    return OfflineResult(art, times, total, sp, rc)


def scenario_digest(W) -> str:
    return hashlib.sha256(np.ascontiguousarray(W, dtype="<f8").tobytes()).hexdigest()


# ------------------------------------------------------------------ encode


def _arrays(art: OnlineArtifact) -> dict:
    fm, sfs = art.fm, art.sfs
    arrays = {
        "svd_W.S": fm.svd_W.S, "svd_W.Vt": fm.svd_W.Vt,
        "svd_K.U": fm.svd_K.U, "svd_K.S": fm.svd_K.S, "svd_K.Vt": fm.svd_K.Vt,
        "keep": fm.keep.astype(float), "sigma": fm.sigma, "P": fm.P,
        "causal_zero": fm.causal_zero.astype(float), "P_bar_pinv": fm.P_bar_pinv,
        "range_basis": fm.range_basis, "recon": fm.recon, "x_basis": fm.x_basis,
        "z_c": sfs.z_c, "h": sfs.h, "gammas": sfs.gammas,
        "cost.H": art.cost.H, "cost.q": art.cost.q, "cost.x_ref": art.cost.x_ref,
        "cost.Q_stage": art.cost.Q_stage, "cost.R_stage": art.cost.R_stage,
    }
    if fm.basis is not None:
        arrays["basis"] = fm.basis
    return arrays


def _header(art: OnlineArtifact) -> dict:
    sfs = art.sfs
    return {
        "format": "smpc-artifact",
        "version": art.version,
        "model": art.model.to_dict(),
        "model_digest": art.model.digest(),
        "layout": {"N": art.fm.layout.N, "n": art.fm.layout.n, "m": art.fm.layout.m},
        "svd_rank_tol": art.fm.svd_W.rank_tol,
        "trunc_tol": art.fm.tol,
        "scaled_set": {
            "gamma_star": sfs.gamma_star, "dims": {k: list(v) for k, v in sfs.dims.items()},
            "epsilon": sfs.risk.epsilon, "delta": sfs.risk.delta, "n_gamma": sfs.n_gamma,
            "r": sfs.r, "radius": sfs.radius,
        },
        "cost_c": art.cost.c,
        "seeds": art.seeds,
        "meta": art.meta,
    }


def encode_artifact(art: OnlineArtifact) -> bytes:
    arrays = _arrays(art)
    table, chunks, offset = [], [], 0
    for name, a in arrays.items():
        buf = np.ascontiguousarray(a, dtype="<f8").tobytes()
        table.append({"name": name, "shape": list(np.shape(a)), "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    header = _header(art)
    header["arrays"] = table
    hbytes = json.dumps(header, sort_keys=True, default=_json_default).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(chunks)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


def decode_header(blob: bytes) -> dict:
    if blob[:8] != MAGIC:
        raise ArtifactVersionError("not an smpc artifact (bad magic)")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    return json.loads(blob[16:16 + hlen].decode("utf-8"))


def decode_artifact(blob: bytes) -> OnlineArtifact:
    header = decode_header(blob)
    if header.get("version") != ARTIFACT_VERSION:
        raise ArtifactVersionError(f"artifact version {header.get('version')} != supported {ARTIFACT_VERSION}")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    base = 16 + hlen
    arrays = {}
    for entry in header["arrays"]:
        start = base + entry["offset"]
        a = np.frombuffer(blob[start:start + entry["nbytes"]], dtype="<f8").astype(float)
        arrays[entry["name"]] = a.reshape(entry["shape"])

    model = LtiModel.from_dict(header["model"])
    lay = GainLayout(**header["layout"])
    rank_tol = header["svd_rank_tol"]
    # U_W is N_s-sized and not needed online; an empty placeholder keeps the type
    svd_W = SvdFactors(np.zeros((0, arrays["svd_W.S"].size)), arrays["svd_W.S"], arrays["svd_W.Vt"], rank_tol)
    svd_K = SvdFactors(arrays["svd_K.U"], arrays["svd_K.S"], arrays["svd_K.Vt"], rank_tol)
    causal_zero = arrays["causal_zero"].astype(bool)
    P = arrays["P"]
    fm = FeatureMap(
        svd_W=svd_W, svd_K=svd_K, keep=arrays["keep"].astype(int).reshape(-1, 2), sigma=arrays["sigma"],
        P=P, causal_zero=causal_zero, P_bar=P[:, ~causal_zero], P_bar_pinv=arrays["P_bar_pinv"],
        range_basis=arrays["range_basis"], basis=arrays.get("basis"), recon=arrays["recon"],
        x_basis=arrays["x_basis"], layout=lay, tol=header["trunc_tol"],
    )
    ss = header["scaled_set"]
    sfs = ScaledFeasibleSet(
        z_c=arrays["z_c"], h=arrays["h"], gamma_star=ss["gamma_star"],
        dims={k: tuple(v) for k, v in ss["dims"].items()}, risk=RiskSpec(ss["epsilon"], ss["delta"]),
        n_gamma=ss["n_gamma"], r=ss["r"], gammas=arrays["gammas"], radius=ss["radius"],
    )
    cost = CostSpec(arrays["cost.Q_stage"], arrays["cost.R_stage"], arrays["cost.x_ref"],
                    arrays["cost.H"], arrays["cost.q"], header["cost_c"])
    return OnlineArtifact(model, fm, sfs, cost, header["version"], header["seeds"], header["meta"])


def payload_sections(blob: bytes) -> dict:
    """Header without timing fields, plus the raw array bytes; used for determinism checks."""
    header = decode_header(blob)
    (hlen,) = struct.unpack("<Q", blob[8:16])
    meta = dict(header.get("meta", {}))
    for k in TIMING_KEYS + ("payload_bytes",):
        meta.pop(k, None)
    header["meta"] = meta
    return {"header": json.dumps(header, sort_keys=True), "data": blob[16 + hlen:]}


def atomic_write(path, data: bytes | str):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def store_artifact(art: OnlineArtifact, path):
    atomic_write(path, encode_artifact(art))


def load_artifact(path) -> OnlineArtifact:
    with open(path, "rb") as fh:
        return decode_artifact(fh.read())


def artifact_json(art: OnlineArtifact) -> str:
    """Human-readable export of the artifact (inspection only)."""
    doc = _header(art)
    doc["arrays"] = {k: np.asarray(v).tolist() for k, v in _arrays(art).items()}
    return json.dumps(doc, indent=1, sort_keys=True, default=_json_default)
