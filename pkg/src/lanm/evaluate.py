"""Recovery metrics and per-node identifiability verdicts."""

from __future__ import annotations

import csv
import itertools
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

from .model import LanmModel, mask_values

AFFINE_R = 0.8
AFFINE_R2 = 0.8
MONOTONE_RHO = 0.9
EDGE_TAU = 0.1

IDENTIFIED_AFFINE = "IDENTIFIED-AFFINE"
IDENTIFIED_MONOTONE = "IDENTIFIED-MONOTONE"
NOT_IDENTIFIED = "NOT-IDENTIFIED"


class MetricError(ValueError):
    pass


def _check_columns(z, name):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z.reshape(-1, 1)
    if z.shape[0] < 3:
        raise MetricError(f"{name}: need at least 3 rows, got {z.shape[0]}")
    sd = z.std(axis=0)
    for j in np.flatnonzero(sd == 0):
        raise MetricError(f"{name}: column {j + 1} is constant")
    return z


def abs_corr_matrix(z_true, z_est) -> np.ndarray:
    """``|pearson(z_true[:, i], z_est[:, j])|`` as an ``ell x ell`` matrix."""
    a = z_true - z_true.mean(axis=0)
    b = z_est - z_est.mean(axis=0)
    a = a / np.linalg.norm(a, axis=0)
    b = b / np.linalg.norm(b, axis=0)
    return np.clip(np.abs(a.T @ b), 0.0, 1.0)


def brute_force_assignment(score: np.ndarray):
    """Exhaustive maximum-score permutation; reference for small ``ell``."""
    k = score.shape[0]
    best, best_perm = -np.inf, None
    for perm in itertools.permutations(range(k)):
        total = score[np.arange(k), perm].sum()
        if total > best:
            best, best_perm = total, perm
    return np.array(best_perm), best


def optimal_assignment(score: np.ndarray) -> np.ndarray:
    """Permutation ``p`` maximising ``sum_i score[i, p[i]]`` (Hungarian method)."""
    rows, cols = linear_sum_assignment(score, maximize=True)
    perm = np.empty(score.shape[0], dtype=np.int64)
    perm[rows] = cols
    return perm


def mpc(z_true, z_est):
    """Mean matched absolute Pearson correlation.

    Returns ``(mpc, assignment, per_node_r)``; ``assignment[i]`` is the
    estimated column matched to true column ``i``.
    """
    z_true = _check_columns(z_true, "z_true")
    z_est = _check_columns(z_est, "z_est")
    if z_true.shape != z_est.shape:
        raise MetricError(f"shape mismatch {z_true.shape} vs {z_est.shape}")
    C = abs_corr_matrix(z_true, z_est)
    perm = optimal_assignment(C)
    r = C[np.arange(C.shape[0]), perm]
    return float(r.mean()), perm, r


def _binary(A, name):
    A = np.asarray(A)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise MetricError(f"{name} must be square")
    if not np.isin(A, (0, 1)).all():
        raise MetricError(f"{name} has a non-binary entry")
    if np.any(np.diag(A)):
        raise MetricError(f"{name} has a self-loop")
    return A.astype(np.int64)


def shd(adj_true, adj_est) -> int:
    """Structural Hamming distance: one per node pair whose edge status differs.

    Additions, deletions and reversals each count once.
    """
    A = _binary(adj_true, "adj_true")
    B = _binary(adj_est, "adj_est")
    if A.shape != B.shape:
        raise MetricError(f"shape mismatch {A.shape} vs {B.shape}")
    count = 0
    for i, j in itertools.combinations(range(A.shape[0]), 2):
        if (A[i, j], A[j, i]) != (B[i, j], B[j, i]):
            count += 1
    return count


def mask_strength(model: LanmModel, segments=None) -> np.ndarray:
    """Mean ``|m_i(u)_j|`` over the given segments, as ``ell x ell`` (parent, child)."""
    c = model.config
    segs = np.arange(c.u_dim) if segments is None else np.asarray(segments)
    u = np.eye(c.u_dim)[segs]
    S = np.zeros((c.ell, c.ell))
    for i, m in enumerate(mask_values(model, u)):
        if m is not None:
            S[:i, i] = np.abs(m).mean(axis=0)
    return S


def extract_adjacency(model: LanmModel, assignment=None, tau: float = EDGE_TAU, segments=None) -> np.ndarray:
    """Edges ``j -> i`` where mean ``|m_i(u)_j|`` exceeds ``tau``.

    With ``assignment`` (true node -> estimated node, from :func:`mpc`) the
    result is expressed in true-node labels.
    """
    if not tau > 0:
        raise MetricError("tau must be positive")
    A = (mask_strength(model, segments) > tau).astype(np.int64)
    if assignment is None:
        return A
    perm = np.asarray(assignment)
    return A[np.ix_(perm, perm)]


def affine_fit(z_true_col, z_est_col):
    """Least squares ``z_true = s * z_est + c``; returns ``(s, c, r2)``."""
    y = np.asarray(z_true_col, dtype=np.float64).ravel()
    x = np.asarray(z_est_col, dtype=np.float64).ravel()
    if y.size < 3:
        raise MetricError("need at least 3 rows")
    vx = x.var()
    vy = y.var()
    if vx == 0 or vy == 0:
        raise MetricError("degenerate variance")
    s = float(np.mean((x - x.mean()) * (y - y.mean())) / vx)
    c = float(y.mean() - s * x.mean())
    resid = y - (s * x + c)
    r2 = float(1.0 - resid.var() / vy)
    return s, c, r2


def rank_identifiability(z_true_col, z_est_col) -> float:
    """``|spearman rho|`` with average ranks for ties."""
    a = np.asarray(z_true_col, dtype=np.float64).ravel()
    b = np.asarray(z_est_col, dtype=np.float64).ravel()
    if a.size < 3:
        raise MetricError("need at least 3 rows")
    ra, rb = rankdata(a), rankdata(b)
    if ra.std() == 0 or rb.std() == 0:
        raise MetricError("degenerate variance")
    return float(abs(np.corrcoef(ra, rb)[0, 1]))


@dataclass
class Thresholds:
    affine_r: float = AFFINE_R
    affine_r2: float = AFFINE_R2
    monotone_rho: float = MONOTONE_RHO
    tau: float = EDGE_TAU


def verdict(r: float, r2: float, rho: float | None, th: Thresholds) -> str:
    if r >= th.affine_r and r2 >= th.affine_r2:
        return IDENTIFIED_AFFINE
    if rho is not None and rho >= th.monotone_rho:
        return IDENTIFIED_MONOTONE
    return NOT_IDENTIFIED


@dataclass
class EvalReport:
    mpc: float
    assignment: list  # true node (1-based order) -> estimated node, 1-based
    r: list
    r2: list
    rho: list | None
    verdicts: list
    thresholds: dict
    adjacency: list | None = None
    adjacency_true: list | None = None
    shd: int | None = None
    partition: dict | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def rows(self):
        for i in range(len(self.r)):
            yield {
                "node": i + 1,
                "estimated": self.assignment[i],
                "r": self.r[i],
                "r2": self.r2[i],
                "rho": None if self.rho is None else self.rho[i],
                "verdict": self.verdicts[i],
            }

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["node", "estimated", "r", "r2", "rho", "verdict"])
            w.writeheader()
            for row in self.rows():
                w.writerow(row)


def evaluate_latents(z_true, z_est, pnl: bool = False, thresholds: Thresholds | None = None) -> EvalReport:
    """MPC, matched affine fits, optional Spearman and per-node verdicts."""
    th = thresholds or Thresholds()
    z_true = _check_columns(z_true, "z_true")
    z_est = _check_columns(z_est, "z_est")
    score, perm, r = mpc(z_true, z_est)
    r2, rho = [], [] if pnl else None
    for i, j in enumerate(perm):
        r2.append(affine_fit(z_true[:, i], z_est[:, j])[2])
        if pnl:
            rho.append(rank_identifiability(z_true[:, i], z_est[:, j]))
    verdicts = [verdict(r[i], r2[i], None if rho is None else rho[i], th) for i in range(len(r))]
    return EvalReport(
        mpc=score,
        assignment=[int(j) + 1 for j in perm],
        r=[float(v) for v in r],
        r2=r2,
        rho=rho,
        verdicts=verdicts,
        thresholds=asdict(th),
    )


def partition_report(verdicts, violation_nodes) -> dict:
    """Cross-tabulate verdicts against violation status (nodes 1-based)."""
    violated = set(violation_nodes)
    table = {"satisfied": {}, "violated": {}}
    nodes = {"satisfied": [], "violated": []}
    for i, v in enumerate(verdicts, start=1):
        key = "violated" if i in violated else "satisfied"
        table[key][v] = table[key].get(v, 0) + 1
        nodes[key].append({"node": i, "verdict": v})
    agree = sum(
        1
        for i, v in enumerate(verdicts, start=1)
        if (i in violated) == (v == NOT_IDENTIFIED)
    )
    return {"counts": table, "nodes": nodes, "agreement": agree / max(len(verdicts), 1)}
