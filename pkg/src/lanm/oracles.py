"""Numeric certificates for the identifiability assumptions.

* :func:`check_assumption_ii` - rank test on natural-parameter differences
  across ``2 ell + 1`` segments.
* :func:`check_assumption_iv` - search for a segment where every parent
  gradient of a node's mechanism vanishes.
* :func:`check_unit_triangular_jacobian` - finite-difference Jacobian of the
  noise-to-latent map.
* :func:`build_counterexample` - two generators that differ in ``z_2`` yet
  produce identical observations.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field

import numpy as np

from .scmgen import (
    Mixing,
    ScmSpec,
    SegmentNoiseParams,
    composed_mechanism,
    latents_from_noise,
    make_mixing,
)

COND_THRESHOLD = 1e8
GRAD_TOL = 1e-6
MAX_SUBSETS = 200
GRID_POINTS = 25
RANDOM_PROBES = 2000
FD_EPS = 1e-5


class PreconditionError(ValueError):
    pass


@dataclass
class AssumptionReport:
    assumption: str
    verdict: str  # "PASS" | "FAIL"
    witness: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)
    node: int | None = None  # 1-based, assumption (iv) only
    reason: str = ""

    @property
    def passed(self) -> bool:
        return self.verdict == "PASS"

    def to_dict(self):
        return asdict(self)


def _fd_step(v):
    return FD_EPS * np.maximum(1.0, np.abs(v))


# ---------------------------------------------------------------------------
# assumption (ii)
# ---------------------------------------------------------------------------


def natural_param_matrix(eta: np.ndarray, subset) -> np.ndarray:
    """Columns ``eta[u_k] - eta[u_0]`` for ``k = 1..2 ell``; ``subset[0]`` is ``u_0``."""
    base = eta[subset[0]]
    return np.column_stack([eta[k] - base for k in subset[1:]])


def check_assumption_ii(params, seed=0, max_subsets: int = MAX_SUBSETS, threshold: float = COND_THRESHOLD):
    """Search (2 ell + 1)-subsets of segments for an invertible difference matrix.

    ``params`` is a :class:`SegmentNoiseParams` or an ``M x 2 ell`` array of
    natural parameters. The first subset tried is the ``2 ell + 1`` segments
    with the most spread-out natural parameters; the rest are random.
    """
    eta = params.natural_params() if isinstance(params, SegmentNoiseParams) else np.atleast_2d(params)
    M, k = eta.shape
    need = k + 1
    tol = {"condition_threshold": threshold, "max_subsets": max_subsets}
    if M < need:
        return AssumptionReport(
            "ii", "FAIL", {"segments": M, "required": need}, tol, reason="insufficient environments"
        )
    rng = np.random.default_rng(seed)
    best_cond, best = np.inf, None
    candidates = []
    if M <= 12:
        candidates = itertools.islice(itertools.combinations(range(M), need), max_subsets)
    else:
        candidates = (sorted(rng.choice(M, size=need, replace=False).tolist()) for _ in range(max_subsets))
    for subset in candidates:
        subset = list(subset)
        L = natural_param_matrix(eta, subset)
        cond = np.linalg.cond(L)
        if np.isfinite(cond) and cond < best_cond:
            best_cond, best = float(cond), subset
            if cond < threshold:
                break
    witness = {"condition_number": best_cond if np.isfinite(best_cond) else None, "segments": best}
    if best_cond < threshold:
        return AssumptionReport("ii", "PASS", witness, tol)
    return AssumptionReport("ii", "FAIL", witness, tol, reason="natural-parameter differences are singular")


# ---------------------------------------------------------------------------
# assumption (iv)
# ---------------------------------------------------------------------------


def probe_grid(samples: np.ndarray, parents, seed=0) -> np.ndarray:
    """Probe points over the 1st-99th percentile box of the parent columns.

    Returns an ``n x ell`` array; only parent columns vary, the rest hold the
    column medians. Up to two parents: 25-point Cartesian grid per parent;
    more: 2,000 uniform random points in the box.
    """
    samples = np.atleast_2d(samples)
    base = np.median(samples, axis=0)
    lo = np.percentile(samples[:, parents], 1, axis=0)
    hi = np.percentile(samples[:, parents], 99, axis=0)
    if len(parents) <= 2:
        axes = [np.linspace(a, b, GRID_POINTS) for a, b in zip(lo, hi)]
        pts = np.array(list(itertools.product(*axes)))
    else:
        rng = np.random.default_rng(seed)
        pts = rng.uniform(lo, hi, size=(RANDOM_PROBES, len(parents)))
    out = np.tile(base, (pts.shape[0], 1))
    out[:, parents] = pts
    return out


def max_parent_gradient(mech, points: np.ndarray, parents, segment: int) -> float:
    """Largest ``|d mech / d z_j|`` over ``points`` and parents, by central differences."""
    labels = np.full(points.shape[0], segment)
    worst = 0.0
    for j in parents:
        h = _fd_step(points[:, j])
        plus, minus = points.copy(), points.copy()
        plus[:, j] += h
        minus[:, j] -= h
        grad = (mech(plus, labels) - mech(minus, labels)) / (2.0 * h)
        worst = max(worst, float(np.max(np.abs(grad))))
    return worst


def check_assumption_iv(
    spec: ScmSpec,
    coeffs: np.ndarray,
    node: int,
    points: np.ndarray,
    grad_tol: float = GRAD_TOL,
    mechanism=None,
    parents=None,
) -> AssumptionReport:
    """Look for a segment where the mechanism of ``node`` (0-based) is flat.

    The default mechanism is the violation-composed one, so a node rewritten as
    ``z_i + z_{i-1}`` keeps a segment-invariant parent term and fails. Only the
    segments present in ``coeffs`` are searched.
    """
    if parents is None:
        parents = spec.effective_parents(node)
    tol = {"grad_tol": grad_tol, "fd_eps": FD_EPS, "probe_points": int(points.shape[0])}
    if not parents:
        return AssumptionReport("iv", "PASS", {}, tol, node=node + 1, reason="vacuous PASS (root)")
    if mechanism is None:

        def mechanism(z, labels):
            return composed_mechanism(spec, coeffs, node, z, labels)

    per_segment = [max_parent_gradient(mechanism, points, parents, s) for s in range(coeffs.shape[0])]
    best = int(np.argmin(per_segment))
    witness = {
        "segment": best,
        "max_parent_gradient": per_segment[best],
        "parents": [p + 1 for p in parents],
        "scope": "observed segments only",
    }
    if per_segment[best] <= grad_tol:
        return AssumptionReport("iv", "PASS", witness, tol, node=node + 1)
    return AssumptionReport(
        "iv", "FAIL", witness, tol, node=node + 1, reason="no observed segment removes the parent influence"
    )


def check_all_iv(spec: ScmSpec, coeffs, z_samples, grad_tol: float = GRAD_TOL):
    """Assumption (iv) report for every node, probing the empirical parent ranges."""
    reports = []
    for i in range(spec.ell):
        parents = spec.effective_parents(i)
        pts = probe_grid(z_samples, parents) if parents else np.zeros((1, spec.ell))
        reports.append(check_assumption_iv(spec, coeffs, i, pts, grad_tol))
    return reports


# ---------------------------------------------------------------------------
# Jacobian of n -> z
# ---------------------------------------------------------------------------


def noise_jacobian(spec: ScmSpec, coeffs, point: np.ndarray, segment: int) -> np.ndarray:
    """Central-difference ``d z / d n`` at one noise vector."""
    ell = spec.ell
    J = np.empty((ell, ell))
    lab = np.array([segment])
    for j in range(ell):
        h = _fd_step(point[j])
        plus, minus = point.copy(), point.copy()
        plus[j] += h
        minus[j] -= h
        zp = latents_from_noise(spec, coeffs, plus[None, :], lab)[0]
        zm = latents_from_noise(spec, coeffs, minus[None, :], lab)[0]
        J[:, j] = (zp - zm) / (2.0 * h)
    return J


@dataclass
class JacobianReport:
    passed: bool
    max_upper: float
    max_diag_dev: float
    max_det_dev: float
    points: int
    tol: float = 1e-6

    def to_dict(self):
        return asdict(self)


def check_unit_triangular_jacobian(spec: ScmSpec, coeffs, segment: int, points, tol: float = 1e-6) -> JacobianReport:
    if spec.pnl is not None and any(t != "identity" for t in spec.pnl):
        raise PreconditionError("PNL not unit-triangular: post-nonlinear distortion changes the diagonal")
    points = np.atleast_2d(points)
    upper = diag = det = 0.0
    for p in points:
        J = noise_jacobian(spec, coeffs, p, segment)
        upper = max(upper, float(np.max(np.abs(np.triu(J, 1)), initial=0.0)))
        diag = max(diag, float(np.max(np.abs(np.diag(J) - 1.0))))
        det = max(det, abs(float(np.linalg.det(J)) - 1.0))
    return JacobianReport(upper < tol and diag < tol and det < tol, upper, diag, det, len(points), tol)


# ---------------------------------------------------------------------------
# non-identifiability counterexample
# ---------------------------------------------------------------------------


class _TinyMLP:
    """Scalar-to-scalar tanh network used for the counterexample mechanisms."""

    def __init__(self, rng, width=16, scale=1.0):
        self.W1 = rng.normal(0, 1.0, size=(1, width))
        self.b1 = rng.normal(0, 0.5, size=width)
        self.W2 = rng.normal(0, scale / np.sqrt(width), size=(width, 1))

    def __call__(self, z):
        return (np.tanh(np.asarray(z).reshape(-1, 1) @ self.W1 + self.b1) @ self.W2).ravel()


@dataclass
class CounterexamplePair:
    n: np.ndarray
    labels: np.ndarray
    z: np.ndarray  # original latents (z1, z2)
    z_alt: np.ndarray  # alternative latents (z1, z2')
    x: np.ndarray
    x_alt: np.ndarray
    mixing: Mixing
    mlp1: object
    mlp2: object
    lam: np.ndarray

    @property
    def max_abs_diff(self) -> float:
        return float(np.max(np.abs(self.x - self.x_alt)))

    @property
    def corr_z2(self) -> float:
        a, b = self.z[:, 1], self.z_alt[:, 1]
        if np.std(a) == 0 or np.std(b) == 0:
            return float("nan")
        return float(np.corrcoef(a, b)[0, 1])

    def summary(self):
        return {
            "probes": int(self.x.shape[0]),
            "max_abs_x_diff": self.max_abs_diff,
            "corr_z2_z2alt": self.corr_z2,
        }


def build_counterexample(
    seed=0, probes: int = 10_000, segments: int = 10, mlp2_constant: bool = False, mixing: Mixing | None = None
) -> CounterexamplePair:
    """``z2 = MLP1^u(z1) + MLP2(z1) + n2`` versus ``z2' = MLP1^u(z1) + n2``.

    The observation maps are ``f`` and ``f o f1`` with
    ``f1(z1, z2') = (z1, z2' + MLP2(z1))``.
    """
    rng = np.random.default_rng(seed)
    lam = rng.uniform(0.5, 2.0, size=segments) * rng.choice((-1.0, 1.0), size=segments)
    mlp1 = _TinyMLP(rng)
    if mlp2_constant:
        c = float(rng.normal())

        def mlp2(z):
            return np.full(np.shape(z), c)

    else:
        mlp2 = _TinyMLP(rng, scale=3.0)
    f = mixing if mixing is not None else make_mixing(2, 2, rng.integers(2**32))

    labels = rng.integers(0, segments, size=probes)
    n = rng.normal(0.0, 1.0, size=(probes, 2)) * rng.uniform(0.5, 1.5, size=(segments, 2))[labels]
    z1 = n[:, 0]
    shared = lam[labels] * mlp1(z1) + n[:, 1]
    z = np.column_stack([z1, shared + mlp2(z1)])
    z_alt = np.column_stack([z1, shared])

    def f1(v):
        return np.column_stack([v[:, 0], v[:, 1] + mlp2(v[:, 0])])

    return CounterexamplePair(n, labels, z, z_alt, f(z), f(f1(z_alt)), f, mlp1, mlp2, lam)
