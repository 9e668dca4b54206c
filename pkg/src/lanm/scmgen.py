"""Synthetic data from latent additive-noise / post-nonlinear causal models.

Pipeline: segment-wise Gaussian noise ``n`` -> structural equations ``z`` ->
optional violation rule (``z_i + z_{i-1}``) -> optional component-wise
monotone distortion -> random invertible LeakyReLU mixing ``x``.

Node indices are 0-based in code; ``adjacency[j, i] == 1`` means ``z_j -> z_i``.
"""

from __future__ import annotations

import csv
import functools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

logger = logging.getLogger(__name__)

ALPHA_RANGE = (-2.0, 2.0)
BETA_RANGE = (0.1, 3.0)
LAMBDA_RANGE = (0.1, 2.0)  # magnitude; sign drawn separately
LOG_GUARD = 1e-8
MIXING_SLOPE = 0.2
MAX_MIXING_COND = 1e4
FMRI_COLUMNS = ["day", "PRC", "PHC", "ERC", "Sub", "CA1", "DG"]
FMRI_DAYS = 84

# phi(parent) for each equation tag
EQUATIONS = {
    "linear": lambda p: p,
    "sin": np.sin,
    "cos": np.cos,
    "log-square": lambda p: np.log(p * p + LOG_GUARD),
    "exp-sin-square": lambda p: np.exp(np.sin(p * p)),
}


def _scaled_tanh(z):
    return np.tanh(z) + 0.1 * z


def _bisect_inverse(fn, y, lo=-1e3, hi=1e3):
    y = np.asarray(y, dtype=np.float64)
    out = np.empty_like(y)
    for idx, target in np.ndenumerate(y):
        out[idx] = brentq(lambda t: fn(t) - target, lo, hi, xtol=1e-14, rtol=1e-15, maxiter=500)
    return out


# tag -> (forward, inverse); every forward is strictly increasing
PNL_DISTORTIONS = {
    "identity": (lambda z: z, lambda y: y),
    "cube": (lambda z: z**3, np.cbrt),
    "scaled-tanh-linear": (_scaled_tanh, lambda y: _bisect_inverse(_scaled_tanh, y)),
    "exp": (np.exp, np.log),
}


class SpecError(ValueError):
    """Invalid structural causal model description."""


@dataclass
class ScmSpec:
    ell: int
    adjacency: np.ndarray
    equations: list  # per node tag; root nodes use "root"
    violation_nodes: list = field(default_factory=list)
    pnl: list | None = None

    def __post_init__(self):
        self.adjacency = np.asarray(self.adjacency, dtype=np.int64)
        self.violation_nodes = sorted(int(v) for v in self.violation_nodes)
        self.validate()

    def validate(self):
        A = self.adjacency
        if A.shape != (self.ell, self.ell):
            raise SpecError(f"adjacency must be {self.ell}x{self.ell}, got {A.shape}")
        if not np.isin(A, (0, 1)).all():
            raise SpecError("adjacency must be binary")
        if np.any(np.tril(A) != 0):
            # parent index below child index: strictly upper triangular
            raise SpecError("adjacency[j, i] = 1 requires j < i (nodes in causal order)")
        if len(self.equations) != self.ell:
            raise SpecError("one equation tag per node required")
        for i, tag in enumerate(self.equations):
            if self.parents(i):
                if tag not in EQUATIONS:
                    raise SpecError(f"unknown equation tag {tag!r} for node {i + 1}")
            elif tag not in ("root", None):
                raise SpecError(f"node {i + 1} has no parents; tag must be 'root'")
        for v in self.violation_nodes:
            if v < 1 or v >= self.ell:
                raise SpecError(f"violation node {v + 1} has no predecessor")
            if not self.parents(v):
                raise SpecError(f"violation node {v + 1} has no parents")
        if self.pnl is not None:
            if len(self.pnl) != self.ell:
                raise SpecError("one post-nonlinear tag per node required")
            for tag in self.pnl:
                if tag not in PNL_DISTORTIONS:
                    raise SpecError(f"post-nonlinear tag {tag!r} is not a known monotone map")

    def parents(self, i: int) -> list:
        return [int(j) for j in np.flatnonzero(self.adjacency[:, i])]

    def edges(self):
        return [(int(j), int(i)) for j, i in zip(*np.nonzero(self.adjacency))]

    def effective_parents(self, i: int) -> list:
        """Predecessors the violation-composed mechanism of node ``i`` depends on."""
        deps = set()

        def raw(k):
            # raw z_k in terms of observed (post-violation) coordinates
            deps.add(k)
            if k in self.violation_nodes:
                raw(k - 1)

        for j in self.parents(i):
            raw(j)
        if i in self.violation_nodes:
            raw(i - 1)
        return sorted(deps)

    def effective_adjacency(self) -> np.ndarray:
        A = np.zeros_like(self.adjacency)
        for i in range(self.ell):
            for j in self.effective_parents(i):
                A[j, i] = 1
        return A

    def to_dict(self):
        return {
            "ell": self.ell,
            "adjacency": self.adjacency.tolist(),
            "equations": list(self.equations),
            "violation_nodes": [v + 1 for v in self.violation_nodes],
            "pnl": None if self.pnl is None else list(self.pnl),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            ell=int(d["ell"]),
            adjacency=np.asarray(d["adjacency"]),
            equations=list(d["equations"]),
            violation_nodes=[int(v) - 1 for v in d.get("violation_nodes", [])],
            pnl=d.get("pnl"),
        )


# equations for z_2..z_6 of the default chain; (parent, tag)
_CHAIN_EQUATIONS = [(0, "sin"), (1, "cos"), (2, "log-square"), (2, "exp-sin-square"), (4, "linear")]


def chain_spec(ell: int, violation_nodes=(), pnl=None) -> ScmSpec:
    """Default synthetic SCM: z2 = l sin z1, z3 = l cos z2, z4 = l log z3^2,
    z5 = l exp(sin z3^2), z6 = l z5. ``violation_nodes`` are 0-based."""
    if not 1 <= ell <= len(_CHAIN_EQUATIONS) + 1:
        raise SpecError(f"chain_spec supports 1..{len(_CHAIN_EQUATIONS) + 1} nodes")
    A = np.zeros((ell, ell), dtype=np.int64)
    tags = ["root"]
    for i in range(1, ell):
        parent, tag = _CHAIN_EQUATIONS[i - 1]
        A[parent, i] = 1
        tags.append(tag)
    return ScmSpec(ell, A, tags, list(violation_nodes), pnl)


@dataclass
class SegmentNoiseParams:
    alpha: np.ndarray  # M x ell means
    beta: np.ndarray  # M x ell variances

    def __post_init__(self):
        self.alpha = np.atleast_2d(np.asarray(self.alpha, dtype=np.float64))
        self.beta = np.atleast_2d(np.asarray(self.beta, dtype=np.float64))
        if self.alpha.shape != self.beta.shape:
            raise ValueError("alpha and beta shapes differ")
        if np.any(self.beta <= 0):
            raise ValueError("noise variances must be positive")

    @property
    def M(self):
        return self.alpha.shape[0]

    @property
    def ell(self):
        return self.alpha.shape[1]

    def natural_params(self) -> np.ndarray:
        """``M x 2 ell``: per node ``(alpha / beta, -1 / (2 beta))``, interleaved."""
        eta = np.empty((self.M, 2 * self.ell))
        eta[:, 0::2] = self.alpha / self.beta
        eta[:, 1::2] = -1.0 / (2.0 * self.beta)
        return eta


def sample_segment_params(ell: int, M: int, seed, alpha_range=ALPHA_RANGE, beta_range=BETA_RANGE) -> SegmentNoiseParams:
    if ell < 1 or M < 1:
        raise ValueError("ell and M must be positive")
    if not 0 < beta_range[0] <= beta_range[1]:
        raise ValueError(f"variance range must be positive and ordered, got {beta_range}")
    if alpha_range[0] > alpha_range[1]:
        raise ValueError(f"mean range must be ordered, got {alpha_range}")
    rng = np.random.default_rng(seed)
    alpha = rng.uniform(*alpha_range, size=(M, ell))
    beta = rng.uniform(*beta_range, size=(M, ell))
    return SegmentNoiseParams(alpha, beta)


def sample_noise(params: SegmentNoiseParams, per_segment: int, seed):
    """Rows ordered by segment; returns ``(n, labels)``."""
    if per_segment < 1:
        raise ValueError("samples per segment must be at least 1")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(params.M), per_segment)
    std = np.sqrt(params.beta[labels])
    n = params.alpha[labels] + std * rng.standard_normal((labels.size, params.ell))
    return n, labels


def sample_edge_coeffs(spec: ScmSpec, M: int, seed, certify: bool = False) -> np.ndarray:
    """Per-segment edge weights, shape ``M x ell x ell`` aligned with adjacency.

    Magnitudes are uniform on [0.1, 2.0] with a random sign. With ``certify``
    an extra segment with every weight zero is appended (``M + 1`` rows).
    """
    edges = spec.edges()
    if not edges:
        raise SpecError("spec has no edges")
    rng = np.random.default_rng(seed)
    lam = np.zeros((M, spec.ell, spec.ell))
    mags = rng.uniform(*LAMBDA_RANGE, size=(M, len(edges)))
    signs = rng.choice((-1.0, 1.0), size=(M, len(edges)))
    for k, (j, i) in enumerate(edges):
        lam[:, j, i] = mags[:, k] * signs[:, k]
    if certify:
        lam = np.concatenate([lam, np.zeros((1, spec.ell, spec.ell))])
    return lam


def mechanism(spec: ScmSpec, coeffs: np.ndarray, i: int, z, labels) -> np.ndarray:
    """``g_i^u`` of the raw additive-noise model evaluated on raw latents ``z``."""
    out = np.zeros(z.shape[0])
    lam = coeffs[labels]
    phi = EQUATIONS.get(spec.equations[i])
    for j in spec.parents(i):
        out += lam[:, j, i] * phi(z[:, j])
    return out


def gen_latents(spec: ScmSpec, n, labels, coeffs) -> np.ndarray:
    """``z_i = sum_j lambda_ji(u) phi_i(z_j) + n_i`` in topological order."""
    n = np.atleast_2d(np.asarray(n, dtype=np.float64))
    labels = np.asarray(labels)
    if n.shape[0] != labels.shape[0]:
        raise ValueError("n and labels must be row aligned")
    z = np.empty_like(n)
    for i in range(spec.ell):
        z[:, i] = mechanism(spec, coeffs, i, z, labels) + n[:, i]
    return z


def apply_violation(spec: ScmSpec, z) -> np.ndarray:
    """Replace column ``i`` with ``z_i + z_{i-1}`` for each violation node."""
    z = np.asarray(z, dtype=np.float64)
    out = z.copy()
    for i in spec.violation_nodes:
        if i < 1:
            raise SpecError("violation node 1 has no predecessor")
        out[:, i] = z[:, i] + z[:, i - 1]
    return out


def undo_violation(spec: ScmSpec, zdot) -> np.ndarray:
    """Inverse of :func:`apply_violation`; ``zdot`` may hold a leading subset of columns."""
    z = np.array(zdot, dtype=np.float64, copy=True)
    for i in range(z.shape[1]):
        if i in spec.violation_nodes:
            z[:, i] = z[:, i] - z[:, i - 1]
    return z


def composed_mechanism(spec: ScmSpec, coeffs, i: int, zdot, labels) -> np.ndarray:
    """Mechanism of node ``i`` in the observed (post-violation) coordinates.

    ``zdot[:, i] == composed_mechanism(...) + n[:, i]`` for generated data.
    Only columns ``< i`` of ``zdot`` are read.
    """
    zdot = np.atleast_2d(np.asarray(zdot, dtype=np.float64))
    z = undo_violation(spec, zdot[:, :i].copy()) if i > 0 else zdot[:, :0]
    full = np.zeros((zdot.shape[0], spec.ell))
    full[:, :i] = z
    out = mechanism(spec, coeffs, i, full, labels)
    if i in spec.violation_nodes:
        out = out + full[:, i - 1]
    return out


def latents_from_noise(spec: ScmSpec, coeffs, n, labels) -> np.ndarray:
    """Noise -> observed-coordinate latents (violation applied, no distortion)."""
    return apply_violation(spec, gen_latents(spec, n, labels, coeffs))


def apply_pnl(spec: ScmSpec, z) -> np.ndarray:
    if spec.pnl is None:
        return np.array(z, dtype=np.float64, copy=True)
    z = np.asarray(z, dtype=np.float64)
    return np.column_stack([PNL_DISTORTIONS[t][0](z[:, i]) for i, t in enumerate(spec.pnl)])


def invert_pnl(spec: ScmSpec, zbar) -> np.ndarray:
    if spec.pnl is None:
        return np.array(zbar, dtype=np.float64, copy=True)
    zbar = np.asarray(zbar, dtype=np.float64)
    return np.column_stack([PNL_DISTORTIONS[t][1](zbar[:, i]) for i, t in enumerate(spec.pnl)])


# ---------------------------------------------------------------------------
# mixing
# ---------------------------------------------------------------------------


@dataclass
class Mixing:
    """``x = W3 lrelu(W2 lrelu(W1 (P z)))`` with optional embedding ``P``."""

    weights: list
    embed: np.ndarray | None = None
    slope: float = MIXING_SLOPE
    identity: bool = False

    @property
    def condition_numbers(self):
        return [float(np.linalg.cond(W)) for W in self.weights]

    def __call__(self, z):
        z = np.asarray(z, dtype=np.float64)
        if self.identity:
            return z.copy()
        h = z if self.embed is None else z @ self.embed.T
        last = len(self.weights) - 1
        for k, W in enumerate(self.weights):
            h = h @ W
            if k < last:
                h = np.where(h > 0, h, self.slope * h)
        return h

    def inverse(self, x):
        if self.identity:
            return np.array(x, dtype=np.float64, copy=True)
        h = np.asarray(x, dtype=np.float64)
        for k in range(len(self.weights) - 1, -1, -1):
            if k < len(self.weights) - 1:
                h = np.where(h > 0, h, h / self.slope)
            h = np.linalg.solve(self.weights[k].T, h.T).T
        if self.embed is not None:
            h = h @ self.embed  # column-orthonormal embed
        return h

    def arrays(self):
        out = {f"mixing_W{k}": W for k, W in enumerate(self.weights)}
        if self.embed is not None:
            out["mixing_embed"] = self.embed
        return out


MIXING_COND_QUANTILE = 25.0


@functools.lru_cache(maxsize=None)
def mixing_cond_threshold(D: int, quantile: float = MIXING_COND_QUANTILE, draws: int = 10_000) -> float:
    """``quantile``-th percentile of the condition number of random weight draws.

    Computed from a fixed generator so the threshold depends only on ``D``.
    """
    rng = np.random.default_rng(D)
    conds = np.linalg.cond(rng.uniform(-1.0, 1.0, size=(draws, D, D)))
    return float(np.percentile(conds, quantile))


def make_mixing(
    ell: int, D: int, seed, identity: bool = False, max_cond: float = MAX_MIXING_COND, quantile=MIXING_COND_QUANTILE
) -> Mixing:
    """Random 3-layer square LeakyReLU network of width ``D``.

    Weights are uniform on ``[-1, 1]`` scaled by ``sqrt(3 / D)``. Each
    matrix is redrawn until its condition number is below both ``max_cond``
    and the ``quantile``-th percentile of random draws (``quantile=None``
    keeps only the ``max_cond`` bound).
    """
    if D < ell:
        raise ValueError("D must be at least ell")
    if identity:
        if D != ell:
            raise ValueError("identity mixing requires D == ell")
        return Mixing([np.eye(D)] * 3, identity=True)
    rng = np.random.default_rng(seed)
    embed = None
    if D > ell:
        q, _ = np.linalg.qr(rng.standard_normal((D, ell)))
        embed = q
    bound = max_cond if quantile is None else min(max_cond, mixing_cond_threshold(D, quantile))
    weights = []
    for _ in range(3):
        while True:
            W = rng.uniform(-1.0, 1.0, size=(D, D)) * math.sqrt(3.0 / D)
            if np.linalg.cond(W) < bound:
                break
        weights.append(W)
    return Mixing(weights, embed)


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    x: np.ndarray
    z: np.ndarray  # latents in observed coordinates (violation applied)
    labels: np.ndarray  # int segment index per row
    M: int
    n: np.ndarray | None = None
    zbar: np.ndarray | None = None
    spec: ScmSpec | None = None
    noise_params: SegmentNoiseParams | None = None
    coeffs: np.ndarray | None = None
    mixing: Mixing | None = None
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        rows = {self.x.shape[0], self.z.shape[0], self.labels.shape[0]}
        if self.n is not None:
            rows.add(self.n.shape[0])
        if len(rows) != 1:
            raise ValueError("x, z, n and u must have equal row counts")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.M):
            raise ValueError("segment label out of range")

    @property
    def N(self):
        return self.x.shape[0]

    @property
    def ell(self):
        return self.z.shape[1]

    @property
    def D(self):
        return self.x.shape[1]

    @property
    def u(self) -> np.ndarray:
        return one_hot(self.labels, self.M)

    @property
    def latents(self) -> np.ndarray:
        """Ground truth the learned latents are compared against."""
        return self.zbar if self.zbar is not None else self.z


def one_hot(labels, M: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, M))
    out[np.arange(labels.size), labels] = 1.0
    return out


@dataclass
class GenConfig:
    ell: int = 4
    M: int = 50
    per_segment: int = 1000
    D: int | None = None
    seed: int = 0
    violation_nodes: list = field(default_factory=list)  # 1-based
    pnl: list | None = None
    certify: bool = False
    identity_mixing: bool = False
    zero_coeffs: bool = False
    adjacency: list | None = None
    equations: list | None = None
    alpha_range: tuple = ALPHA_RANGE
    beta_range: tuple = BETA_RANGE
    mixing_seed: int | None = None  # None: derived from ``seed``

    def spec(self) -> ScmSpec:
        violations = [v - 1 for v in self.violation_nodes]
        if self.adjacency is None:
            return chain_spec(self.ell, violations, self.pnl)
        return ScmSpec(self.ell, np.asarray(self.adjacency), list(self.equations), violations, self.pnl)


def _child_seeds(seed, k):
    return np.random.SeedSequence(seed).spawn(k)


def gen_dataset(config: GenConfig) -> Dataset:
    """Generate a full dataset; deterministic in ``config.seed``."""
    spec = config.spec()
    D = config.D or spec.ell
    s_params, s_noise, s_coef, s_mix = _child_seeds(config.seed, 4)
    ranges = (tuple(config.alpha_range), tuple(config.beta_range))
    params = sample_segment_params(spec.ell, config.M, s_params, *ranges)
    if config.certify:
        # extra segment carrying the zero-coefficient witness
        extra = sample_segment_params(spec.ell, 1, np.random.SeedSequence(config.seed).spawn(5)[4], *ranges)
        params = SegmentNoiseParams(np.vstack([params.alpha, extra.alpha]), np.vstack([params.beta, extra.beta]))
    M = params.M
    n, labels = sample_noise(params, config.per_segment, s_noise)
    if spec.edges() and not config.zero_coeffs:
        coeffs = sample_edge_coeffs(spec, config.M, s_coef, certify=config.certify)
    else:
        coeffs = np.zeros((M, spec.ell, spec.ell))
    z = latents_from_noise(spec, coeffs, n, labels)
    zbar = apply_pnl(spec, z) if spec.pnl is not None else None
    if config.mixing_seed is not None:
        s_mix = np.random.SeedSequence(config.mixing_seed)
    mixing = make_mixing(spec.ell, D, s_mix, identity=config.identity_mixing)
    x = mixing(zbar if zbar is not None else z)
    manifest = {
        "ell": spec.ell,
        "D": D,
        "M": M,
        "N": int(x.shape[0]),
        "per_segment": config.per_segment,
        "seed": config.seed,
        "source": "synthetic",
        "spec": spec.to_dict(),
        "certify": config.certify,
        "mixing_condition_numbers": mixing.condition_numbers,
    }
    return Dataset(x, z, labels, M, n, zbar, spec, params, coeffs, mixing, manifest)


class FmriFormatError(ValueError):
    pass


def ingest_fmri(path):
    """Read the six-region CSV; returns ``(z, labels, days)``.

    ``z`` is standardised per column over the whole table. ``labels`` index
    the sorted distinct ``days`` present.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise FmriFormatError("empty file") from None
        if header != FMRI_COLUMNS:
            raise FmriFormatError(f"row 1: header must be {','.join(FMRI_COLUMNS)}, got {','.join(header)}")
        days, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(FMRI_COLUMNS):
                raise FmriFormatError(f"row {lineno}: expected 7 columns, got {len(row)}")
            try:
                day = int(row[0])
                vals = [float(v) for v in row[1:]]
            except ValueError:
                raise FmriFormatError(f"row {lineno}: non-numeric cell") from None
            if not 0 <= day < FMRI_DAYS:
                raise FmriFormatError(f"row {lineno}: day {day} outside [0, {FMRI_DAYS})")
            if not all(math.isfinite(v) for v in vals):
                raise FmriFormatError(f"row {lineno}: non-finite cell")
            days.append(day)
            rows.append(vals)
    if not rows:
        raise FmriFormatError("no data rows")
    z = np.asarray(rows, dtype=np.float64)
    sd = z.std(axis=0)
    sd[sd == 0] = 1.0
    z = (z - z.mean(axis=0)) / sd
    uniq, labels = np.unique(np.asarray(days), return_inverse=True)
    if uniq.size < 2 * z.shape[1] + 1:
        logger.warning("only %d segments; the natural-parameter rank check needs %d", uniq.size, 2 * z.shape[1] + 1)
    return z, labels, uniq


def fmri_dataset(path, D: int | None = None, seed=0) -> Dataset:
    z, labels, days = ingest_fmri(path)
    ell = z.shape[1]
    mixing = make_mixing(ell, D or ell, np.random.SeedSequence(seed).spawn(4)[3])
    x = mixing(z)
    manifest = {
        "ell": ell,
        "D": x.shape[1],
        "M": int(days.size),
        "N": int(x.shape[0]),
        "seed": seed,
        "source": "fmri",
        "days": days.tolist(),
        "columns": FMRI_COLUMNS[1:],
        "mixing_condition_numbers": mixing.condition_numbers,
    }
    return Dataset(x, z, labels, int(days.size), mixing=mixing, manifest=manifest)
