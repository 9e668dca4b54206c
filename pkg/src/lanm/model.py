"""Masked autoregressive conditional-Gaussian VAE for latent additive noise models.

Parameters live in an ordered ``dict`` of float64 arrays. Forward functions
accept either tape :class:`~lanm.autodiff.Var` handles (for training) or plain
arrays (for inference), so both paths share one implementation.

Layout, for latent dimension ``ell``, one-hot segment size ``u_dim`` and
observation size ``x_dim``:

* ``enc``: 3-layer MLP ``[x, u] -> feature``
* ``post.i``: 3-layer MLP ``[feature, z_<i * m_i(u), u] -> (mu, log var)``
* ``prior.i``: 3-layer MLP ``[z_<i * m_i(u), u] -> (mu, log var)``
* ``mask.i``: affine ``u -> R^(i-1)`` (nodes ``i >= 2``)
* ``dec``: 3-layer MLP ``z -> x``
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import AutodiffError, Tape, Var, concat_cols

LOGVAR_BOUND = 10.0


@dataclass
class ModelConfig:
    ell: int
    u_dim: int
    x_dim: int
    hidden: int = 64
    head_hidden: int = 64
    slope: float = 0.01
    gamma: float = 0.01
    obs_var: float = 0.01
    independent_prior: bool = False  # "iVAE mode": every mask is zero
    dense_posterior: bool = False  # posterior heads see unmasked z_<i

    def __post_init__(self):
        if self.ell < 1 or self.u_dim < 1 or self.x_dim < 1:
            raise ValueError("ell, u_dim and x_dim must be positive")
        if self.obs_var <= 0:
            raise ValueError("obs_var must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")


@dataclass
class ElboBreakdown:
    """Per-batch means; ``total = recon - kl - gamma * l1``."""

    recon: float
    kl: float
    l1: float
    total: float
    gamma: float = 0.0

    def as_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# dual-dispatch helpers: Var on the tape, ndarray otherwise
# ---------------------------------------------------------------------------


def _leaky(h, slope):
    if isinstance(h, Var):
        return h.leaky_relu(slope)
    return np.where(h > 0, h, h * slope)


def _tanh(h):
    return h.tanh() if isinstance(h, Var) else np.tanh(h)


def _concat(parts):
    if any(isinstance(p, Var) for p in parts):
        tape = next(p.tape for p in parts if isinstance(p, Var))
        parts = [p if isinstance(p, Var) else tape.constant(p, validate=False) for p in parts]
        return parts[0] if len(parts) == 1 else concat_cols(parts)
    return parts[0] if len(parts) == 1 else np.concatenate(parts, axis=1)


def _col(h, j):
    return h.slice_cols(j, j + 1) if isinstance(h, Var) else h[:, j : j + 1]


def _linear(h, W, b):
    if isinstance(h, Var) or isinstance(W, Var):
        if not isinstance(h, Var):
            h = W.tape.constant(h, validate=False)
        out = h @ W
        return out + b.broadcast_row(out.shape[0])
    return h @ W + b


def _mlp(h, layers, slope, final_act=False):
    last = len(layers) - 1
    for k, (W, b) in enumerate(layers):
        h = _linear(h, W, b)
        if k < last or final_act:
            h = _leaky(h, slope)
    return h


def _soft_clamp(raw):
    # smooth bound keeps log-variance in (-10, 10) with nonzero gradient
    return _tanh(raw * (1.0 / LOGVAR_BOUND)) * LOGVAR_BOUND


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


def _glorot(rng, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class LanmModel:
    config: ModelConfig
    params: dict = field(default_factory=dict)

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "LanmModel":
        rng = np.random.default_rng(seed)
        c = config
        params = {}

        def add_mlp(prefix, sizes):
            for k in range(len(sizes) - 1):
                params[f"{prefix}.{k}.W"] = _glorot(rng, sizes[k], sizes[k + 1])
                params[f"{prefix}.{k}.b"] = np.zeros((1, sizes[k + 1]))

        H, Hh = c.hidden, c.head_hidden
        add_mlp("enc", [c.x_dim + c.u_dim, H, H, H])
        for i in range(c.ell):
            add_mlp(f"post.{i}", [H + i + c.u_dim, Hh, Hh, 2])
            add_mlp(f"prior.{i}", [i + c.u_dim, Hh, Hh, 2])
            if i > 0:
                params[f"mask.{i}.W"] = _glorot(rng, c.u_dim, i)
                params[f"mask.{i}.b"] = np.ones((1, i))
        add_mlp("dec", [c.ell, H, H, c.x_dim])
        return cls(config, params)

    def copy(self) -> "LanmModel":
        return LanmModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def bind(self, tape: Tape) -> dict:
        """Register every parameter on ``tape``; returns name -> Var."""
        return {k: tape.parameter(v, validate=False) for k, v in self.params.items()}

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def _layers(p, prefix):
    out, k = [], 0
    while f"{prefix}.{k}.W" in p:
        out.append((p[f"{prefix}.{k}.W"], p[f"{prefix}.{k}.b"]))
        k += 1
    return out


def _params(model, bound):
    return model.params if bound is None else bound


def mask_values(model: LanmModel, u, bound=None) -> list:
    """``m_i(u)`` for every node: sizes 0, 1, ..., ell-1 (node 1 gets ``None``)."""
    p = _params(model, bound)
    c = model.config
    masks = [None]
    for i in range(1, c.ell):
        if c.independent_prior:
            masks.append(np.zeros((u.shape[0], i)))
        else:
            masks.append(_linear(u, p[f"mask.{i}.W"], p[f"mask.{i}.b"]))
    return masks


def _masked_parents(zs, mask):
    if mask is None:
        return None
    prev = _concat(zs)
    if isinstance(prev, Var) or isinstance(mask, Var):
        tape = prev.tape if isinstance(prev, Var) else mask.tape
        if not isinstance(prev, Var):
            prev = tape.constant(prev, validate=False)
        if not isinstance(mask, Var):
            mask = tape.constant(mask, validate=False)
        return prev * mask
    return prev * mask


def encode_features(model, x, u, bound=None):
    p = _params(model, bound)
    return _mlp(_concat([x, u]), _layers(p, "enc"), model.config.slope, final_act=True)


def _head(p, prefix, inputs, slope):
    out = _mlp(_concat(inputs), _layers(p, prefix), slope)
    return _col(out, 0), _soft_clamp(_col(out, 1))


def posterior_sample(model: LanmModel, x, u, noise, bound=None, masks=None):
    """Autoregressive reparameterized draw from ``q(z | x, u)``.

    Returns ``(z, mus, logvars)``; ``z`` is a list of ``ell`` single-column
    values, ``mus``/``logvars`` the per-node head outputs. ``noise`` holds
    standard-normal draws, shape ``batch x ell``.
    """
    p = _params(model, bound)
    c = model.config
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != (x.shape[0], c.ell):
        raise AutodiffError(f"noise must have shape {(x.shape[0], c.ell)}, got {noise.shape}")
    if masks is None:
        masks = mask_values(model, u, bound)
    feat = encode_features(model, x, u, bound)
    zs, mus, logvars = [], [], []
    for i in range(c.ell):
        inputs = [feat]
        if i > 0:
            inputs.append(_concat(zs) if c.dense_posterior else _masked_parents(zs, masks[i]))
        inputs.append(u)
        mu, logvar = _head(p, f"post.{i}", inputs, c.slope)
        eps = noise[:, i : i + 1]
        if isinstance(mu, Var):
            z = mu + logvar.__mul__(0.5).exp() * mu.tape.constant(eps, validate=False)
        else:
            z = mu + np.exp(0.5 * logvar) * eps
        zs.append(z)
        mus.append(mu)
        logvars.append(logvar)
    return zs, mus, logvars


def prior_params(model: LanmModel, zs, u, bound=None, masks=None):
    """Per-node ``(mu, log var)`` of ``p(z_i | z_<i * m_i(u), u)``."""
    p = _params(model, bound)
    c = model.config
    if masks is None:
        masks = mask_values(model, u, bound)
    mus, logvars = [], []
    for i in range(c.ell):
        inputs = [] if i == 0 else [_masked_parents(zs[:i], masks[i])]
        inputs.append(u)
        mu, logvar = _head(p, f"prior.{i}", inputs, c.slope)
        mus.append(mu)
        logvars.append(logvar)
    return mus, logvars


def prior_sample(model: LanmModel, u, noise, do=None) -> np.ndarray:
    """Ancestral draw from the learned prior, optionally under intervention.

    ``do`` maps a 0-based node index to a value (scalar or per-row column);
    that node is set instead of sampled while its descendants are drawn from
    their prior heads as usual. ``noise`` is standard normal, ``batch x ell``.
    """
    c = model.config
    u = np.asarray(u, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != (u.shape[0], c.ell):
        raise ValueError(f"noise must have shape {(u.shape[0], c.ell)}, got {noise.shape}")
    do = do or {}
    masks = mask_values(model, u)
    zs = []
    for i in range(c.ell):
        if i in do:
            zs.append(np.broadcast_to(np.asarray(do[i], dtype=np.float64).reshape(-1, 1), (u.shape[0], 1)).copy())
            continue
        inputs = [] if i == 0 else [_masked_parents(zs, masks[i])]
        inputs.append(u)
        mu, logvar = _head(model.params, f"prior.{i}", inputs, c.slope)
        zs.append(mu + np.exp(0.5 * logvar) * noise[:, i : i + 1])
    return np.concatenate(zs, axis=1)


def decode(model: LanmModel, z, bound=None):
    """Decoder mean ``x_hat`` for latents ``z`` (batch x ell)."""
    p = _params(model, bound)
    if isinstance(z, list):
        z = _concat(z)
    return _mlp(z, _layers(p, "dec"), model.config.slope)


def posterior_mean(model: LanmModel, x, u, chunk: int = 4096) -> np.ndarray:
    """Posterior means (zero reparameterization noise) for all rows."""
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    out = np.empty((x.shape[0], model.config.ell))
    for s in range(0, x.shape[0], chunk):
        xb, ub = x[s : s + chunk], u[s : s + chunk]
        zs, _, _ = posterior_sample(model, xb, ub, np.zeros((xb.shape[0], model.config.ell)))
        out[s : s + chunk] = np.concatenate(zs, axis=1)
    return out


def kl_conditional_gaussian(mu_q, var_q, mu_p, var_p) -> float:
    """``KL(N(mu_q, var_q) || N(mu_p, var_p))`` summed over columns, averaged over rows."""
    mu_q, var_q, mu_p, var_p = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (mu_q, var_q, mu_p, var_p))
    if np.any(var_q <= 0) or np.any(var_p <= 0):
        raise ValueError("variances must be positive")
    kl = 0.5 * np.log(var_p / var_q) + (var_q + (mu_q - mu_p) ** 2) / (2.0 * var_p) - 0.5
    return float(kl.sum() / kl.shape[0])


def _kl_node(mu_q, lv_q, mu_p, lv_p):
    # 0.5 (lv_p - lv_q) + 0.5 (exp(lv_q) + (mu_q - mu_p)^2) exp(-lv_p) - 0.5
    if isinstance(mu_q, Var):
        inv_p = (lv_p * -1.0).exp()
        spread = lv_q.exp() + (mu_q - mu_p).square()
        return ((lv_p - lv_q) * 0.5 + (spread * inv_p) * 0.5).sum()
    inv_p = np.exp(-lv_p)
    spread = np.exp(lv_q) + (mu_q - mu_p) ** 2
    return float((0.5 * (lv_p - lv_q) + 0.5 * spread * inv_p).sum())


def elbo_graph(model: LanmModel, x, u, noise, bound):
    """Build the ELBO on ``bound``'s tape; returns dict of scalar Vars."""
    c = model.config
    tape = next(iter(bound.values())).tape
    B = x.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    x_c = tape.constant(x, validate=False)
    u_c = tape.constant(u, validate=False)
    masks = mask_values(model, u_c, bound)
    zs, mu_q, lv_q = posterior_sample(model, x_c, u_c, noise, bound, masks)
    mu_p, lv_p = prior_params(model, zs, u_c, bound, masks)

    x_hat = decode(model, zs, bound)
    const = -0.5 * c.x_dim * math.log(2.0 * math.pi * c.obs_var)
    recon = (x_c - x_hat).square().sum() * (-0.5 / (c.obs_var * B)) + const

    kl = None
    for i in range(c.ell):
        term = _kl_node(mu_q[i], lv_q[i], mu_p[i], lv_p[i])
        kl = term if kl is None else kl + term
    kl = kl * (1.0 / B) + (-0.5 * c.ell)

    if c.ell > 1 and not c.independent_prior:
        l1 = None
        for m in masks[1:]:
            term = m.abs().sum()
            l1 = term if l1 is None else l1 + term
        l1 = l1 * (1.0 / B)
    else:
        l1 = tape.constant([[0.0]])

    total = recon - kl - l1 * c.gamma if c.gamma else recon - kl
    return {"recon": recon, "kl": kl, "l1": l1, "total": total}


def elbo(model: LanmModel, x, u, noise) -> ElboBreakdown:
    """Evaluate the ELBO terms for one batch."""
    tape = Tape()
    g = elbo_graph(model, np.asarray(x, float), np.asarray(u, float), noise, model.bind(tape))
    vals = {k: float(v.value[0, 0]) for k, v in g.items()}
    if not np.isfinite(vals["total"]):
        raise FloatingPointError("non-finite ELBO")
    return ElboBreakdown(vals["recon"], vals["kl"], vals["l1"], vals["total"], model.config.gamma)
