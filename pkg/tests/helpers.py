"""Shared fixtures: random ELBO problems and an independent extended-precision ELBO."""

import math

import numpy as np

from lanm.autodiff import Tape
from lanm.model import LanmModel, ModelConfig, elbo_graph

KINK_MARGIN = 1e-3
LD = np.longdouble


def one_hot(labels, M):
    u = np.zeros((len(labels), M))
    u[np.arange(len(labels)), labels] = 1.0
    return u


def elbo_instance(seed, ell_max=4, batch=4, hidden=4, M=3, margin=KINK_MARGIN):
    """Random small ELBO problem whose non-smooth ops sit at least ``margin`` from a kink.

    Finite differences straddling a leaky-ReLU or abs kink measure a mix of
    the two slopes, so such draws are rejected rather than compared.
    """
    rng = np.random.default_rng(seed)
    while True:
        ell = int(rng.integers(1, ell_max + 1))
        D = ell + int(rng.integers(0, 2))
        dense = bool(rng.integers(0, 2))
        cfg = ModelConfig(
            ell=ell, u_dim=M, x_dim=D, hidden=hidden, head_hidden=hidden, gamma=0.1, dense_posterior=dense
        )
        model = LanmModel.init(cfg, seed=int(rng.integers(2**31)))
        x = rng.normal(size=(batch, D))
        u = one_hot(rng.integers(0, M, size=batch), M)
        noise = rng.normal(size=(batch, ell))
        tape = Tape()
        elbo_graph(model, x, u, noise, model.bind(tape))
        if tape.kink_distance() >= margin:
            return model, x, u, noise


def reference_elbo(params, config, x, u, noise, dtype=np.float64):
    """Straightforward re-implementation of the ELBO, written without the tape."""
    c = config
    p = {k: np.asarray(v, dtype=dtype) for k, v in params.items()}
    x, u, noise = (np.asarray(a, dtype=dtype) for a in (x, u, noise))
    s = dtype(c.slope)

    def leaky(h):
        return np.where(h > 0, h, s * h)

    def mlp(h, prefix, final=False):
        for k in range(3):
            h = h @ p[f"{prefix}.{k}.W"] + p[f"{prefix}.{k}.b"]
            if k < 2 or final:
                h = leaky(h)
        return h

    def clamp(raw):
        return np.tanh(raw / 10) * 10

    B = x.shape[0]
    feat = mlp(np.hstack([x, u]), "enc", final=True)
    z = np.zeros((B, c.ell), dtype=dtype)
    kl = dtype(0)
    l1 = dtype(0)
    for i in range(c.ell):
        if i == 0:
            parents = np.zeros((B, 0), dtype=dtype)
        else:
            m = np.zeros((B, i), dtype=dtype) if c.independent_prior else u @ p[f"mask.{i}.W"] + p[f"mask.{i}.b"]
            l1 += np.abs(m).sum()
            parents = z[:, :i] * m
        q = mlp(np.hstack([feat, z[:, :i] if c.dense_posterior else parents, u]), f"post.{i}")
        pr = mlp(np.hstack([parents, u]), f"prior.{i}")
        mq, lq = q[:, 0], clamp(q[:, 1])
        mp, lp = pr[:, 0], clamp(pr[:, 1])
        z[:, i] = mq + np.exp(lq / 2) * noise[:, i]
        kl += np.sum((lp - lq) / 2 + (np.exp(lq) + (mq - mp) ** 2) / (2 * np.exp(lp)) - dtype(0.5))
    xh = mlp(z, "dec")
    v = dtype(c.obs_var)
    two_pi = 2 * dtype(math.pi)
    recon = -np.sum((x - xh) ** 2) / (2 * v * B) - c.x_dim * np.log(two_pi * v) / 2
    total = recon - kl / B
    if c.gamma:
        total = total - dtype(c.gamma) * l1 / B
    return total


def fd_gradient(model, x, u, noise, step=1e-4):
    """Five-point central differences of :func:`reference_elbo` in extended precision."""
    params = {k: np.asarray(v, dtype=LD).copy() for k, v in model.params.items()}
    out = {}
    for name, value in params.items():
        g = np.zeros(value.shape)
        for idx in np.ndindex(value.shape):
            orig = value[idx]
            h = LD(step) * max(LD(1), abs(orig))
            f = []
            for k in (2, 1, -1, -2):
                value[idx] = orig + k * h
                f.append(reference_elbo(params, model.config, x, u, noise, LD))
            value[idx] = orig
            g[idx] = float((-f[0] + 8 * f[1] - 8 * f[2] + f[3]) / (12 * h))
        out[name] = g
    return out


def autodiff_gradient(model, x, u, noise):
    tape = Tape()
    bound = model.bind(tape)
    root = elbo_graph(model, x, u, noise, bound)["total"]
    grads = tape.backward(root)
    return {k: grads[v] for k, v in bound.items()}


def max_relative_error(ad, fd, floor=1e-8):
    worst, where = 0.0, None
    for name in ad:
        err = np.abs(ad[name] - fd[name]) / np.maximum(np.maximum(np.abs(ad[name]), np.abs(fd[name])), floor)
        if err.size and err.max() > worst:
            worst, where = float(err.max()), (name, np.unravel_index(int(err.argmax()), err.shape))
    return worst, where


def identity_model(ell, M, **kw):
    """Linear model (slope 1) whose posterior mean is ``x`` and whose decoder is the identity."""
    cfg = ModelConfig(ell=ell, u_dim=M, x_dim=ell, hidden=ell, head_hidden=1, slope=1.0, obs_var=1.0, **kw)
    m = LanmModel.init(cfg)
    p = m.params
    for k in p:
        p[k] = np.zeros_like(p[k])
    p["enc.0.W"][:ell] = np.eye(ell)
    for k in ("enc.1.W", "enc.2.W", "dec.0.W", "dec.1.W", "dec.2.W"):
        p[k] = np.eye(ell)
    for i in range(ell):
        p[f"post.{i}.0.W"][i, 0] = 1.0
        p[f"post.{i}.1.W"][0, 0] = 1.0
        p[f"post.{i}.2.W"][0, 0] = 1.0
    return m
