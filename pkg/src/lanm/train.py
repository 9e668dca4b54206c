"""Adam maximisation of the ELBO with seeded shuffling and per-epoch logging."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape
from .model import ElboBreakdown, LanmModel, elbo_graph

logger = logging.getLogger(__name__)


class TrainingError(FloatingPointError):
    """Non-finite loss or gradient; ``model`` holds the last good parameters."""

    def __init__(self, message, model=None, epoch=None, batch=None):
        super().__init__(message)
        self.model = model
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 256
    epochs: int = 600
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)  # ElboBreakdown per epoch
    mask_l1: list = field(default_factory=list)
    wall_clock: float = 0.0

    def totals(self):
        return np.array([e.total for e in self.epochs])

    def to_csv(self, path, start_epoch=0):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "recon", "kl", "l1", "total"])
            for k, e in enumerate(self.epochs):
                w.writerow([start_epoch + k + 1, repr(e.recon), repr(e.kl), repr(e.l1), repr(e.total)])


def adam_step(params: dict, grads: dict, state: AdamState, config: TrainConfig) -> None:
    """In-place Adam update (descent on ``grads``) with bias correction."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)


def _flatten(model: LanmModel):
    """Move every parameter into one buffer; params become views into it."""
    names = list(model.params)
    sizes = [model.params[k].size for k in names]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    flat = np.concatenate([model.params[k].ravel() for k in names])
    for k, name in enumerate(names):
        model.params[name] = flat[offsets[k] : offsets[k + 1]].reshape(model.params[name].shape)
    return names, offsets, flat


def train(
    model: LanmModel,
    x: np.ndarray,
    u: np.ndarray,
    config: TrainConfig,
    state: AdamState | None = None,
    start_epoch: int = 0,
    checkpoint_fn=None,
):
    """Maximise the ELBO over ``config.epochs`` epochs.

    ``x`` (N x D) and one-hot ``u`` (N x M) must match the model config.
    Returns ``(model, log, state)``; ``model`` is updated in place.
    ``checkpoint_fn(model, state, epoch)`` is called every
    ``config.checkpoint_every`` epochs and after the final epoch.
    """
    c = model.config
    x = np.ascontiguousarray(x, dtype=np.float64)
    u = np.ascontiguousarray(u, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != c.x_dim:
        raise ValueError(f"x must have {c.x_dim} columns, got shape {x.shape}")
    if u.shape != (x.shape[0], c.u_dim):
        raise ValueError(f"u must have shape {(x.shape[0], c.u_dim)}, got {u.shape}")
    state = state or AdamState()
    log = TrainLog()
    N = x.shape[0]
    t0 = time.perf_counter()
    names, offsets, flat = _flatten(model)
    gflat = np.empty_like(flat)
    last_good = model.copy()

    for epoch in range(start_epoch, start_epoch + config.epochs):
        # one stream per epoch, so a resumed run replays an uninterrupted one
        rng = np.random.default_rng([config.seed, epoch])
        perm = rng.permutation(N)
        sums = np.zeros(4)
        for b, s in enumerate(range(0, N, config.batch_size)):
            idx = perm[s : s + config.batch_size]
            xb, ub = x[idx], u[idx]
            noise = rng.standard_normal((len(idx), c.ell))
            tape = Tape()
            bound = model.bind(tape)
            g = elbo_graph(model, xb, ub, noise, bound)
            terms = [float(g[k].value[0, 0]) for k in ("recon", "kl", "l1", "total")]
            if not np.isfinite(terms[3]):
                raise TrainingError(f"non-finite ELBO at epoch {epoch}, batch {b}", last_good, epoch, b)
            grads = tape.backward(g["total"])
            for k, name in enumerate(names):
                # maximise the ELBO: descend on its negative
                np.negative(grads[bound[name]].ravel(), out=gflat[offsets[k] : offsets[k + 1]])
            if not np.all(np.isfinite(gflat)):
                bad = next(n for k, n in enumerate(names) if not np.all(np.isfinite(gflat[offsets[k] : offsets[k + 1]])))
                raise TrainingError(
                    f"non-finite gradient for parameter {bad!r} at epoch {epoch}, batch {b}", last_good, epoch, b
                )
            adam_step({"flat": flat}, {"flat": gflat}, state, config)
            sums += len(idx) * np.array(terms)
        means = sums / N
        log.epochs.append(ElboBreakdown(*(float(v) for v in means), gamma=c.gamma))
        log.mask_l1.append(float(means[2]))
        last_good = model.copy()
        done = epoch + 1
        if checkpoint_fn and config.checkpoint_every and done % config.checkpoint_every == 0:
            checkpoint_fn(model, state, done)
        logger.debug("epoch %d total %.4f recon %.4f kl %.4f l1 %.4f", done, *means[[3, 0, 1, 2]])
    log.wall_clock = time.perf_counter() - t0
    if checkpoint_fn:
        checkpoint_fn(model, state, start_epoch + config.epochs)
    return model, log, state
