"""scikit-learn style wrapper around the latent causal model."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import io
from .evaluate import extract_adjacency, mask_strength
from .model import LanmModel, ModelConfig, elbo, posterior_mean
from .train import AdamState, TrainConfig, train
from .validation import check_observations, check_segments


class LatentCausalModel(TransformerMixin, BaseEstimator):
    """Learn latent causal variables from observations and segment labels.

    ``fit(X, segments)`` maximises the ELBO; ``transform(X, segments)``
    returns posterior means (one column per latent, in the model's causal
    order). ``segments`` may be integer labels or a one-hot matrix.

    With ``warm_start=True`` a second call to ``fit`` continues from the
    current weights and optimiser state instead of re-initialising.
    """

    def __init__(
        self,
        n_latents=2,
        hidden=64,
        head_hidden=64,
        slope=0.01,
        gamma=0.01,
        obs_var=0.01,
        independent_prior=False,
        dense_posterior=False,
        standardize=True,
        lr=1e-3,
        batch_size=256,
        epochs=600,
        n_segments=None,
        random_state=0,
        warm_start=False,
    ):
        self.n_latents = n_latents
        self.hidden = hidden
        self.head_hidden = head_hidden
        self.slope = slope
        self.gamma = gamma
        self.obs_var = obs_var
        self.independent_prior = independent_prior
        self.dense_posterior = dense_posterior
        self.standardize = standardize
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.n_segments = n_segments
        self.random_state = random_state
        self.warm_start = warm_start

    # -- helpers -----------------------------------------------------------

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("LatentCausalModel is not fitted yet; call fit first")

    def _scale(self, X):
        if self.x_mean_ is None:
            return X
        return (X - self.x_mean_) / self.x_scale_

    def _inputs(self, X, segments):
        self._check_fitted()
        X = check_observations(X, self.n_features_in_)
        _, u = check_segments(segments, X.shape[0], self.model_.config.u_dim)
        return self._scale(X), u

    def _train_config(self, epochs=None):
        return TrainConfig(
            lr=self.lr,
            batch_size=self.batch_size,
            epochs=self.epochs if epochs is None else epochs,
            seed=int(self.random_state or 0),
        )

    # -- estimator API -----------------------------------------------------

    def fit(self, X, segments=None, checkpoint_fn=None):
        X = check_observations(X)
        if self.warm_start and hasattr(self, "model_"):
            X = check_observations(X, self.n_features_in_)
            _, u = check_segments(segments, X.shape[0], self.model_.config.u_dim)
            Xs = self._scale(X)
        else:
            _, u = check_segments(segments, X.shape[0], self.n_segments)
            self.n_features_in_ = X.shape[1]
            if self.standardize:
                self.x_mean_ = X.mean(axis=0)
                sd = X.std(axis=0)
                self.x_scale_ = np.where(sd > 0, sd, 1.0)
            else:
                self.x_mean_ = self.x_scale_ = None
            config = ModelConfig(
                ell=int(self.n_latents),
                u_dim=u.shape[1],
                x_dim=X.shape[1],
                hidden=self.hidden,
                head_hidden=self.head_hidden,
                slope=self.slope,
                gamma=self.gamma,
                obs_var=self.obs_var,
                independent_prior=self.independent_prior,
                dense_posterior=self.dense_posterior,
            )
            self.model_ = LanmModel.init(config, seed=int(self.random_state or 0))
            self.state_ = AdamState()
            self.epochs_done_ = 0
            self.log_ = []
            Xs = self._scale(X)
        _, log, self.state_ = train(
            self.model_,
            Xs,
            u,
            self._train_config(),
            state=self.state_,
            start_epoch=self.epochs_done_,
            checkpoint_fn=checkpoint_fn,
        )
        self.epochs_done_ += self.epochs
        self.log_ = list(self.log_) + list(log.epochs)
        self.train_log_ = log
        return self

    def transform(self, X, segments=None):
        Xs, u = self._inputs(X, segments)
        return posterior_mean(self.model_, Xs, u)

    def fit_transform(self, X, segments=None, **fit_params):
        return self.fit(X, segments, **fit_params).transform(X, segments)

    def score(self, X, segments=None):
        """Mean ELBO per row, evaluated at the posterior mean (zero noise)."""
        Xs, u = self._inputs(X, segments)
        return elbo(self.model_, Xs, u, np.zeros((Xs.shape[0], self.model_.config.ell))).total

    def mask_strength(self):
        self._check_fitted()
        return mask_strength(self.model_)

    def adjacency(self, tau=0.1, assignment=None):
        """Recovered graph over model latents (or true labels given ``assignment``)."""
        self._check_fitted()
        return extract_adjacency(self.model_, assignment=assignment, tau=tau)

    # -- persistence -------------------------------------------------------

    def save(self, path, meta=None):
        self._check_fitted()
        info = {"estimator": self.get_params(), "epochs_done": int(self.epochs_done_)}
        info.update(meta or {})
        return io.save_checkpoint(path, self.model_, self.state_, info, self.x_mean_, self.x_scale_)

    @classmethod
    def load(cls, path) -> "LatentCausalModel":
        model, state, meta, x_mean, x_scale = io.load_checkpoint(path)
        params = dict(meta.get("estimator", {}))
        est = cls(**params) if params else cls(n_latents=model.config.ell)
        est.model_ = model
        est.state_ = state or AdamState()
        est.epochs_done_ = int(meta.get("epochs_done", 0))
        est.log_ = []
        est.n_features_in_ = model.config.x_dim
        est.x_mean_, est.x_scale_ = x_mean, x_scale
        return est
