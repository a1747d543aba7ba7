"""scikit-learn style wrappers around the trainer."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .targets import DagTarget, RobustVsTarget
from .trainer import Trainer, VtiConfig, train_restarts


def _trainer_config(est, **extra) -> VtiConfig:
    return VtiConfig(flow=est.flow, sampler=est.sampler, iterations=est.iterations, batch_size=est.batch_size,
                     lr_flow=est.lr_flow, lr_sampler=est.lr_sampler, seed=est.random_state or 0,
                     log_every=est.log_every, **extra)


class RobustVariableSelection(RegressorMixin, BaseEstimator):
    """Bayesian variable selection under a two-component Gaussian noise mixture.

    Fitting learns q(m) over the 2^p inclusion patterns and a shared flow over
    coefficients. ``predict`` averages the linear predictor over n_draws
    posterior draws.
    """

    def __init__(self, flow="spline", sampler="categorical", iterations=5000, batch_size=64, alpha=0.1,
                 sigma1=1.0, sigma2=10.0, sigma_beta=1.5, lr_flow=1e-3, lr_sampler=1e-2, n_draws=2000,
                 log_every=100, random_state=None):
        self.flow = flow
        self.sampler = sampler
        self.iterations = iterations
        self.batch_size = batch_size
        self.alpha = alpha
        self.sigma1 = sigma1
        self.sigma2 = sigma2
        self.sigma_beta = sigma_beta
        self.lr_flow = lr_flow
        self.lr_sampler = lr_sampler
        self.n_draws = n_draws
        self.log_every = log_every
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        self.n_features_in_ = X.shape[1]
        self.target_ = RobustVsTarget(X, y, alpha=self.alpha, sigma1=self.sigma1, sigma2=self.sigma2,
                                      sigma_beta=self.sigma_beta)
        self.trainer_ = Trainer(self.target_, _trainer_config(self))
        self.trainer_.run()
        self.loss_curve_ = np.asarray(self.trainer_.losses)
        self._draw()
        return self

    def _draw(self):
        tgt = self.target_
        g = torch.Generator().manual_seed((self.random_state or 0) + 1)
        with torch.no_grad():
            models = self.trainer_.sampler.sample(self.n_draws, g)
            mask = tgt.mask(models)
            theta, _ = self.trainer_.flow.sample(models.shape[0], mask, tgt.context(models), g)
        self.models_ = models.numpy()
        self.coef_draws_ = (theta * mask.to(theta.dtype)).numpy()
        self.inclusion_probs_ = self.models_.mean(0)
        full = self.coef_draws_.mean(0)
        self.intercept_ = float(full[0])
        self.coef_ = full[1:]
        if tgt.space.size <= 2 ** 16:
            self.model_probs_ = self.trainer_.sampler.probs().detach().numpy()

    def predict(self, X):
        check_is_fitted(self, "coef_draws_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        design = np.hstack([np.ones((X.shape[0], 1)), X])
        return (design @ self.coef_draws_.T).mean(1)


class DagStructureLearner(BaseEstimator):
    """Posterior over DAGs with MLP mechanisms; exposes posterior edge probabilities.

    With n_restarts > 1, independent runs at consecutive seeds are trained and the one with
    the lowest terminal loss is kept (``restart_losses_`` lists them all).
    """

    def __init__(self, hidden=4, sigma=1.0, lambda_s=0.0, sigma_w=1.0, flow="affine", sampler="madeplus",
                 iterations=5000, batch_size=64, lr_flow=1e-3, lr_sampler=1e-2, n_draws=1000, threshold=0.5,
                 n_restarts=1, log_every=100, random_state=None):
        self.hidden = hidden
        self.sigma = sigma
        self.lambda_s = lambda_s
        self.sigma_w = sigma_w
        self.flow = flow
        self.sampler = sampler
        self.iterations = iterations
        self.batch_size = batch_size
        self.lr_flow = lr_flow
        self.lr_sampler = lr_sampler
        self.n_draws = n_draws
        self.threshold = threshold
        self.n_restarts = n_restarts
        self.log_every = log_every
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_min_features=2)
        self.n_features_in_ = X.shape[1]
        self.target_ = DagTarget(X, hidden=self.hidden, sigma=self.sigma, lambda_s=self.lambda_s,
                                 sigma_w=self.sigma_w)
        self.trainer_, self.restart_losses_ = train_restarts(self.target_, _trainer_config(self), self.n_restarts)
        self.loss_curve_ = np.asarray(self.trainer_.losses)
        g = torch.Generator().manual_seed((self.random_state or 0) + 1)
        with torch.no_grad():
            models = self.trainer_.sampler.sample(self.n_draws, g)
        self.edge_probs_ = self.target_.layout.adjacency(models).numpy().mean(0)
        self.adjacency_ = (self.edge_probs_ > self.threshold).astype(int)
        return self

    def predict(self, X=None):
        """Thresholded posterior edge matrix."""
        check_is_fitted(self, "edge_probs_")
        return self.adjacency_

    def score(self, X, A_true):
        from .metrics import dag_metrics

        check_is_fitted(self, "edge_probs_")
        return dag_metrics(A_true, self.edge_probs_, self.threshold)["auroc"]
