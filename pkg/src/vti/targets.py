"""Transdimensional targets: robust Bayesian variable selection and MLP-SEM DAGs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .diffcore import DTYPE
from .modelspace import DagLayout, VariableSelectionLayout, sorted_nodes

LOG_2PI = math.log(2 * math.pi)


class Target:
    """Common surface used by the trainer: log eta(theta|m), log p(m), masks, contexts."""

    layout = None

    @property
    def d_max(self) -> int:
        return self.layout.d_max

    @property
    def space(self):
        return self.layout.space

    @property
    def context_dim(self) -> int:
        return self.layout.context_dim

    def mask(self, models) -> torch.Tensor:
        return self.layout.mask(models)

    def context(self, models) -> torch.Tensor:
        return self.layout.context(models)

    def log_eta(self, theta, models, mask=None) -> torch.Tensor:
        raise NotImplementedError

    def log_prior_m(self, models) -> torch.Tensor:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# robust variable selection

MISSPECIFICATION = {"none": (1.0, 10.0), "mid": (2.0, 5.0), "high": (4.0, 4.0)}


class RobustVsTarget(Target):
    """Linear regression with a two-component Gaussian noise mixture.

    X holds the selectable predictors; an explicit ones column is prepended when
    intercept=True and that coefficient is always active.
    """

    def __init__(self, X, y, alpha=0.1, sigma1=1.0, sigma2=10.0, sigma_beta=1.5, intercept=True):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise ValueError("X must be (n, p) with len(y) == n")
        if not 0.0 <= alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if min(sigma1, sigma2, sigma_beta) <= 0:
            raise ValueError("scales must be positive")
        self.alpha, self.sigma1, self.sigma2, self.sigma_beta = float(alpha), float(sigma1), float(sigma2), float(sigma_beta)
        self.intercept = bool(intercept)
        self.layout = VariableSelectionLayout(X.shape[1], intercept)
        self.design_np = np.hstack([np.ones((X.shape[0], 1)), X]) if intercept else X.copy()
        self.y_np = y
        self.design = torch.tensor(self.design_np, dtype=DTYPE)
        self.y = torch.tensor(y, dtype=DTYPE)
        self.n = y.shape[0]
        self._log_w = (math.log1p(-alpha) if alpha < 1 else -math.inf, math.log(alpha) if alpha > 0 else -math.inf)

    def _loglik_resid(self, r):
        comps = []
        for lw, s in zip(self._log_w, (self.sigma1, self.sigma2)):
            if lw == -math.inf:
                continue
            comps.append(lw - 0.5 * LOG_2PI - math.log(s) - 0.5 * (r / s) ** 2)
        if len(comps) == 1:
            return comps[0]
        return torch.logsumexp(torch.stack(comps, 0), dim=0)

    def log_eta(self, theta, models=None, mask=None):
        theta = torch.as_tensor(theta, dtype=DTYPE)
        if mask is None:
            mask = self.mask(models)
        mf = mask.to(DTYPE)
        beta = theta * mf
        resid = self.y - beta @ self.design.T
        ll = self._loglik_resid(resid).sum(-1)
        sb = self.sigma_beta
        prior = ((-0.5 * LOG_2PI - math.log(sb) - 0.5 * (theta / sb) ** 2) * mf).sum(-1)
        return ll + prior

    def log_prior_m(self, models):
        s = self.space.validate(models)
        return torch.full((s.shape[0],), -self.layout.p * math.log(2.0), dtype=DTYPE)

    # numpy path for the RJ sampler and oracles
    def log_lik_np(self, beta_active, cols):
        """Log-likelihood for beta on design columns cols; beta_active (..., k)."""
        mu = np.asarray(beta_active) @ self.design_np[:, cols].T
        r = self.y_np - mu
        out = None
        for lw, s in zip(self._log_w, (self.sigma1, self.sigma2)):
            if lw == -math.inf:
                continue
            c = lw - 0.5 * LOG_2PI - math.log(s) - 0.5 * (r / s) ** 2
            out = c if out is None else np.logaddexp(out, c)
        return out.sum(-1)

    def log_prior_beta_np(self, beta_active):
        sb = self.sigma_beta
        b = np.asarray(beta_active)
        return (-0.5 * LOG_2PI - math.log(sb) - 0.5 * (b / sb) ** 2).sum(-1)

    def active_columns(self, models) -> np.ndarray:
        return np.nonzero(self.mask(models)[0].numpy())[0]

    def gaussian_log_evidence(self, models) -> float:
        """Closed-form log Z_m when alpha == 0."""
        if self.alpha != 0.0:
            raise ValueError("closed-form evidence requires alpha == 0")
        cols = self.active_columns(models)
        Xm = self.design_np[:, cols]
        cov = self.sigma1 ** 2 * np.eye(self.n) + self.sigma_beta ** 2 * Xm @ Xm.T
        sign, logdet = np.linalg.slogdet(cov)
        quad = self.y_np @ np.linalg.solve(cov, self.y_np)
        return float(-0.5 * (self.n * LOG_2PI + logdet + quad))


@dataclass
class RobustVsData:
    X: np.ndarray
    y: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    meta: dict = field(default_factory=dict)


def simulate_robustvs(misspec="mid", n=50, p=7, seed=0, alpha=0.1, p_include=0.4,
                      beta_values=None, corr_prob=0.4, corr_total=0.1,
                      rng: Optional[np.random.Generator] = None) -> RobustVsData:
    """Draw a dataset with an always-on intercept and p selectable predictors."""
    if misspec not in MISSPECIFICATION:
        raise ValueError(f"unknown misspecification {misspec!r}; valid: {sorted(MISSPECIFICATION)}")
    rng = rng if rng is not None else np.random.default_rng(seed)
    s1, s2 = MISSPECIFICATION[misspec]
    if beta_values is None:
        beta_values = (0.5, 0.5) if misspec == "none" else (0.5, 1.5)
    X = rng.standard_normal((n, p))
    gamma = (rng.random(p) < p_include).astype(int)
    coef = beta_values[0] if rng.random() < 0.5 else beta_values[1]
    injected = []
    if misspec == "high":
        for i in np.nonzero(gamma)[0]:
            cand = np.nonzero(gamma == 0)[0]
            chosen = cand[rng.random(cand.size) < corr_prob]
            for j in chosen:
                X[:, j] += (corr_total / chosen.size) * X[:, i]
                injected.append((int(i), int(j)))
        X = (X - X.mean(0)) / X.std(0)
    beta = np.concatenate([[coef], coef * gamma])
    design = np.hstack([np.ones((n, 1)), X])
    outlier = rng.random(n) < alpha
    noise = np.where(outlier, s2, s1) * rng.standard_normal(n)
    y = design @ beta + noise
    meta = {"misspec": misspec, "n": n, "p": p, "alpha": alpha, "sigma1": s1, "sigma2": s2,
            "coef": coef, "p_include": p_include, "correlation_rule": "x_j += (total/k) x_i, standardized",
            "injected_pairs": injected}
    return RobustVsData(X, y, gamma, beta, meta)


# ---------------------------------------------------------------------------
# non-linear DAG (MLP structural equations)


class DagTarget(Target):
    """Gaussian MLP-SEM likelihood over sorted nodes with a masked Gaussian weight prior."""

    def __init__(self, X, hidden=10, sigma=1.0, lambda_s=0.0, bias=False, sigma_w=1.0):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] < 2:
            raise ValueError("X must be (n, N) with N >= 2")
        if lambda_s < 0 or sigma <= 0 or sigma_w <= 0:
            raise ValueError("invalid DAG target hyperparameters")
        self.X = torch.tensor(X, dtype=DTYPE)
        self.n, self.N = X.shape
        self.sigma, self.lambda_s, self.sigma_w = float(sigma), float(lambda_s), float(sigma_w)
        self.layout = DagLayout(self.N, hidden, bias)
        self.h = self.layout.h
        self.bias = self.layout.bias

    def node_means(self, theta, models, mask=None):
        """Conditional means f_j for data columns in sorted order: (B, n, N), plus sorted data."""
        theta = torch.as_tensor(theta, dtype=DTYPE)
        _, U, order = self.layout.structure(models)
        if mask is None:
            mask = self.layout.mask(models)
        th = theta * mask.to(DTYPE)
        nodes = sorted_nodes(order)  # (B, N)
        Xs = self.X[:, nodes].permute(1, 0, 2)  # (B, n, N)
        B = th.shape[0]
        h = self.h
        means = [torch.zeros(B, self.n, dtype=DTYPE)]
        for blk in self.layout.blocks:
            j = blk["j"]
            W1 = th[:, blk["W1"]: blk["W1"] + h * j].reshape(B, h, j)
            W2 = th[:, blk["W2"]: blk["W2"] + h]
            inp = Xs[:, :, :j] * U[:, :j, j].unsqueeze(1)
            pre = torch.einsum("bnj,bhj->bnh", inp, W1)
            if self.bias:
                pre = pre + th[:, blk["b1"]: blk["b1"] + h].unsqueeze(1)
            f = torch.einsum("bnh,bh->bn", torch.relu(pre), W2)
            if self.bias:
                f = f + th[:, blk["b2"]].unsqueeze(-1)
            means.append(f)
        return torch.stack(means, -1), Xs

    def log_lik(self, theta, models, mask=None):
        f, Xs = self.node_means(theta, models, mask)
        sse = ((Xs - f) ** 2).sum((-1, -2))
        s2 = self.sigma ** 2
        return -0.5 * self.n * self.N * (LOG_2PI + math.log(s2)) - sse / (2 * s2)

    def log_eta(self, theta, models, mask=None):
        theta = torch.as_tensor(theta, dtype=DTYPE)
        if mask is None:
            mask = self.layout.mask(models)
        mf = mask.to(DTYPE)
        sw = self.sigma_w
        prior = ((-0.5 * LOG_2PI - math.log(sw) - 0.5 * (theta / sw) ** 2) * mf).sum(-1)
        return self.log_lik(theta, models, mask) + prior

    def log_prior_m(self, models):
        s = self.space.validate(models)
        _, bits = self.layout.split(s)
        N = self.N
        base = -math.lgamma(N + 1) - 0.5 * N * (N - 1) * math.log(2.0)
        return base - self.lambda_s * bits.sum(-1).to(DTYPE)


@dataclass
class DagData:
    X: np.ndarray
    A: np.ndarray
    model: torch.Tensor
    theta: torch.Tensor
    meta: dict = field(default_factory=dict)


def _nonzero_uniform(rng, size, lo=0.3, hi=0.7):
    mag = rng.uniform(lo, hi, size)
    return mag * np.where(rng.random(size) < 0.5, -1.0, 1.0)


def simulate_dag(N=10, hidden=10, n=512, rho_edge=0.5, sigma=1.0, bias=False, seed=0,
                 rng: Optional[np.random.Generator] = None) -> DagData:
    """Random topological order, Bernoulli edges, MLP mechanisms generated in order."""
    rng = rng if rng is not None else np.random.default_rng(seed)
    layout = DagLayout(N, hidden, bias)
    order = torch.tensor(rng.permutation(N))
    U = np.triu((rng.random((N, N)) < rho_edge).astype(float), k=1)
    model = layout.models_from_structure(order, torch.tensor(U))
    mask = layout.mask(model)[0].numpy()
    theta = _nonzero_uniform(rng, layout.d_max) * mask
    nodes = sorted_nodes(order.unsqueeze(0))[0].numpy()
    Xs = np.zeros((n, N))
    h = hidden
    Xs[:, 0] = sigma * rng.standard_normal(n)
    for blk in layout.blocks:
        j = blk["j"]
        W1 = theta[blk["W1"]: blk["W1"] + h * j].reshape(h, j)
        W2 = theta[blk["W2"]: blk["W2"] + h]
        pre = (Xs[:, :j] * U[:j, j]) @ W1.T
        if bias:
            pre = pre + theta[blk["b1"]: blk["b1"] + h]
        f = np.maximum(pre, 0.0) @ W2
        if bias:
            f = f + theta[blk["b2"]]
        Xs[:, j] = f + sigma * rng.standard_normal(n)
    X = np.zeros_like(Xs)
    X[:, nodes] = Xs
    A = layout.adjacency(model)[0].numpy()
    meta = {"N": N, "hidden": hidden, "n": n, "rho_edge": rho_edge, "sigma": sigma, "bias": bias}
    return DagData(X, A, model[0], torch.tensor(theta, dtype=DTYPE), meta)


def load_sachs(path, standardize=True) -> tuple[np.ndarray, list[str]]:
    """Read a header CSV of real values (expected 7466 x 11); optional per-column standardization."""
    import csv

    with open(path) as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader if row]
    X = np.asarray(rows, dtype=np.float64)
    if standardize:
        X = (X - X.mean(0)) / X.std(0)
    return X, header
