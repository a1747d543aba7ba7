"""Evaluation: cross-entropy against reference samples, brute-force model-posterior oracles, DAG scores."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from scipy import optimize, stats
from scipy.special import logsumexp
from sklearn.metrics import roc_auc_score

from .diffcore import DTYPE


class OracleError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# per-model log evidence


def _active_logf(target, model, cols, chunk=1 << 16):
    """log eta on the active coordinates of a single model, vectorized over rows."""
    model = target.space.validate(model)
    d_max = target.d_max
    mask1 = target.mask(model)

    def f(th):
        th = torch.as_tensor(th, dtype=DTYPE)
        out = []
        for a in range(0, th.shape[0], chunk):
            blk = th[a: a + chunk]
            full = torch.zeros(blk.shape[0], d_max, dtype=DTYPE)
            full[:, cols] = blk
            k = blk.shape[0]
            out.append(target.log_eta(full, model.expand(k, -1), mask1.expand(k, -1)))
        return torch.cat(out) if out else torch.zeros(0, dtype=DTYPE)

    return f


def laplace(logf, d, x0=None):
    """Mode and Cholesky factor of the inverse negative Hessian."""
    x0 = np.zeros(d) if x0 is None else np.asarray(x0, dtype=np.float64)

    def obj(x):
        t = torch.tensor(x, dtype=DTYPE, requires_grad=True)
        v = -logf(t.unsqueeze(0))[0]
        (g,) = torch.autograd.grad(v, t)
        return float(v.detach()), g.numpy()

    res = optimize.minimize(obj, x0, jac=True, method="BFGS", options={"gtol": 1e-10, "maxiter": 2000})
    mode = res.x
    H = torch.autograd.functional.hessian(lambda t: -logf(t.unsqueeze(0))[0], torch.tensor(mode, dtype=DTYPE))
    H = 0.5 * (H + H.T).numpy()
    w, V = np.linalg.eigh(H)
    w = np.maximum(w, 1e-8)
    cov = (V / w) @ V.T
    return mode, np.linalg.cholesky(cov)


def _grid(nodes, d):
    x, w = np.polynomial.hermite.hermgauss(nodes)
    X = np.stack(np.meshgrid(*([x] * d), indexing="ij"), -1).reshape(-1, d)
    logW = np.stack(np.meshgrid(*([np.log(w)] * d), indexing="ij"), -1).reshape(-1, d).sum(-1)
    return X, logW


@dataclass
class QuadratureResult:
    log_Z: float
    entropy: float
    nodes: int
    theta: np.ndarray  # retained nodes (active coords)
    weights: np.ndarray  # normalized posterior weights on retained nodes


def quadrature_log_evidence(logf, d, nodes=64, keep_mass=1 - 1e-10, laplace_fit=None) -> QuadratureResult:
    """Gauss-Hermite tensor grid centred and scaled by the Laplace fit of eta."""
    if d == 0:
        v = float(logf(torch.zeros(1, 0, dtype=DTYPE))[0])
        return QuadratureResult(v, 0.0, 1, np.zeros((1, 0)), np.ones(1))
    mode, L = laplace_fit if laplace_fit is not None else laplace(logf, d)
    X, logW = _grid(nodes, d)
    theta = mode + math.sqrt(2.0) * X @ L.T
    lf = logf(theta).numpy()
    logterms = logW + (X * X).sum(-1) + lf
    logdet = float(np.log(np.diag(L)).sum())
    lse = logsumexp(logterms)
    log_Z = 0.5 * d * math.log(2.0) + logdet + lse
    p = np.exp(logterms - lse)
    ent = float(log_Z - (p * lf).sum())
    order = np.argsort(-p)
    csum = np.cumsum(p[order])
    keep = order[: int(np.searchsorted(csum, keep_mass)) + 1]
    pk = p[keep] / p[keep].sum()
    return QuadratureResult(float(log_Z), ent, nodes, theta[keep], pk)


def importance_log_evidence(logf, d, n=200_000, ess_min=1000.0, flow_sampler=None, laplace_fit=None,
                            seed=0, df=5.0):
    """Self-normalized IS with a defensive mixture: 90% main proposal, 10% wide Gaussian."""
    rng = np.random.default_rng(seed)
    mode, L = laplace_fit if laplace_fit is not None else laplace(logf, d)
    wide = 3.0 * L
    n_main = int(round(0.9 * n))
    if flow_sampler is not None:
        th_main, logq_main_fn = flow_sampler(n_main)
    else:
        th_main = mode + stats.multivariate_t(loc=np.zeros(d), shape=L @ L.T, df=df).rvs(n_main, random_state=rng).reshape(n_main, d)
        logq_main_fn = None
    th_wide = mode + rng.standard_normal((n - n_main, d)) @ wide.T
    theta = np.vstack([np.asarray(th_main).reshape(-1, d), th_wide])

    def log_main(th):
        if logq_main_fn is not None:
            return logq_main_fn(th)
        return stats.multivariate_t(loc=mode, shape=L @ L.T, df=df).logpdf(th).reshape(-1)

    log_wide = stats.multivariate_normal(mean=mode, cov=wide @ wide.T).logpdf(theta).reshape(-1)
    log_g = np.logaddexp(math.log(0.9) + log_main(theta), math.log(0.1) + log_wide)
    lf = logf(theta).numpy()
    lw = lf - log_g
    lse = logsumexp(lw)
    log_Z = lse - math.log(n)
    wn = np.exp(lw - lse)
    ess = 1.0 / (wn * wn).sum()
    if ess < ess_min:
        raise OracleError(f"importance sampling ESS {ess:.1f} below gate {ess_min}")
    ent = float(log_Z - (wn * lf).sum())
    return log_Z, ent, ess


@dataclass
class OracleResult:
    models: torch.Tensor
    log_Z: np.ndarray
    log_prior: np.ndarray
    method: list
    entropy: np.ndarray
    quad: dict = field(default_factory=dict)

    @property
    def log_post(self) -> np.ndarray:
        a = self.log_Z + self.log_prior
        return a - logsumexp(a)

    @property
    def post(self) -> np.ndarray:
        return np.exp(self.log_post)


def oracle_model_posterior(target, method="auto", nodes=64, max_quad_dim=4, keep_nodes=False,
                           ess_min=1000.0, is_samples=200_000, flow=None) -> OracleResult:
    """Enumerate models; log Z_m by analytic formula, quadrature or importance sampling."""
    models = target.space.enumerate()
    if models.shape[0] > 2 ** 10:
        raise OracleError("oracle restricted to at most 2^10 models")
    log_prior = target.log_prior_m(models).numpy()
    logZ, ent, tags = [], [], []
    quad = {}
    for i in range(models.shape[0]):
        m = models[i: i + 1]
        cols = np.nonzero(target.mask(m)[0].numpy())[0]
        d = len(cols)
        meth = method
        if meth == "auto":
            if getattr(target, "alpha", None) == 0.0 and hasattr(target, "gaussian_log_evidence"):
                meth = "analytic"
            elif d <= max_quad_dim:
                meth = "quadrature"
            else:
                meth = "importance"
        logf = _active_logf(target, m, torch.as_tensor(cols))
        if meth == "analytic":
            logZ.append(target.gaussian_log_evidence(m))
            ent.append(np.nan)
        elif meth == "quadrature":
            k = nodes if d <= 3 else max(8, int(round((2 ** 20) ** (1.0 / d))))
            r = quadrature_log_evidence(logf, d, k)
            logZ.append(r.log_Z)
            ent.append(r.entropy)
            if keep_nodes:
                quad[i] = r
        elif meth == "importance":
            fs = None
            if flow is not None:
                fs = _flow_proposal(flow, target, m, cols)
            lz, e, _ = importance_log_evidence(logf, d, n=is_samples, ess_min=ess_min, flow_sampler=fs, seed=i)
            logZ.append(lz)
            ent.append(e)
        else:
            raise ValueError(f"unknown oracle method {meth!r}")
        tags.append(meth)
    return OracleResult(models, np.asarray(logZ), log_prior, tags, np.asarray(ent), quad)


def _flow_proposal(flow, target, m, cols):
    mask = target.mask(m)
    ctx = target.context(m)

    def draw(n):
        with torch.no_grad():
            th, _ = flow.sample(n, mask.expand(n, -1), ctx.expand(n, -1), torch.Generator().manual_seed(17))
        th = th[:, cols].numpy()
        return th, logq

    def logq(th):
        th = torch.as_tensor(th, dtype=DTYPE)
        full = torch.zeros(th.shape[0], flow.d_max, dtype=DTYPE)
        full[:, cols] = th
        with torch.no_grad():
            return flow.conditional_logq(full, mask.expand(th.shape[0], -1), ctx.expand(th.shape[0], -1)).numpy()

    return draw


def conditional_cross_entropy_quadrature(flow, target, model, quad: QuadratureResult, chunk=4096) -> float:
    """E_pi[-log q(theta|m)] on retained quadrature nodes."""
    model = target.space.validate(model)
    cols = np.nonzero(target.mask(model)[0].numpy())[0]
    th = torch.as_tensor(quad.theta, dtype=DTYPE)
    mask = target.mask(model)
    ctx = target.context(model)
    vals = []
    with torch.no_grad():
        for a in range(0, th.shape[0], chunk):
            blk = th[a: a + chunk]
            full = torch.zeros(blk.shape[0], flow.d_max, dtype=DTYPE)
            full[:, cols] = blk
            k = blk.shape[0]
            vals.append(flow.conditional_logq(full, mask.expand(k, -1), ctx.expand(k, -1)))
    lq = torch.cat(vals).numpy()
    return float(-(quad.weights * lq).sum())


def total_variation(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


# ---------------------------------------------------------------------------
# cross-entropy against reference samples


def cross_entropy_nll(models, theta, flow, sampler, target, chunk=2048, min_per_model=50) -> dict:
    """Average -log q(m, theta) over reference draws, with per-model conditional breakdown."""
    models = target.space.validate(models)
    theta = torch.as_tensor(theta, dtype=DTYPE)
    lq_m, lq_t = [], []
    with torch.no_grad():
        for a in range(0, models.shape[0], chunk):
            mb, tb = models[a: a + chunk], theta[a: a + chunk]
            lq_m.append(sampler.log_mass(mb))
            lq_t.append(flow.conditional_logq(tb, target.mask(mb), target.context(mb)))
    lq_m = torch.cat(lq_m).numpy()
    lq_t = torch.cat(lq_t).numpy()
    nll = -(lq_m + lq_t)
    n = nll.size
    finite = bool(np.all(np.isfinite(nll)))
    out = {"nll": float(nll.mean()) if finite else math.inf,
           "se": float(nll.std(ddof=1) / math.sqrt(n)) if n > 1 and finite else math.nan,
           "n": n, "n_infinite": int((~np.isfinite(nll)).sum()), "per_sample": nll, "per_model": {}}
    idx = target.space.to_index(models).numpy()
    for k in np.unique(idx):
        sel = idx == k
        cnt = int(sel.sum())
        if cnt < min_per_model:
            out["per_model"][int(k)] = {"count": cnt, "cross_entropy": None, "se": None}
            continue
        v = -lq_t[sel]
        out["per_model"][int(k)] = {"count": cnt, "cross_entropy": float(v.mean()),
                                    "se": float(v.std(ddof=1) / math.sqrt(cnt))}
    return out


# ---------------------------------------------------------------------------
# model-probability comparison


def model_prob_scatter(q, pi, models, formatter, null_index=None, dgp_index=None) -> dict:
    q = np.asarray(q, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    rows = []
    for i in range(len(q)):
        rows.append({
            "model": formatter(models[i: i + 1]),
            "pi": pi[i], "q": q[i],
            "log_pi": math.log(pi[i]) if pi[i] > 0 else -math.inf,
            "log_q": math.log(q[i]) if q[i] > 0 else -math.inf,
            "is_null": int(i == null_index), "is_dgp": int(i == dgp_index),
        })
    rho = float(stats.spearmanr(pi, q).statistic) if np.ptp(q) > 0 and np.ptp(pi) > 0 else math.nan
    return {"rows": rows, "spearman": rho, "tv": total_variation(pi, q)}


# ---------------------------------------------------------------------------
# DAG structure scores


def shd(A_true, A_pred) -> int:
    """Structural Hamming distance: a reversed edge counts once."""
    T = np.asarray(A_true) > 0.5
    P = np.asarray(A_pred) > 0.5
    N = T.shape[0]
    iu = np.triu_indices(N, 1)
    ts = np.stack([T[iu], T.T[iu]], -1)
    ps = np.stack([P[iu], P.T[iu]], -1)
    return int((ts != ps).any(-1).sum())


def dag_metrics(A_true, edge_probs, threshold=0.5) -> dict:
    """F1 and SHD on thresholded edges, Brier (summed) and AUROC on off-diagonal probabilities."""
    T = np.asarray(A_true, dtype=np.float64)
    Pr = np.asarray(edge_probs, dtype=np.float64)
    if T.shape != Pr.shape:
        raise ValueError("adjacency shapes differ")
    off = ~np.eye(T.shape[0], dtype=bool)
    y, s = T[off] > 0.5, Pr[off]
    pred = s > threshold
    tp = int((pred & y).sum())
    fp = int((pred & ~y).sum())
    fn = int((~pred & y).sum())
    f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) > 0 else 1.0
    brier = float(((s - y) ** 2).sum())
    flag = None
    if np.ptp(s) == 0:
        auroc, flag = 0.5, "constant-scores"
    elif y.all() or (~y).all():
        auroc, flag = 0.5, "single-class-truth"
    else:
        auroc = float(roc_auc_score(y, s))
    return {"f1": f1, "shd": shd(T, Pr > threshold), "brier": brier, "auroc": auroc, "auroc_flag": flag}


def edge_probabilities(adjacencies) -> np.ndarray:
    return np.asarray(adjacencies, dtype=np.float64).mean(0)
