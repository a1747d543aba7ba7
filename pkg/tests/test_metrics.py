import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vti.diffcore import DTYPE
from vti.flows import CosmicFlow, inv_softplus
from vti.metrics import (OracleError, _active_logf, conditional_cross_entropy_quadrature, cross_entropy_nll,
                         dag_metrics, edge_probabilities, importance_log_evidence, model_prob_scatter,
                         oracle_model_posterior, quadrature_log_evidence, shd, total_variation)
from vti.samplers import CategoricalSampler
from vti.targets import RobustVsTarget, simulate_robustvs


@pytest.fixture(scope="module")
def conj():
    d = simulate_robustvs("mid", n=50, p=3, seed=4, alpha=0.0)
    return RobustVsTarget(d.X, d.y, alpha=0.0, sigma1=2.0, sigma_beta=1.5)


def test_quadrature_matches_analytic(conj):
    orc = oracle_model_posterior(conj, method="quadrature")
    ana = np.array([conj.gaussian_log_evidence(conj.space.from_index([i])) for i in range(8)])
    assert np.abs(orc.log_Z - ana).max() <= 1e-6
    auto = oracle_model_posterior(conj)
    assert set(auto.method) == {"analytic"}
    assert abs(auto.post.sum() - 1) < 1e-9
    assert np.abs(auto.post - orc.post).max() < 1e-6


def test_quadrature_node_doubling_converged():
    d = simulate_robustvs("mid", n=50, p=3, seed=3)
    t = RobustVsTarget(d.X, d.y, sigma1=2.0, sigma2=5.0)
    a = oracle_model_posterior(t, method="quadrature", nodes=32)
    b = oracle_model_posterior(t, method="quadrature", nodes=64)
    assert np.abs(a.log_Z - b.log_Z).max() < 1e-8
    assert np.abs(a.post - b.post).max() < 1e-9


def test_flat_likelihood_gives_prior():
    t = RobustVsTarget(np.zeros((0, 3)), np.zeros(0))
    orc = oracle_model_posterior(t, method="quadrature")
    assert np.abs(orc.log_Z).max() < 1e-10
    assert np.allclose(orc.post, 1 / 8, atol=1e-12)


def test_importance_sampling_agrees_with_quadrature():
    d = simulate_robustvs("mid", n=50, p=3, seed=3)
    t = RobustVsTarget(d.X, d.y, sigma1=2.0, sigma2=5.0)
    m = t.space.from_index([5])
    cols = torch.as_tensor(np.nonzero(t.mask(m)[0].numpy())[0])
    logf = _active_logf(t, m, cols)
    q = quadrature_log_evidence(logf, len(cols), 48)
    lz, ent, ess = importance_log_evidence(logf, len(cols), n=100_000)
    assert ess > 1000
    assert abs(lz - q.log_Z) < 5e-3
    assert abs(ent - q.entropy) < 2e-2


def test_importance_ess_gate():
    d = simulate_robustvs("mid", n=50, p=3, seed=3)
    t = RobustVsTarget(d.X, d.y)
    m = t.space.from_index([7])
    cols = torch.arange(4)
    with pytest.raises(OracleError):
        importance_log_evidence(_active_logf(t, m, cols), 4, n=2000, ess_min=1e9)


def test_oracle_refuses_large_space():
    t = RobustVsTarget(np.zeros((2, 11)), np.zeros(2))
    with pytest.raises(OracleError):
        oracle_model_posterior(t)


def _gaussian_toy():
    # intercept plus one irrelevant zero column, alpha=0: model 0 has an exact Gaussian posterior
    rng = np.random.default_rng(0)
    y = 0.8 + rng.normal(size=20)
    t = RobustVsTarget(np.zeros((20, 1)), y, alpha=0.0, sigma1=1.0, sigma_beta=1.5)
    prec = 20 + 1 / 1.5 ** 2
    return t, y.sum() / prec, 1 / math.sqrt(prec)


def _affine_flow_at(mu, sd):
    f = CosmicFlow(2, 1, kind="affine", n_transforms=1, n_blocks=1, hidden=4, seed=0)
    with torch.no_grad():
        f.steps[0].final.bias.copy_(torch.tensor([mu, inv_softplus(sd - 1e-3), 0.0, 0.0], dtype=DTYPE))
    return f


def test_nll_equals_entropy_when_q_is_pi():
    t, mu, sd = _gaussian_toy()
    H = 0.5 * math.log(2 * math.pi * math.e * sd * sd)
    orc = oracle_model_posterior(t, method="quadrature", keep_nodes=True)
    assert abs(orc.entropy[0] - H) < 1e-8
    f = _affine_flow_at(mu, sd)
    s = CategoricalSampler(t.space, logits=torch.tensor([0.0, -math.inf]))
    g = np.random.default_rng(1)
    n = 20000
    th = torch.zeros(n, 2, dtype=DTYPE)
    th[:, 0] = torch.tensor(mu + sd * g.standard_normal(n), dtype=DTYPE)
    models = torch.zeros(n, 1, dtype=torch.long)
    res = cross_entropy_nll(models, th, f, s, t)
    assert abs(res["nll"] - H) < 3 * res["se"]
    ce = conditional_cross_entropy_quadrature(f, t, models[:1], orc.quad[0])
    assert abs(ce - H) < 1e-8
    # a mismatched q pays a positive gap (cross-entropy bound)
    f2 = _affine_flow_at(0.0, 1.0)
    res2 = cross_entropy_nll(models, th, f2, s, t)
    assert res2["nll"] > H + 3 * res2["se"]


def test_nll_on_self_samples_identity_flow(gen):
    t = RobustVsTarget(np.zeros((3, 3)), np.zeros(3))
    f = CosmicFlow(4, 3, kind="affine", hidden=8, seed=0)
    s = CategoricalSampler(t.space)
    models = s.sample(40000, gen)
    mask = t.mask(models)
    with torch.no_grad():
        th, _ = f.sample(models.shape[0], mask, t.context(models), gen)
    res = cross_entropy_nll(models, th, f, s, t)
    # uniform q(m) and standard normal conditionals: H = log 8 + E[d_m] * 0.5 log(2 pi e)
    H = math.log(8) + 2.5 * 0.5 * math.log(2 * math.pi * math.e)
    assert abs(res["nll"] - H) < 4 * res["se"]
    assert all(v["count"] >= 50 for v in res["per_model"].values())


def test_nll_marks_sparse_models_missing(gen):
    t = RobustVsTarget(np.zeros((3, 2)), np.zeros(3))
    f = CosmicFlow(3, 2, kind="affine", hidden=8, seed=0)
    s = CategoricalSampler(t.space)
    models = t.space.from_index(torch.tensor([0] * 60 + [3] * 10))
    res = cross_entropy_nll(models, torch.zeros(70, 3, dtype=DTYPE), f, s, t)
    assert res["per_model"][3]["cross_entropy"] is None and res["per_model"][0]["count"] == 60


def test_nll_reports_zero_mass_models():
    t = RobustVsTarget(np.zeros((3, 1)), np.zeros(3))
    f = CosmicFlow(2, 1, kind="affine", hidden=8, seed=0)
    s = CategoricalSampler(t.space, logits=torch.tensor([0.0, -math.inf]))
    res = cross_entropy_nll(t.space.from_index([0, 1]), torch.zeros(2, 2, dtype=DTYPE), f, s, t)
    assert res["nll"] == math.inf and res["n_infinite"] == 1


def test_model_prob_scatter():
    pi = np.array([0.5, 0.3, 0.15, 0.05])
    models = torch.arange(4).unsqueeze(-1)
    out = model_prob_scatter(pi, pi, models, lambda m: str(int(m[0, 0])), null_index=0, dgp_index=2)
    assert out["tv"] == 0 and abs(out["spearman"] - 1) < 1e-12
    assert [r["is_null"] for r in out["rows"]] == [1, 0, 0, 0] and out["rows"][2]["is_dgp"] == 1
    uni = model_prob_scatter(np.full(4, 0.25), pi, models, str)
    assert all(abs(r["log_q"] - math.log(0.25)) < 1e-15 for r in uni["rows"])
    assert math.isnan(uni["spearman"])
    assert abs(total_variation([1, 0], [0.5, 0.5]) - 0.5) < 1e-15


def test_dag_metrics_perfect_and_hand_case():
    A = np.array([[0, 1, 1], [0, 0, 0], [0, 0, 0]])
    out = dag_metrics(A, A.astype(float))
    assert out["f1"] == 1 and out["shd"] == 0 and out["brier"] == 0 and out["auroc"] == 1
    # two edges of six off-diagonal slots, predicted probabilities (1, 1, 0, 0, 0, 0) on the matching slots
    P = np.zeros((3, 3))
    P[0, 1] = P[0, 2] = 1.0
    out = dag_metrics(A, P)
    assert (out["f1"], out["shd"], out["brier"]) == (1.0, 0, 0.0)


def test_dag_metrics_by_hand():
    A = np.array([[0, 1, 0], [0, 0, 1], [0, 0, 0]])
    P = np.array([[0, 0.9, 0.2], [0.6, 0, 0.4], [0.1, 0.0, 0]])
    out = dag_metrics(A, P)
    # thresholded: edges 0->1, 1->0 (pred), truth 0->1, 1->2
    assert out["f1"] == pytest.approx(2 * 1 / (2 + 1 + 1))
    assert out["shd"] == 2
    assert out["brier"] == pytest.approx(0.01 + 0.04 + 0.36 + 0.36 + 0.01 + 0.0)
    # AUROC: positives 0.9, 0.4; negatives 0.2, 0.6, 0.1, 0.0
    assert out["auroc"] == pytest.approx((4 + 3) / 8)


def test_dag_metrics_constant_scores_flagged():
    A = np.array([[0, 1], [0, 0]])
    out = dag_metrics(A, np.full((2, 2), 0.3))
    assert out["auroc"] == 0.5 and out["auroc_flag"] == "constant-scores"
    with pytest.raises(ValueError):
        dag_metrics(A, np.zeros((3, 3)))


def test_shd_reversal_counts_once():
    A = np.array([[0, 1], [0, 0]])
    assert shd(A, A.T) == 1
    assert shd(A, np.zeros((2, 2))) == 1


adj = st.lists(st.integers(0, 1), min_size=16, max_size=16).map(
    lambda v: np.array(v).reshape(4, 4) * (1 - np.eye(4, dtype=int)))


@settings(max_examples=60, deadline=None)
@given(adj, adj, adj)
def test_shd_is_metric(a, b, c):
    assert shd(a, a) == 0
    assert (shd(a, b) == 0) == np.array_equal(_pairs(a), _pairs(b))
    assert shd(a, b) == shd(b, a)
    assert shd(a, c) <= shd(a, b) + shd(b, c)


def _pairs(A):
    iu = np.triu_indices(A.shape[0], 1)
    return np.stack([A[iu], A.T[iu]], -1)


def test_edge_probabilities():
    A = np.stack([np.eye(3), np.zeros((3, 3))])
    assert np.allclose(edge_probabilities(A), 0.5 * np.eye(3))
