"""Reversible-jump MCMC on the saturated robust variable-selection posterior.

The chain keeps a full coefficient vector; inactive coordinates follow a
pseudo-prior g, so a bit flip is a Jacobian-1 move within one fixed-dimensional
target. Birth of coordinate j multiplies the likelihood ratio by N(b_j)/g(b_j).

birth="redraw" (default) refreshes b_j ~ g right before the flip, with g fitted
to the Laplace marginals of the full model. birth="carry" keeps the last active
value and takes g = the coefficient prior; it is valid but mixes very slowly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass
class RjState:
    gamma: np.ndarray          # selectable bits
    beta: np.ndarray           # saturated coefficients (d_max)
    log_lik: float
    scale: float
    p_jump: float = 0.5
    n_jump: int = 0
    acc_jump: int = 0
    n_within: int = 0
    acc_within: int = 0
    window: list = field(default_factory=lambda: [0, 0])


class RjSampler:
    def __init__(self, target, p_jump: float = 0.5, scale: Optional[float] = None, birth: str = "redraw",
                 pseudo_inflate: float = 1.5):
        if birth not in ("redraw", "carry"):
            raise ValueError("birth must be 'redraw' or 'carry'")
        self.target = target
        self.p_jump = float(p_jump)
        self.scale0 = 0.25 * target.sigma_beta if scale is None else float(scale)
        self.intercept = target.intercept
        self.p = target.layout.p
        self.birth = birth
        d = target.d_max
        if birth == "redraw":
            self.g_mean, self.g_sd = self._full_model_marginals(pseudo_inflate)
        else:
            self.g_mean, self.g_sd = np.zeros(d), np.full(d, target.sigma_beta)

    def _full_model_marginals(self, inflate):
        import torch

        from .metrics import _active_logf, laplace

        t = self.target
        full = t.space.from_index([t.space.size - 1])
        cols = torch.arange(t.d_max)
        mode, L = laplace(_active_logf(t, full, cols), t.d_max)
        sd = np.sqrt((L * L).sum(-1))
        return mode, inflate * sd

    def log_g(self, j: int, b: float) -> float:
        z = (b - self.g_mean[j]) / self.g_sd[j]
        return -0.5 * z * z - math.log(self.g_sd[j]) - 0.5 * math.log(2 * math.pi)

    def log_prior1(self, b: float) -> float:
        sb = self.target.sigma_beta
        return -0.5 * (b / sb) ** 2 - math.log(sb) - 0.5 * math.log(2 * math.pi)

    def active(self, gamma) -> np.ndarray:
        g = np.asarray(gamma, dtype=bool)
        return np.concatenate([[True], g]) if self.intercept else g

    def log_lik(self, beta, gamma) -> float:
        act = self.active(gamma)
        return float(self.target.log_lik_np(beta[act], np.nonzero(act)[0]))

    def log_prior_beta(self, beta) -> float:
        return float(self.target.log_prior_beta_np(beta))

    def init(self, rng, gamma=None, beta=None) -> RjState:
        gamma = np.zeros(self.p, dtype=int) if gamma is None else np.asarray(gamma, dtype=int).copy()
        d = self.target.d_max
        beta = rng.standard_normal(d) * 0.1 if beta is None else np.asarray(beta, dtype=float).copy()
        return RjState(gamma, beta, self.log_lik(beta, gamma), self.scale0, self.p_jump)

    def flip(self, state: RjState, j: int, u: float, fresh: Optional[float] = None) -> bool:
        """Birth (0->1) or death (1->0) of bit j, accepted iff u < min(1, r).

        ``fresh`` is the pseudo-prior draw used for a birth in redraw mode.
        """
        k = j + int(self.intercept)  # coordinate index of bit j
        g2 = state.gamma.copy()
        g2[j] = 1 - g2[j]
        beta = state.beta
        if g2[j] == 1 and self.birth == "redraw" and fresh is not None:
            beta = beta.copy()
            beta[k] = fresh
        ll2 = self.log_lik(beta, g2)
        # p(m) is uniform; the flipped coordinate swaps pseudo-prior and prior
        b = beta[k]
        swap = self.log_prior1(b) - self.log_g(k, b)
        log_r = ll2 - state.log_lik + (swap if g2[j] == 1 else -swap)
        state.n_jump += 1
        if math.log(u) < log_r:
            state.gamma, state.beta, state.log_lik = g2, beta, ll2
            state.acc_jump += 1
            return True
        return False

    def within(self, state: RjState, eps: np.ndarray, u: float) -> bool:
        """Symmetric random walk on the active coordinates with step eps (active-sized)."""
        act = self.active(state.gamma)
        b2 = state.beta.copy()
        b2[act] = b2[act] + eps
        ll2 = self.log_lik(b2, state.gamma)
        log_r = ll2 + self.log_prior_beta(b2[act]) - state.log_lik - self.log_prior_beta(state.beta[act])
        state.n_within += 1
        state.window[1] += 1
        if math.log(u) < log_r:
            state.beta, state.log_lik = b2, ll2
            state.acc_within += 1
            state.window[0] += 1
            return True
        return False

    def step(self, state: RjState, rng) -> RjState:
        if self.p > 0 and rng.random() < state.p_jump:
            j = int(rng.integers(self.p))
            fresh = None
            if self.birth == "redraw" and state.gamma[j] == 0:
                k = j + int(self.intercept)
                fresh = self.g_mean[k] + self.g_sd[k] * rng.standard_normal()
            self.flip(state, j, rng.random(), fresh)
        else:
            k = int(self.active(state.gamma).sum())
            self.within(state, state.scale * rng.standard_normal(k), rng.random())
        return state

    @staticmethod
    def adapt(state: RjState, every: int = 100, lo: float = 0.2, hi: float = 0.4):
        if state.window[1] >= every:
            rate = state.window[0] / state.window[1]
            if rate < lo:
                state.scale *= 0.8
            elif rate > hi:
                state.scale *= 1.25
            state.window = [0, 0]


def rj_step(sampler: RjSampler, state: RjState, rng) -> RjState:
    return sampler.step(state, rng)


@dataclass
class RjSamples:
    gamma: np.ndarray     # (n, p) bits
    theta: np.ndarray     # (n, d_max), NaN on inactive coordinates
    state: RjState
    stats: dict

    def models(self):
        return self.gamma

    def theta_filled(self) -> np.ndarray:
        return np.nan_to_num(self.theta, nan=0.0)


def rj_run(target, n_steps: int, burn_in: int = 0, thin: int = 1, seed: int = 0, rng=None,
           p_jump: float = 0.5, scale: Optional[float] = None, init_gamma=None,
           birth: str = "redraw") -> RjSamples:
    """Run the chain; the within-model scale adapts during burn-in and is frozen afterwards."""
    if n_steps <= burn_in:
        raise ValueError("n_steps must exceed burn_in")
    rng = rng if rng is not None else np.random.default_rng(seed)
    sm = RjSampler(target, p_jump, scale, birth)
    st = sm.init(rng, gamma=init_gamma)
    keep = (n_steps - burn_in + thin - 1) // thin
    G = np.zeros((keep, sm.p), dtype=np.int8)
    T = np.full((keep, target.d_max), np.nan)
    k = 0
    for t in range(n_steps):
        sm.step(st, rng)
        if t < burn_in:
            sm.adapt(st)
            continue
        if (t - burn_in) % thin == 0:
            G[k] = st.gamma
            act = sm.active(st.gamma)
            T[k, act] = st.beta[act]
            k += 1
    stats = {"jump_accept": st.acc_jump / max(1, st.n_jump), "within_accept": st.acc_within / max(1, st.n_within),
             "scale": st.scale}
    return RjSamples(G, T, st, stats)


def model_frequencies(gamma: np.ndarray) -> np.ndarray:
    """Empirical mass over canonical indices sum_j gamma_j 2^j."""
    gamma = np.asarray(gamma)
    idx = (gamma * (1 << np.arange(gamma.shape[1]))).sum(-1)
    return np.bincount(idx, minlength=1 << gamma.shape[1]) / gamma.shape[0]
