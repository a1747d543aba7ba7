"""Model-weight distributions q_psi(m) and their update rules."""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
import torch
from torch import nn

from .diffcore import DTYPE
from .flows import DenseLinear, MaskedLinear
from .modelspace import ModelSpace


class ModelSampler(nn.Module):
    """Shared contract: sample, log_mass, entropy. ``kind`` selects the psi update rule."""

    kind = "sfe"

    def __init__(self, space: ModelSpace):
        super().__init__()
        self.space = space

    def sample(self, n: int, generator=None) -> torch.Tensor:
        raise NotImplementedError

    def log_mass(self, models) -> torch.Tensor:
        raise NotImplementedError

    def probs(self) -> torch.Tensor:
        """Mass over the enumerated space (index order of ModelSpace)."""
        with torch.no_grad():
            return self.log_mass(self.space.enumerate()).exp()

    def entropy(self) -> Optional[float]:
        """Closed-form entropy when available, else None."""
        return None


class CategoricalSampler(ModelSampler):
    def __init__(self, space: ModelSpace, logits=None):
        super().__init__(space)
        M = space.size
        init = torch.zeros(M, dtype=DTYPE) if logits is None else torch.as_tensor(logits, dtype=DTYPE).clone()
        if init.shape != (M,):
            raise ValueError(f"expected {M} logits")
        self.logits = nn.Parameter(init)

    def log_probs(self) -> torch.Tensor:
        return torch.log_softmax(self.logits, dim=0)

    def sample(self, n, generator=None):
        if n < 1:
            raise ValueError("n must be >= 1")
        with torch.no_grad():
            p = torch.softmax(self.logits, 0)
            idx = torch.multinomial(p, n, replacement=True, generator=generator)
        return self.space.from_index(idx)

    def log_mass(self, models):
        return self.log_probs()[self.space.to_index(models)]

    def probs(self):
        with torch.no_grad():
            return torch.softmax(self.logits, 0)

    def entropy(self):
        with torch.no_grad():
            lp = self.log_probs()
            p = lp.exp()
            return float(-(torch.where(p > 0, p * lp, torch.zeros_like(p))).sum())


class MadePlusSampler(ModelSampler):
    """Autoregressive mass over structural variables with a variable output width.

    A variable with c > 2 states gets c logits (and a c-wide one-hot input); a
    binary variable gets one Bernoulli logit (and a scalar input).
    """

    def __init__(self, space: ModelSpace, hidden: int = 64, n_layers: int = 2, seed: Optional[int] = None,
                 generator=None):
        super().__init__(space)
        if generator is None and seed is not None:
            generator = torch.Generator().manual_seed(int(seed))
        self.width = [c if c > 2 else 1 for c in space.cards]
        k = space.n_vars
        deg = torch.repeat_interleave(torch.arange(1, k + 1), torch.tensor(self.width))
        hid = torch.arange(hidden) % max(1, k - 1) + min(1, k - 1)
        self.offsets = np.concatenate([[0], np.cumsum(self.width)]).tolist()
        D = self.offsets[-1]
        layers = [MaskedLinear(D, hidden, hid[:, None] >= deg[None, :], generator)]
        for _ in range(n_layers - 1):
            layers.append(MaskedLinear(hidden, hidden, hid[:, None] >= hid[None, :], generator))
        self.hidden_layers = nn.ModuleList(layers)
        self.out = MaskedLinear(hidden, D, deg[:, None] > hid[None, :], generator, zero=True)
        self.n_outputs = D

    def _encode(self, s):
        s = torch.as_tensor(s, dtype=torch.long)
        parts = []
        for j, w in enumerate(self.width):
            if w == 1:
                parts.append(s[:, j: j + 1].to(DTYPE))
            else:
                parts.append(nn.functional.one_hot(s[:, j], w).to(DTYPE))
        return torch.cat(parts, -1)

    def logits(self, s):
        h = self._encode(s)
        for layer in self.hidden_layers:
            h = torch.relu(layer(h))
        return self.out(h)

    def _var_logp(self, out, s, j):
        a, b = self.offsets[j], self.offsets[j + 1]
        if self.width[j] == 1:
            l = out[:, a]
            return -nn.functional.softplus(torch.where(s[:, j] == 1, -l, l))
        return torch.log_softmax(out[:, a:b], -1).gather(-1, s[:, j: j + 1]).squeeze(-1)

    def log_mass(self, models):
        s = self.space.validate(models)
        out = self.logits(s)
        return sum(self._var_logp(out, s, j) for j in range(self.space.n_vars))

    def sample_with_logp(self, n, generator=None):
        if n < 1:
            raise ValueError("n must be >= 1")
        k = self.space.n_vars
        s = torch.zeros(n, k, dtype=torch.long)
        logp = torch.zeros(n, dtype=DTYPE)
        with torch.no_grad():
            for j in range(k):
                out = self.logits(s)
                a, b = self.offsets[j], self.offsets[j + 1]
                if self.width[j] == 1:
                    p1 = torch.sigmoid(out[:, a])
                    s[:, j] = (torch.rand(n, generator=generator, dtype=DTYPE) < p1).long()
                else:
                    p = torch.softmax(out[:, a:b], -1)
                    s[:, j] = torch.multinomial(p, 1, generator=generator).squeeze(-1)
                logp = logp + self._var_logp(out, s, j)
        return s, logp

    def sample(self, n, generator=None):
        return self.sample_with_logp(n, generator)[0]


# ---------------------------------------------------------------------------
# GP-UCB surrogate


def hamming_kernel(S: torch.Tensor, lengthscale: float, signal_var: float = 1.0) -> torch.Tensor:
    ham = (S.unsqueeze(1) != S.unsqueeze(0)).sum(-1).to(DTYPE)
    return signal_var * torch.exp(-ham / lengthscale)


class GpSurrogateSampler(ModelSampler):
    """GP over models of the per-sample observation y (negative log h); samples from the UCB softmax.

    exact: posterior mean and covariance over the enumerated space, updated by the
    recursive GP equations. diagonal: independent Gaussians per model with
    additive precision; ``discount`` < 1 geometrically down-weights old
    observations (the parameters they were taken at have moved on).

    mean_offset=None sets the prior mean from the data: the first batch mean in
    exact mode, a discounted running mean of all observations in diagonal mode.
    The running mean lets stale models decay back to the current level, where
    the UCB bonus makes them worth revisiting.

    noise_var=None estimates the observation noise as a discounted pooled
    within-model variance of the batches seen so far.
    """

    kind = "surrogate"

    def __init__(self, space: ModelSpace, log_prior=None, mode: str = "auto", beta: float = 1.0,
                 noise_var: Optional[float] = 1.0, signal_var: float = 1.0, lengthscale: Optional[float] = None,
                 discount: float = 1.0, mean_offset: Optional[float] = 0.0):
        super().__init__(space)
        M = space.size
        if mode == "auto":
            mode = "exact" if M <= 512 else "diagonal"
        if mode not in ("exact", "diagonal"):
            raise ValueError(f"unknown surrogate mode {mode!r}")
        if (noise_var is not None and noise_var <= 0) or signal_var <= 0 or beta < 0:
            raise ValueError("noise_var, signal_var must be > 0 and beta >= 0")
        if not 0 < discount <= 1:
            raise ValueError("discount must lie in (0, 1]")
        if mode == "exact" and discount != 1.0:
            raise ValueError("discounting is only supported in diagonal mode")
        self.mode, self.beta, self.signal_var = mode, float(beta), float(signal_var)
        self.auto_noise = noise_var is None
        self.register_buffer("noise", torch.tensor(1.0 if noise_var is None else float(noise_var), dtype=DTYPE))
        self.register_buffer("noise_ss", torch.tensor(0.0, dtype=DTYPE))
        self.register_buffer("noise_dof", torch.tensor(0.0, dtype=DTYPE))
        self.discount = float(discount)
        self.lengthscale = float(lengthscale) if lengthscale is not None else max(space.n_vars / 4.0, 1e-12)
        lp = torch.zeros(M, dtype=DTYPE) if log_prior is None else torch.as_tensor(log_prior, dtype=DTYPE)
        self.register_buffer("log_prior", lp.clone())
        self.register_buffer("offset", torch.tensor(0.0 if mean_offset is None else float(mean_offset), dtype=DTYPE))
        self.auto_offset = mean_offset is None
        self.register_buffer("n_updates", torch.tensor(0, dtype=torch.long))
        self.register_buffer("mu", torch.zeros(M, dtype=DTYPE))
        if mode == "exact":
            S = space.enumerate()
            self.register_buffer("cov", hamming_kernel(S, self.lengthscale, self.signal_var))
        else:
            self.register_buffer("data_prec", torch.zeros(M, dtype=DTYPE))
            self.register_buffer("data_sum", torch.zeros(M, dtype=DTYPE))  # raw y / noise_var
            self.register_buffer("run_sum", torch.tensor(0.0, dtype=DTYPE))
            self.register_buffer("run_w", torch.tensor(0.0, dtype=DTYPE))

    def posterior_mean(self) -> torch.Tensor:
        if self.mode == "exact":
            # mu lives on the centred scale
            return self.mu + self.offset
        prec = 1.0 / self.signal_var + self.data_prec
        return (self.offset / self.signal_var + self.data_sum) / prec

    def posterior_var(self) -> torch.Tensor:
        if self.mode == "exact":
            return torch.clamp(torch.diagonal(self.cov), min=0.0)
        return 1.0 / (1.0 / self.signal_var + self.data_prec)

    @torch.no_grad()
    def update(self, models, y):
        y = torch.as_tensor(y, dtype=DTYPE).reshape(-1)
        if not torch.isfinite(y).all():
            raise FloatingPointError("non-finite surrogate observation")
        idx = self.space.to_index(models)
        if idx.numel() != y.numel() or idx.numel() == 0:
            raise ValueError("need one observation per model, batch nonempty")
        if self.auto_noise:
            self._update_noise(idx, y)
        noise = float(self.noise)
        if self.mode == "exact":
            if self.auto_offset and int(self.n_updates) == 0:
                self.offset.fill_(float(y.mean()))
            yc = y - self.offset
            Kxx = self.cov[idx][:, idx] + noise * torch.eye(idx.numel(), dtype=DTYPE)
            Kfx = self.cov[:, idx]
            L = torch.linalg.cholesky(Kxx)
            alpha = torch.cholesky_solve((yc - self.mu[idx]).unsqueeze(-1), L).squeeze(-1)
            V = torch.cholesky_solve(Kfx.T, L)
            self.mu += Kfx @ alpha
            self.cov -= Kfx @ V
            self.cov.copy_(0.5 * (self.cov + self.cov.T))
        else:
            M = self.space.size
            cnt = torch.bincount(idx, minlength=M).to(DTYPE)
            tot = torch.zeros(M, dtype=DTYPE).index_add_(0, idx, y)
            self.data_prec.mul_(self.discount).add_(cnt / noise)
            self.data_sum.mul_(self.discount).add_(tot / noise)
            if self.auto_offset:
                self.run_sum.mul_(self.discount).add_(y.sum())
                self.run_w.mul_(self.discount).add_(y.numel())
                self.offset.fill_(float(self.run_sum / self.run_w))
        self.n_updates += 1

    @property
    def noise_var(self) -> float:
        return float(self.noise)

    def _update_noise(self, idx, y):
        M = self.space.size
        cnt = torch.bincount(idx, minlength=M).to(DTYPE)
        mean = torch.zeros(M, dtype=DTYPE).index_add_(0, idx, y) / cnt.clamp(min=1)
        ss = float(((y - mean[idx]) ** 2).sum())
        dof = float(idx.numel() - int((cnt > 0).sum()))
        d = self.discount
        self.noise_ss.mul_(d).add_(ss)
        self.noise_dof.mul_(d).add_(dof)
        if float(self.noise_dof) > 0:
            self.noise.fill_(max(float(self.noise_ss / self.noise_dof), 1e-8))

    def ucb_logits(self) -> torch.Tensor:
        u = self.posterior_mean() + self.beta * self.posterior_var().sqrt()
        return self.log_prior + u

    def log_weights(self) -> torch.Tensor:
        return torch.log_softmax(self.ucb_logits(), 0)

    def probs(self):
        return self.log_weights().exp()

    def sample(self, n, generator=None):
        if n < 1:
            raise ValueError("n must be >= 1")
        idx = torch.multinomial(self.probs(), n, replacement=True, generator=generator)
        return self.space.from_index(idx)

    def log_mass(self, models):
        return self.log_weights()[self.space.to_index(models)]

    def entropy(self):
        lp = self.log_weights()
        p = lp.exp()
        return float(-(torch.where(p > 0, p * lp, torch.zeros_like(p))).sum())


def ucb_weights(mean, var, log_prior, beta=1.0) -> torch.Tensor:
    """Normalized p(m) exp(mean + beta sd) via logsumexp."""
    mean = torch.as_tensor(mean, dtype=DTYPE)
    u = mean + beta * torch.as_tensor(var, dtype=DTYPE).sqrt()
    return torch.softmax(torch.as_tensor(log_prior, dtype=DTYPE) + u, 0)


# ---------------------------------------------------------------------------
# score-function gradient, control variate, information-gain limiting


class ControlVariate:
    """Bias-corrected exponential running mean of the batch loss."""

    def __init__(self, decay: float = 0.9):
        self.decay = float(decay)
        self.biased = 0.0
        self.t = 0

    def update(self, batch_mean: float) -> float:
        self.t += 1
        self.biased = self.decay * self.biased + (1 - self.decay) * float(batch_mean)
        return self.value

    @property
    def value(self) -> float:
        if self.t == 0:
            return 0.0
        return self.biased / (1 - self.decay ** self.t)

    def state_dict(self):
        return {"decay": self.decay, "biased": self.biased, "t": self.t}

    def load_state_dict(self, st):
        self.decay, self.biased, self.t = float(st["decay"]), float(st["biased"]), int(st["t"])


def sfe_gradient(sampler: ModelSampler, models, losses, baseline: float, log_prior):
    """(1/n) sum_i g_i grad log q(m_i) with g_i = loss_i + log q(m_i) - log p(m_i) - baseline."""
    losses = torch.as_tensor(losses, dtype=DTYPE).detach()
    if losses.numel() == 0:
        raise ValueError("empty batch")
    logq = sampler.log_mass(models)
    g = losses + logq.detach() - torch.as_tensor(log_prior, dtype=DTYPE).detach() - baseline
    surrogate = (g * logq).mean()
    params = [p for p in sampler.parameters() if p.requires_grad]
    grads = torch.autograd.grad(surrogate, params, allow_unused=True)
    return [torch.zeros_like(p) if gr is None else gr for p, gr in zip(params, grads)]


def categorical_entropy(logits: torch.Tensor) -> float:
    lp = torch.log_softmax(torch.as_tensor(logits, dtype=DTYPE), 0)
    p = lp.exp()
    return float(-(torch.where(p > 0, p * lp, torch.zeros_like(p))).sum())


def importance_entropy(log_q_new: torch.Tensor, log_q_old: torch.Tensor) -> float:
    """-(1/N) sum w log q_new with w = q_new / q_old on a batch drawn from q_old."""
    w = torch.exp(log_q_new - log_q_old)
    return float(-(w * log_q_new).mean())


def ig_limited_step(sampler: ModelSampler, grads, lr: float, eps: float = 0.05, floor: float = 1e-20,
                    heldout=None, max_halvings: int = 200):
    """Apply psi <- psi - alpha grad with the largest alpha = lr 2^-k whose entropy change is <= eps.

    Returns a dict with ``accepted``, ``alpha``, ``dH``. On rejection the
    parameters are left untouched (the step is zeroed).
    """
    params = [p for p in sampler.parameters() if p.requires_grad]
    old = [p.detach().clone() for p in params]
    closed = sampler.entropy() is not None
    with torch.no_grad():
        if closed:
            H0 = sampler.entropy()
        else:
            if heldout is None:
                raise ValueError("heldout batch required for entropy estimation")
            lq0 = sampler.log_mass(heldout)
            H0 = float(-lq0.mean())
        alpha = float(lr)
        for _ in range(max_halvings):
            if alpha < floor:
                break
            for p, o, g in zip(params, old, grads):
                p.copy_(o - alpha * g)
            if closed:
                H1 = sampler.entropy()
            else:
                H1 = importance_entropy(sampler.log_mass(heldout), lq0)
            if math.isfinite(H1) and abs(H1 - H0) <= eps:
                return {"accepted": True, "alpha": alpha, "dH": H1 - H0}
            alpha *= 0.5
        for p, o in zip(params, old):
            p.copy_(o)
    return {"accepted": False, "alpha": 0.0, "dH": 0.0}


def make_sampler(name: str, space: ModelSpace, log_prior=None, seed=None, **kw) -> ModelSampler:
    name = {"neural": "madeplus", "made": "madeplus", "made+": "madeplus", "gp": "surrogate"}.get(name, name)
    if name == "categorical":
        return CategoricalSampler(space)
    if name == "madeplus":
        return MadePlusSampler(space, hidden=kw.get("hidden", 64), n_layers=kw.get("n_layers", 2), seed=seed)
    if name == "surrogate":
        return GpSurrogateSampler(space, log_prior=log_prior, mode=kw.get("mode", "auto"),
                                  beta=kw.get("beta", 1.0), noise_var=kw.get("noise_var", 1.0),
                                  signal_var=kw.get("signal_var", 1.0), discount=kw.get("discount", 1.0), mean_offset=kw.get("mean_offset", 0.0))
    raise ValueError(f"unknown sampler {name!r}; choose categorical, madeplus (neural) or surrogate")
