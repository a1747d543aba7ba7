"""Joint optimization of flow parameters phi and model weights psi."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional

import numpy as np
import torch

from .diffcore import DTYPE, Adam, NonFiniteLossError, backward, clip_by_global_norm
from .flows import CosmicFlow, FlowDivergenceError, std_normal_logpdf
from .samplers import ControlVariate, ModelSampler, ig_limited_step, make_sampler, sfe_gradient


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class VtiConfig:
    # flow
    flow: str = "spline"
    n_transforms: Optional[int] = None
    n_blocks: Optional[int] = None
    hidden: int = 32
    n_bins: int = 8
    bound: float = 5.0
    encoder: str = "identity"
    encoder_width: int = 4096
    freeze_global_affine: bool = False
    # model weights
    sampler: str = "categorical"
    sampler_hidden: int = 64
    surrogate_mode: str = "auto"
    ucb_beta: float = 1.0
    noise_var: Optional[float] = None  # None: estimated from within-model spread of -log h
    gp_discount: float = 0.999
    gp_signal_var: float = 1.0
    # optimization
    batch_size: int = 128
    iterations: int = 30000
    lr_flow: float = 1e-3
    lr_sampler: float = 1e-2
    clip_norm: float = 10.0
    ig_eps: float = 0.05
    cv_decay: float = 0.9
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "VtiConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown trainer keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def rng_streams(seed: int) -> dict:
    """Independent generators for model draws, z draws, data generation and init."""
    children = np.random.SeedSequence(int(seed)).spawn(4)
    names = ("models", "z", "dgp", "init")
    return {n: torch.Generator().manual_seed(int(c.generate_state(1)[0])) for n, c in zip(names, children)}


@dataclass
class LossBreakdown:
    log_h: torch.Tensor
    log_q: torch.Tensor
    log_p: torch.Tensor

    @property
    def loss(self) -> float:
        return float((self.log_h.detach() + self.log_q - self.log_p).mean())


def log_h(flow: CosmicFlow, target, models, z, mask=None, ctx=None):
    """Per-sample log h(z|m) computed on active coordinates; returns (log_h, theta)."""
    if mask is None:
        mask = target.mask(models)
    if ctx is None:
        ctx = target.context(models)
    theta, logdet = flow(z, mask, ctx)
    log_ref = (std_normal_logpdf(z) * mask.to(DTYPE)).sum(-1)
    return log_ref - logdet - target.log_eta(theta, models, mask), theta


def saturated_log_h(flow: CosmicFlow, target, models, z, mask=None, ctx=None):
    """Same quantity through the saturated densities: log q~(theta, u|m) - log eta~(theta, u|m)."""
    if mask is None:
        mask = target.mask(models)
    if ctx is None:
        ctx = target.context(models)
    theta, logdet = flow(z, mask, ctx)
    aux = (std_normal_logpdf(theta) * (~mask).to(DTYPE)).sum(-1)
    return std_normal_logpdf(z).sum(-1) - logdet - (target.log_eta(theta, models, mask) + aux)


def vti_loss_batch(flow, sampler, target, n, gen_models=None, gen_z=None, models=None):
    if models is None:
        models = sampler.sample(n, gen_models)
    z = torch.randn(models.shape[0], flow.d_max, generator=gen_z, dtype=DTYPE)
    lh, _ = log_h(flow, target, models, z)
    with torch.no_grad():
        lq = sampler.log_mass(models)
        lp = target.log_prior_m(models)
    return models, LossBreakdown(lh, lq, lp)


def build_flow(cfg: VtiConfig, target, generator=None) -> CosmicFlow:
    return CosmicFlow(target.d_max, target.context_dim, kind=cfg.flow, n_transforms=cfg.n_transforms,
                      n_blocks=cfg.n_blocks, hidden=cfg.hidden, n_bins=cfg.n_bins, bound=cfg.bound,
                      encoder=cfg.encoder, encoder_width=cfg.encoder_width, generator=generator)


def build_sampler(cfg: VtiConfig, target, generator=None) -> ModelSampler:
    log_prior = None
    if cfg.sampler in ("surrogate", "gp"):
        log_prior = target.log_prior_m(target.space.enumerate())
    seed = int(torch.randint(0, 2 ** 31 - 1, (1,), generator=generator)) if generator is not None else None
    mode = cfg.surrogate_mode
    if mode == "auto":
        mode = "exact" if target.space.size <= 512 else "diagonal"
    return make_sampler(cfg.sampler, target.space, log_prior=log_prior, seed=seed, hidden=cfg.sampler_hidden,
                        mode=mode, beta=cfg.ucb_beta, noise_var=cfg.noise_var, signal_var=cfg.gp_signal_var,
                        discount=cfg.gp_discount if mode == "diagonal" else 1.0, mean_offset=None)


@dataclass
class TrainResult:
    flow: CosmicFlow
    sampler: ModelSampler
    losses: list = field(default_factory=list)
    records: list = field(default_factory=list)
    t: int = 0
    state: dict = field(default_factory=dict)


class Trainer:
    """Algorithm loop: draw models and z, update phi by Adam, then psi by SFE+IG limit or GP update."""

    def __init__(self, target, config: VtiConfig, flow=None, sampler=None):
        self.target = target
        self.cfg = config
        self.gens = rng_streams(config.seed)
        self.flow = flow if flow is not None else build_flow(config, target, self.gens["init"])
        self.sampler = sampler if sampler is not None else build_sampler(config, target, self.gens["init"])
        self.flow_params = [p for n, p in self.flow.named_parameters()
                            if not (config.freeze_global_affine and n.startswith("global_"))]
        self.opt = Adam(self.flow_params, lr=config.lr_flow)
        self.cv = ControlVariate(config.cv_decay)
        self.t = 0
        self.losses: list[float] = []
        self.records: list[dict] = []
        self._bad = 0
        self._t0 = time.time()

    def step(self):
        cfg = self.cfg
        self.t += 1
        models = self.sampler.sample(cfg.batch_size, self.gens["models"])
        try:
            models, lb = vti_loss_batch(self.flow, self.sampler, self.target, cfg.batch_size,
                                        gen_z=self.gens["z"], models=models)
            grads = backward(lb.log_h.mean(), self.flow_params)
        except (FlowDivergenceError, NonFiniteLossError) as exc:
            self._bad += 1
            if self._bad >= 3:
                raise TrainingDivergence(f"non-finite loss for 3 consecutive steps (t={self.t}): {exc}") from exc
            return None
        self._bad = 0
        grads = clip_by_global_norm(grads, cfg.clip_norm)
        self.opt.step(grads)
        lh = lb.log_h.detach()
        if self.sampler.kind == "surrogate":
            self.sampler.update(models, -lh)
        else:
            baseline = self.cv.value
            g_psi = sfe_gradient(self.sampler, models, lh, baseline, lb.log_p)
            heldout = None
            if self.sampler.entropy() is None:
                heldout = self.sampler.sample(cfg.batch_size, self.gens["models"])
            ig_limited_step(self.sampler, g_psi, cfg.lr_sampler, cfg.ig_eps, heldout=heldout)
            self.cv.update(float((lh + lb.log_q - lb.log_p).mean()))
        loss = lb.loss
        self.losses.append(loss)
        return loss

    def entropy(self) -> float:
        H = self.sampler.entropy()
        if H is None:
            with torch.no_grad():
                s, lp = self.sampler.sample_with_logp(self.cfg.batch_size, torch.Generator().manual_seed(self.t))
            H = float(-lp.mean())
        return H

    def run(self, iterations: Optional[int] = None, callback: Optional[Callable] = None) -> TrainResult:
        n = self.cfg.iterations if iterations is None else iterations
        for _ in range(n):
            loss = self.step()
            if self.cfg.log_every and self.t % self.cfg.log_every == 0:
                rec = {"t": self.t, "loss": float(np.mean(self.losses[-self.cfg.log_every:])),
                       "entropy": self.entropy(), "wallclock": time.time() - self._t0}
                self.records.append(rec)
                if callback is not None:
                    callback(rec)
        return TrainResult(self.flow, self.sampler, self.losses, self.records, self.t)

    # checkpointing
    def state_dict(self) -> dict:
        from .flows import module_to_record

        return {
            "format": "vti-checkpoint", "version": 1, "t": self.t,
            "config": self.cfg.to_dict(), "flow_config": self.flow.config,
            "flow": module_to_record(self.flow), "sampler": module_to_record(self.sampler),
            "sampler_name": self.cfg.sampler,
            "adam": {"t": self.opt.t, "m": [m.reshape(-1).tolist() for m in self.opt.m],
                     "v": [v.reshape(-1).tolist() for v in self.opt.v]},
            "cv": self.cv.state_dict(),
            "rng": {k: g.get_state().tolist() for k, g in self.gens.items()},
        }

    def load_state_dict(self, st: dict):
        from .flows import record_to_module

        record_to_module(self.flow, st["flow"])
        record_to_module(self.sampler, st["sampler"])
        self.opt.load_state_dict(st["adam"])
        self.cv.load_state_dict(st["cv"])
        for k, s in st["rng"].items():
            self.gens[k].set_state(torch.tensor(s, dtype=torch.uint8))
        self.t = int(st["t"])

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.state_dict(), fh)


def train(target, config: VtiConfig, callback=None) -> TrainResult:
    return Trainer(target, config).run(callback=callback)


def terminal_loss(trainer: Trainer, tail: Optional[int] = None) -> float:
    """Mean loss over the last `tail` steps (default a tenth of the run)."""
    ls = np.asarray(trainer.losses, dtype=np.float64)
    if ls.size == 0:
        return math.inf
    k = max(1, ls.size // 10) if tail is None else max(1, int(tail))
    return float(ls[-k:].mean())


def train_restarts(target, config: VtiConfig, n_restarts: int = 10, tail: Optional[int] = None,
                   callback: Optional[Callable] = None) -> tuple[Trainer, list]:
    """Independent runs at seeds config.seed + k; keep the one with the lowest terminal loss.

    Model-space optimization can lock onto a poor mode early. Restarts are the cheap remedy
    for small spaces with sharp posteriors (e.g. DAGs with many samples).
    """
    if n_restarts < 1:
        raise ValueError("n_restarts must be >= 1")
    best, best_score, scores = None, math.inf, []
    for k in range(n_restarts):
        cfg = VtiConfig.from_dict({**config.to_dict(), "seed": config.seed + k})
        tr = Trainer(target, cfg)
        try:
            tr.run(callback=callback)
        except TrainingDivergence:
            scores.append(math.inf)
            continue
        scores.append(terminal_loss(tr, tail))
        if best is None or scores[-1] < best_score:
            best, best_score = tr, scores[-1]
    if best is None:
        raise TrainingDivergence("every restart diverged")
    return best, scores
