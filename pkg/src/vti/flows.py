"""CoSMIC inverse autoregressive flows over a saturated parameter space.

Inactive coordinates of a model are routed through every transform at its static
point, so they leave the flow untouched and contribute nothing to the log-det.
Active coordinates are left-aligned once around the whole stack and reversed
(within the active block) between steps.
"""

from __future__ import annotations

import json
import math
from typing import Optional

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .diffcore import DTYPE
from .modelspace import invert_permutation, left_align

LOG_2PI = math.log(2 * math.pi)
AFFINE_SCALE_FLOOR = 1e-3


class FlowDivergenceError(FloatingPointError):
    def __init__(self, step: int, msg: str = ""):
        super().__init__(f"flow divergence at transform step {step}{': ' + msg if msg else ''}")
        self.step = step


def std_normal_logpdf(z: torch.Tensor) -> torch.Tensor:
    return -0.5 * (z * z + LOG_2PI)


def inv_softplus(y: float) -> float:
    return y + math.log(-math.expm1(-y))


def _uniform_(t: torch.Tensor, bound: float, generator: Optional[torch.Generator]):
    with torch.no_grad():
        t.copy_((torch.rand(t.shape, generator=generator, dtype=DTYPE) * 2 - 1) * bound)
    return t


class MaskedLinear(nn.Module):
    def __init__(self, in_features, out_features, mask: torch.Tensor, generator=None, zero=False):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(out_features, in_features, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(out_features, dtype=DTYPE))
        self.register_buffer("mask", mask.to(DTYPE))
        if not zero:
            bound = 1.0 / math.sqrt(max(1, in_features))
            _uniform_(self.weight, bound, generator)
            _uniform_(self.bias, bound, generator)

    def forward(self, x):
        return F.linear(x, self.weight * self.mask, self.bias)


class DenseLinear(nn.Module):
    def __init__(self, in_features, out_features, generator=None, zero=False):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(out_features, in_features, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(out_features, dtype=DTYPE))
        if not zero:
            bound = 1.0 / math.sqrt(max(1, in_features))
            _uniform_(self.weight, bound, generator)
            _uniform_(self.bias, bound, generator)

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class ResidualMADE(nn.Module):
    """Residual masked autoencoder emitting n_params raw values per coordinate.

    Output for coordinate i depends only on inputs j < i and on the context.
    """

    def __init__(self, d, hidden, n_blocks, n_params, context_dim, static_raw,
                 generator=None):
        super().__init__()
        self.d, self.n_params = d, n_params
        in_deg = torch.arange(1, d + 1)
        hid_deg = torch.arange(hidden) % max(1, d - 1) + min(1, d - 1)
        out_deg = torch.repeat_interleave(in_deg, n_params)
        self.initial = MaskedLinear(d, hidden, hid_deg[:, None] >= in_deg[None, :], generator)
        hh = hid_deg[:, None] >= hid_deg[None, :]
        self.blocks = nn.ModuleList()
        for _ in range(n_blocks):
            self.blocks.append(nn.ModuleList([
                MaskedLinear(hidden, hidden, hh, generator),
                MaskedLinear(hidden, hidden, hh, generator),
            ]))
        self.final = MaskedLinear(hidden, d * n_params, out_deg[:, None] > hid_deg[None, :],
                                  generator, zero=True)
        with torch.no_grad():
            self.final.bias.copy_(torch.as_tensor(static_raw, dtype=DTYPE).repeat(d))
        self.context_dim = context_dim
        if context_dim > 0:
            self.ctx_initial = DenseLinear(context_dim, hidden, generator)
            self.ctx_blocks = nn.ModuleList([DenseLinear(context_dim, hidden, generator)
                                             for _ in range(n_blocks)])

    def forward(self, x, ctx=None):
        h = self.initial(x)
        if self.context_dim > 0:
            h = h + self.ctx_initial(ctx)
        for k, (l1, l2) in enumerate(self.blocks):
            t = l1(torch.relu(h))
            if self.context_dim > 0:
                t = t + self.ctx_blocks[k](ctx)
            h = h + l2(torch.relu(t))
        out = self.final(h)
        return out.reshape(*x.shape[:-1], self.d, self.n_params)


# ---------------------------------------------------------------------------
# transform families. params are post-activation and blended with the static
# point before use: rho_C = (1 - C) * rho_id + C * rho


class AffineFamily:
    n_params = 2

    def __init__(self):
        self.static_raw = [0.0, inv_softplus(1.0 - AFFINE_SCALE_FLOOR)]

    def activate(self, raw):
        return raw[..., 0], F.softplus(raw[..., 1]) + AFFINE_SCALE_FLOOR

    def blend(self, params, C):
        shift, scale = params
        Cf = C.to(DTYPE)
        return (1 - Cf) * 0.0 + Cf * shift, (1 - Cf) * 1.0 + Cf * scale

    def forward(self, x, params):
        shift, scale = params
        return shift + scale * x, torch.log(scale)

    def inverse(self, y, params):
        shift, scale = params
        return (y - shift) / scale, torch.log(scale)


def affine_transform(z, shift, scale):
    """Scalar affine map theta = shift + scale * z with its log-derivative."""
    scale = torch.as_tensor(scale, dtype=DTYPE)
    if (scale <= 0).any():
        raise ValueError("affine scale must be positive")
    z = torch.as_tensor(z, dtype=DTYPE)
    return shift + scale * z, torch.log(scale) * torch.ones_like(z)


class SplineFamily:
    """Monotone rational-quadratic spline on [-B, B] with identity linear tails."""

    def __init__(self, n_bins=8, bound=5.0, min_width=1e-3, min_height=1e-3, min_derivative=1e-3):
        self.K = int(n_bins)
        self.B = float(bound)
        self.min_w, self.min_h, self.min_d = min_width, min_height, min_derivative
        self.n_params = 3 * self.K - 1
        self.static_raw = [0.0] * (2 * self.K) + [inv_softplus(1.0 - min_derivative)] * (self.K - 1)

    def activate(self, raw):
        K = self.K
        if not torch.isfinite(raw).all():
            raise FlowDivergenceError(-1, "non-finite spline parameters")
        w = self.min_w + (1 - self.min_w * K) * torch.softmax(raw[..., :K], dim=-1)
        h = self.min_h + (1 - self.min_h * K) * torch.softmax(raw[..., K:2 * K], dim=-1)
        d = self.min_d + F.softplus(raw[..., 2 * K:])
        return w, h, d

    def blend(self, params, C):
        w, h, d = params
        Cf = C.to(DTYPE).unsqueeze(-1)
        u = 1.0 / self.K
        return (1 - Cf) * u + Cf * w, (1 - Cf) * u + Cf * h, (1 - Cf) * 1.0 + Cf * d

    def _knots(self, frac):
        B = self.B
        widths = 2 * B * frac
        cum = torch.cumsum(widths, dim=-1) - B
        knots = torch.cat([torch.full_like(cum[..., :1], -B), cum], dim=-1)
        knots[..., -1] = B
        return widths, knots

    def _gather(self, params, v, use_y):
        w, h, d = params
        widths, xk = self._knots(w)
        heights, yk = self._knots(h)
        ones = torch.ones_like(d[..., :1])
        dfull = torch.cat([ones, d, ones], dim=-1)
        knots = yk if use_y else xk
        idx = torch.searchsorted(knots[..., 1:-1].contiguous(), v.unsqueeze(-1).contiguous(), right=True)
        g = lambda t: t.gather(-1, idx).squeeze(-1)  # noqa: E731
        return g(xk), g(widths), g(yk), g(heights), g(dfull[..., :-1]), g(dfull[..., 1:])

    def forward(self, x, params):
        B = self.B
        inside = (x >= -B) & (x <= B)
        xc = torch.where(inside, x, torch.zeros_like(x))
        x0, wk, y0, hk, d0, d1 = self._gather(params, xc, use_y=False)
        xi = (xc - x0) / wk
        s = hk / wk
        om = xi * (1 - xi)
        den = s + (d1 + d0 - 2 * s) * om
        y = y0 + hk * (s * xi * xi + d0 * om) / den
        dydx = s * s * (d1 * xi * xi + 2 * s * om + d0 * (1 - xi) ** 2) / (den * den)
        return torch.where(inside, y, x), torch.where(inside, torch.log(dydx), torch.zeros_like(x))

    def inverse(self, y, params):
        B = self.B
        inside = (y >= -B) & (y <= B)
        yc = torch.where(inside, y, torch.zeros_like(y))
        x0, wk, y0, hk, d0, d1 = self._gather(params, yc, use_y=True)
        s = hk / wk
        dy = yc - y0
        c2 = d1 + d0 - 2 * s
        a = hk * (s - d0) + dy * c2
        b = hk * d0 - dy * c2
        c = -s * dy
        disc = torch.clamp(b * b - 4 * a * c, min=0.0)
        xi = (2 * c) / (-b - torch.sqrt(disc))
        x = x0 + xi * wk
        om = xi * (1 - xi)
        den = s + c2 * om
        dydx = s * s * (d1 * xi * xi + 2 * s * om + d0 * (1 - xi) ** 2) / (den * den)
        return torch.where(inside, x, y), torch.where(inside, torch.log(dydx), torch.zeros_like(y))


def rq_spline_transform(z, raw, family: Optional[SplineFamily] = None):
    """Apply a spline from raw (unactivated) parameters; returns (theta, logdet)."""
    family = family or SplineFamily()
    z = torch.as_tensor(z, dtype=DTYPE)
    raw = torch.as_tensor(raw, dtype=DTYPE)
    return family.forward(z, family.activate(raw))


# ---------------------------------------------------------------------------
# context encoders


class ContextEncoder(nn.Module):
    """Identity, or an MLP whose width doubles to the next power of two up to max_width."""

    def __init__(self, in_dim: int, kind: str = "identity", max_width: int = 4096, generator=None):
        super().__init__()
        self.kind = kind
        self.in_dim = in_dim
        if kind == "identity":
            self.out_dim = in_dim
            self.layers = nn.ModuleList()
        elif kind == "mlp":
            widths = [in_dim]
            while widths[-1] < max_width:
                nxt = 1 << max(0, math.ceil(math.log2(2 * widths[-1])))
                widths.append(min(nxt, max_width))
            if len(widths) == 1:
                widths.append(max_width)
            self.layers = nn.ModuleList(DenseLinear(a, b, generator) for a, b in zip(widths[:-1], widths[1:]))
            self.out_dim = widths[-1]
        else:
            raise ValueError(f"unknown context encoder {kind!r}")

    def forward(self, ctx):
        h = ctx
        for layer in self.layers:
            h = torch.relu(layer(h))
        return h


# ---------------------------------------------------------------------------
# the flow

PRESETS = {
    "affine": {"n_transforms": 5, "n_blocks": 5},
    "spline": {"n_transforms": 4, "n_blocks": 6},
    "diag": {"n_transforms": 1, "n_blocks": 0},
}


class CosmicFlow(nn.Module):
    """Saturated CoSMIC flow T(z|m) over d_max coordinates.

    kind: "affine" (Affine(5,5)), "spline" (Spline(4,6) plus a global affine),
    or "diag" (mean-field Gaussian driven by the context only).
    """

    def __init__(self, d_max: int, context_dim: int, kind: str = "spline",
                 n_transforms: Optional[int] = None, n_blocks: Optional[int] = None,
                 hidden: int = 32, n_bins: int = 8, bound: float = 5.0,
                 encoder: str = "identity", encoder_width: int = 4096,
                 seed: Optional[int] = None, generator: Optional[torch.Generator] = None):
        super().__init__()
        if kind not in PRESETS:
            raise ValueError(f"unknown flow kind {kind!r}; choose from {sorted(PRESETS)}")
        if generator is None and seed is not None:
            generator = torch.Generator().manual_seed(int(seed))
        self.kind = kind
        self.d_max = int(d_max)
        self.n_transforms = int(n_transforms if n_transforms is not None else PRESETS[kind]["n_transforms"])
        self.n_blocks = int(n_blocks if n_blocks is not None else PRESETS[kind]["n_blocks"])
        self.hidden = int(hidden)
        self.config = {
            "d_max": self.d_max, "context_dim": int(context_dim), "kind": kind,
            "n_transforms": self.n_transforms, "n_blocks": self.n_blocks, "hidden": self.hidden,
            "n_bins": int(n_bins), "bound": float(bound), "encoder": encoder,
            "encoder_width": int(encoder_width),
        }
        self.encoder = ContextEncoder(context_dim, encoder, encoder_width, generator)
        cdim = self.encoder.out_dim
        self.family = SplineFamily(n_bins, bound) if kind == "spline" else AffineFamily()
        if kind == "diag":
            self.diag_net = nn.ModuleList([
                DenseLinear(cdim, hidden, generator),
                DenseLinear(hidden, 2 * self.d_max, generator, zero=True),
            ])
            with torch.no_grad():
                self.diag_net[1].bias.copy_(torch.as_tensor(self.family.static_raw, dtype=DTYPE).repeat(self.d_max))
        else:
            self.steps = nn.ModuleList(
                ResidualMADE(self.d_max, hidden, self.n_blocks, self.family.n_params, cdim,
                             self.family.static_raw, generator)
                for _ in range(self.n_transforms))
        if kind == "spline":
            self.global_shift = nn.Parameter(torch.zeros((), dtype=DTYPE))
            self.global_scale_raw = nn.Parameter(torch.tensor(inv_softplus(1 - AFFINE_SCALE_FLOOR), dtype=DTYPE))
        self._affine = AffineFamily()

    # -- helpers
    def _prep(self, mask, ctx):
        mask = torch.as_tensor(mask).bool()
        if mask.shape[-1] != self.d_max:
            raise ValueError(f"mask has {mask.shape[-1]} coordinates, flow has {self.d_max}")
        return mask, self.encoder(torch.as_tensor(ctx, dtype=DTYPE))

    def _layout(self, mask):
        order = left_align(mask)
        dm = mask.sum(-1, keepdim=True)
        cols = torch.arange(self.d_max).expand_as(order)
        act = cols < dm
        rev = torch.where(act, dm - 1 - cols, cols)
        return order, invert_permutation(order), act, rev

    def _global(self, act):
        shift = self.global_shift.expand(act.shape)
        scale = (F.softplus(self.global_scale_raw) + AFFINE_SCALE_FLOOR).expand(act.shape)
        return self._affine.blend((shift, scale), act)

    def _diag_params(self, mask, c):
        raw = self.diag_net[1](torch.relu(self.diag_net[0](c))).reshape(-1, self.d_max, 2)
        return self.family.blend(self.family.activate(raw), mask)

    @staticmethod
    def _check(x, step):
        if not torch.isfinite(x).all():
            raise FlowDivergenceError(step)

    # -- forward T(z|m)
    def forward(self, z: torch.Tensor, mask, ctx):
        z = torch.as_tensor(z, dtype=DTYPE)
        mask, c = self._prep(mask, ctx)
        if self.kind == "diag":
            params = self._diag_params(mask, c)
            theta, ld = self.family.forward(z, params)
            self._check(theta, 0)
            return theta, ld.sum(-1)
        order, inv, act, rev = self._layout(mask)
        x = z.gather(-1, order)
        logdet = torch.zeros(z.shape[0], dtype=DTYPE)
        for k, made in enumerate(self.steps):
            if k > 0:
                x = x.gather(-1, rev)
            params = self.family.blend(self.family.activate(made(x, c)), act)
            x, ld = self.family.forward(x, params)
            self._check(x, k)
            logdet = logdet + ld.sum(-1)
        if self.kind == "spline":
            params = self._global(act)
            x, ld = self._affine.forward(x, params)
            self._check(x, self.n_transforms)
            logdet = logdet + ld.sum(-1)
        return x.gather(-1, inv), logdet

    # -- inverse: recover z from saturated theta
    def inverse(self, theta: torch.Tensor, mask, ctx):
        theta = torch.as_tensor(theta, dtype=DTYPE)
        mask, c = self._prep(mask, ctx)
        if self.kind == "diag":
            params = self._diag_params(mask, c)
            z, ld = self.family.inverse(theta, params)
            return z, ld.sum(-1)
        order, inv, act, rev = self._layout(mask)
        x = theta.gather(-1, order)
        logdet = torch.zeros(theta.shape[0], dtype=DTYPE)
        if self.kind == "spline":
            x, ld = self._affine.inverse(x, self._global(act))
            logdet = logdet + ld.sum(-1)
        n_iter = int(mask.sum(-1).max()) if mask.numel() else 0
        cols = torch.arange(self.d_max)
        for k in range(self.n_transforms - 1, -1, -1):
            made = self.steps[k]
            y = x
            x = y
            for i in range(n_iter):
                params = self.family.blend(self.family.activate(made(x, c)), act)
                xi, _ = self.family.inverse(y, params)
                x = torch.where((cols == i) & act, xi, x)
            params = self.family.blend(self.family.activate(made(x, c)), act)
            _, ld = self.family.forward(x, params)
            logdet = logdet + ld.sum(-1)
            self._check(x, k)
            if k > 0:
                x = x.gather(-1, rev)
        return x.gather(-1, inv), logdet

    # -- densities
    def saturated_logq(self, theta, mask, ctx):
        z, logdet = self.inverse(theta, mask, ctx)
        return std_normal_logpdf(z).sum(-1) - logdet

    def conditional_logq(self, theta, mask, ctx):
        """log q(theta_m | m); entries of theta at inactive coordinates are ignored."""
        theta = torch.as_tensor(theta, dtype=DTYPE)
        mask = torch.as_tensor(mask).bool()
        if theta.shape[-1] != self.d_max:
            raise ValueError(f"theta has {theta.shape[-1]} coordinates, flow has {self.d_max}")
        theta = torch.where(mask, theta, torch.zeros_like(theta))
        z, logdet = self.inverse(theta, mask, ctx)
        return (std_normal_logpdf(z) * mask).sum(-1) - logdet

    def sample(self, n, mask, ctx, generator=None):
        z = torch.randn(n, self.d_max, generator=generator, dtype=DTYPE)
        return self.forward(z, mask, ctx)


def flow_from_config(cfg: dict) -> CosmicFlow:
    return CosmicFlow(**cfg)


# ---------------------------------------------------------------------------
# checkpoints: JSON with shapes and flat double arrays


def module_to_record(module: nn.Module) -> dict:
    tensors = {}
    for name, t in module.state_dict().items():
        arr = t.detach().cpu().to(torch.float64).numpy()
        tensors[name] = {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
    return tensors


def record_to_module(module: nn.Module, tensors: dict, strict: bool = True):
    state = {}
    for name, rec in tensors.items():
        state[name] = torch.tensor(np.asarray(rec["data"], dtype=np.float64).reshape(rec["shape"]), dtype=DTYPE)
    module.load_state_dict(state, strict=strict)
    return module


def save_flow(flow: CosmicFlow, path, extra: Optional[dict] = None):
    rec = {"format": "vti-flow", "version": 1, "config": flow.config, "tensors": module_to_record(flow)}
    if extra:
        rec.update(extra)
    with open(path, "w") as fh:
        json.dump(rec, fh)


def load_flow(path) -> CosmicFlow:
    with open(path) as fh:
        rec = json.load(fh)
    flow = CosmicFlow(**rec["config"])
    return record_to_module(flow, rec["tensors"])
