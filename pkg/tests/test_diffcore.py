import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vti.diffcore import (DTYPE, Adam, NonFiniteLossError, backward, clip_by_global_norm, finite_difference_grad,
                          global_norm)


def test_backward_polynomial():
    x = torch.tensor(3.0, dtype=DTYPE, requires_grad=True)
    (g,) = backward(x * x, [x])
    assert float(g) == 6.0


def test_backward_constant_and_unused():
    x = torch.tensor(3.0, dtype=DTYPE, requires_grad=True)
    y = torch.tensor(1.0, dtype=DTYPE, requires_grad=True)
    gx, gy = backward(x * 0 + 2.0, [x, y])
    assert float(gx) == 0.0 and float(gy) == 0.0


def test_backward_rejects_nonscalar_and_nan():
    x = torch.ones(3, dtype=DTYPE, requires_grad=True)
    with pytest.raises(ValueError):
        backward(x * 2, [x])
    with pytest.raises(NonFiniteLossError):
        backward((x * float("nan")).sum(), [x])


def test_backward_deterministic():
    g = torch.Generator().manual_seed(0)
    w = torch.randn(20, 20, generator=g, dtype=DTYPE, requires_grad=True)
    x = torch.randn(20, generator=g, dtype=DTYPE)

    def loss():
        return torch.logsumexp(torch.tanh(w @ x), 0)

    a = backward(loss(), [w])[0]
    b = backward(loss(), [w])[0]
    assert torch.equal(a, b)


def test_primitives_match_finite_differences(rng):
    # closure of ops the flows and losses use
    x0 = torch.tensor(rng.normal(size=6), dtype=DTYPE)
    W = torch.tensor(rng.normal(size=(4, 6)), dtype=DTYPE)
    idx = torch.tensor([2, 0, 5, 1])

    def f(x):
        h = W @ x
        a = torch.nn.functional.softplus(h) * torch.sigmoid(h) + torch.relu(h + 0.3)
        b = torch.where(h > 0, torch.exp(-h * h), torch.log1p(h * h))
        c = x.gather(0, idx) / (1.5 + torch.tanh(x[:4]))
        return torch.logsumexp(a + b + c, 0)

    x = x0.clone().requires_grad_(True)
    (g,) = backward(f(x), [x])
    fd = finite_difference_grad(f, x0)
    assert torch.allclose(g, fd, rtol=1e-6, atol=1e-8)


def _numpy_adam(g_seq, p0, lr, b1=0.9, b2=0.999, eps=1e-8):
    p, m, v = np.array(p0, float), 0.0, 0.0
    for t, g in enumerate(g_seq, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def test_adam_first_step():
    p = torch.zeros(1, dtype=DTYPE)
    opt = Adam([p], lr=0.1)
    opt.step([torch.ones(1, dtype=DTYPE)])
    assert abs(float(p) + 0.1 / (1 + 1e-8)) < 1e-15
    assert opt.t == 1


def test_adam_zero_gradient_keeps_params():
    p = torch.tensor([1.0, -2.0], dtype=DTYPE)
    opt = Adam([p], lr=0.1)
    opt.step([torch.zeros(2, dtype=DTYPE)])
    assert p.tolist() == [1.0, -2.0]


def test_adam_quadratic_converges():
    p = torch.zeros(1, dtype=DTYPE)
    opt = Adam([p], lr=0.1)
    for _ in range(200):
        opt.step([2 * (p - 2)])
    assert abs(float(p) - 2) < 1e-3


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=30), st.floats(1e-4, 0.5))
def test_adam_matches_numpy_reference(gs, lr):
    p = torch.zeros(1, dtype=DTYPE)
    opt = Adam([p], lr=lr)
    for g in gs:
        opt.step([torch.tensor([g], dtype=DTYPE)])
    assert abs(float(p) - _numpy_adam(gs, [0.0], lr)[0]) < 1e-12


def test_adam_shape_mismatch():
    p = torch.zeros(2, dtype=DTYPE)
    with pytest.raises(ValueError):
        Adam([p]).step([torch.zeros(3, dtype=DTYPE)])


def test_adam_state_roundtrip():
    p = torch.zeros(3, dtype=DTYPE)
    opt = Adam([p], lr=0.05)
    for k in range(3):
        opt.step([torch.full((3,), float(k + 1), dtype=DTYPE)])
    q = p.clone()
    opt2 = Adam([q], lr=0.05)
    opt2.load_state_dict(opt.state_dict())
    g = torch.tensor([0.3, -1.0, 2.0], dtype=DTYPE)
    opt.step([g])
    opt2.step([g])
    assert torch.equal(p, q)


def test_clip_examples():
    g = [torch.tensor([3.0, 4.0], dtype=DTYPE)]
    assert clip_by_global_norm(g, 10)[0].tolist() == [3.0, 4.0]
    out = clip_by_global_norm(g, 1)[0]
    assert torch.allclose(out, torch.tensor([0.6, 0.8], dtype=DTYPE), atol=1e-15)
    z = [torch.zeros(2, dtype=DTYPE)]
    assert clip_by_global_norm(z, 1)[0].tolist() == [0.0, 0.0]
    with pytest.raises(ValueError):
        clip_by_global_norm(g, 0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=12), st.floats(1e-3, 1e3))
def test_clip_never_increases_norm(vals, max_norm):
    g = [torch.tensor(vals, dtype=DTYPE)]
    n0 = global_norm(g)
    n1 = global_norm(clip_by_global_norm(g, max_norm))
    assert n1 <= n0 * (1 + 1e-12)
    assert n1 <= max(max_norm, n0) * (1 + 1e-12)
    assert math.isclose(global_norm(g), math.hypot(*vals), rel_tol=1e-12, abs_tol=1e-300)  # hypot avoids underflow
