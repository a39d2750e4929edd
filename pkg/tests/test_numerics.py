import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from recipseq.numerics import (
    Adam,
    AdamState,
    AttentionMask,
    EmptySupportError,
    adam_step,
    finite_diff_check,
    masked_row_softmax,
    masked_softmax,
)


def test_softmax_uniform_logits():
    out = masked_row_softmax(torch.zeros(3, dtype=torch.float64), [True, True, True])
    assert torch.allclose(out, torch.full((3,), 1 / 3, dtype=torch.float64))


def test_softmax_single_support():
    out = masked_row_softmax(torch.tensor([5.0, 7.0], dtype=torch.float64), [True, False])
    assert out.tolist() == [1.0, 0.0]


def test_softmax_matches_exp_normalize():
    # independently: [e/sum(e) for e in exp(1,2,3)]
    expected = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219]
    out = masked_row_softmax(torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64), [True] * 3)
    assert out.tolist() == pytest.approx(expected, abs=1e-6)
    assert out.tolist() == pytest.approx([0.090031, 0.244728, 0.665241], abs=1e-6)


def test_softmax_empty_support_raises():
    with pytest.raises(EmptySupportError, match="empty attention support"):
        masked_row_softmax(torch.tensor([1.0, 2.0]), [False, False])


def test_softmax_is_stable_for_huge_logits():
    out = masked_row_softmax(torch.tensor([1e4, 1e4 + 1, 1e9], dtype=torch.float64), [True, True, False])
    assert torch.isfinite(out).all()
    assert out[2] == 0.0
    assert out.sum().item() == pytest.approx(1.0)


def test_softmax_random_pairs_property():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        m = int(rng.integers(1, 12))
        logits = torch.tensor(rng.normal(scale=rng.uniform(0.1, 50), size=m))
        valid = rng.random(m) < 0.6
        valid[rng.integers(m)] = True
        out = masked_row_softmax(logits, valid)
        assert (out >= 0).all()
        assert abs(out.sum().item() - 1.0) < 1e-9
        assert (out[~torch.from_numpy(valid)] == 0).all()


def test_batched_softmax_fully_masked_row_is_zero_without_nan_grad():
    x = torch.randn(2, 4, dtype=torch.float64, requires_grad=True)
    valid = torch.tensor([[True, False, True, False], [False] * 4])
    out = masked_softmax(x, valid)
    assert (out[1] == 0).all()
    (out * torch.arange(4.0, dtype=torch.float64)).sum().backward()
    assert torch.isfinite(x.grad).all()


# ----------------------------------------------------------------- masks


def test_attention_mask_rejects_attended_padding():
    allow = torch.ones(3, 3, dtype=torch.bool)
    with pytest.raises(ValueError, match="padding"):
        AttentionMask(allow, n=2, valid_len=1)


def test_attention_mask_rejects_empty_row():
    allow = torch.eye(3, dtype=torch.bool)
    allow[1, 1] = False
    with pytest.raises(ValueError):
        AttentionMask(allow, n=2, valid_len=2)


# ------------------------------------------------------------- grad check


def test_finite_diff_polynomial():
    theta = torch.tensor([3.0], dtype=torch.float64, requires_grad=True)
    rep = finite_diff_check(lambda: (theta**2).sum(), [("theta", theta)], h=1e-4)
    assert rep.max_rel_err["theta"] < 1e-8
    assert rep.ok


def test_finite_diff_constant_passes_absolutely():
    theta = torch.tensor([1.5, -2.0], dtype=torch.float64, requires_grad=True)
    rep = finite_diff_check(lambda: theta.sum() * 0 + 4.0, [("theta", theta)])
    assert rep.max_rel_err["theta"] == 0.0
    assert rep.ok


def test_finite_diff_flags_wrong_gradient():
    theta = torch.tensor([2.0], dtype=torch.float64, requires_grad=True)

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x**3

        @staticmethod
        def backward(ctx, g):
            return g * 0.0 + 1.0

    rep = finite_diff_check(lambda: Wrong.apply(theta).sum(), [("theta", theta)])
    assert not rep.ok


def test_finite_diff_nonfinite_loss_raises():
    theta = torch.tensor([0.0], dtype=torch.float64, requires_grad=True)
    with pytest.raises(FloatingPointError):
        finite_diff_check(lambda: (1.0 / theta).sum(), [("theta", theta)])


def _dbl(*shape, gen):
    return torch.randn(*shape, generator=gen, dtype=torch.float64, requires_grad=True)


@pytest.mark.parametrize("seed,op", list(enumerate(["matmul", "add", "masked_softmax", "scale", "gather"])))
def test_model_primitives_match_central_differences(seed, op):
    gen = torch.Generator().manual_seed(seed)
    a = _dbl(3, 4, gen=gen)
    b = _dbl(4, 2, gen=gen)
    c = _dbl(3, 4, gen=gen)
    w = torch.randn(3, 4, generator=gen, dtype=torch.float64)
    valid = torch.tensor([[True, True, False, True], [True, False, False, False], [True, True, True, True]])
    idx = torch.tensor([2, 0, 2, 1])
    fns = {
        "matmul": (lambda: ((a @ b) ** 2).sum(), [("a", a), ("b", b)]),
        "add": (lambda: ((a + c) * w).sum() ** 2, [("a", a), ("c", c)]),
        "masked_softmax": (lambda: (masked_softmax(a, valid) * w).sum(), [("a", a)]),
        "scale": (lambda: torch.exp(a * 0.37).sum(), [("a", a)]),
        "gather": (lambda: (a[idx] * torch.cat([w, w[:1]])).sum() ** 2, [("a", a)]),
    }
    fn, params = fns[op]
    rep = finite_diff_check(fn, params, h=1e-4, tol=1e-4)
    assert rep.ok, rep.max_rel_err


# ------------------------------------------------------------------- adam


def _param(values, grad):
    p = torch.tensor(values, dtype=torch.float64, requires_grad=True)
    p.grad = torch.tensor(grad, dtype=torch.float64)
    return p, AdamState(torch.zeros_like(p), torch.zeros_like(p))


def test_adam_zero_gradient_keeps_parameter():
    p, s = _param([1.0, -2.0], [0.0, 0.0])
    adam_step(p, s, lr=0.1)
    assert p.tolist() == [1.0, -2.0]


def test_adam_first_step_is_lr_times_sign():
    p, s = _param([0.5, 0.5, 0.5], [3.0, -0.01, 200.0])
    adam_step(p, s, lr=0.01)
    assert (p.detach() - 0.5).tolist() == pytest.approx([-0.01, 0.01, -0.01], rel=1e-6)


def test_adam_two_step_trace_matches_scalar_recursion():
    # hand recursion: m1=0.1 v1=1e-3 -> theta1=-0.1/(1+1e-8);
    # m2=-0.01 v2=1.999e-3 -> m2_hat=-0.0526315..., v2_hat=1
    p, s = _param([0.0], [1.0])
    adam_step(p, s, lr=0.1, betas=(0.9, 0.999), eps=1e-8)
    assert p.item() == pytest.approx(-0.09999999900000002, abs=1e-10)
    p.grad = torch.tensor([-1.0], dtype=torch.float64)
    adam_step(p, s, lr=0.1, betas=(0.9, 0.999), eps=1e-8)
    assert s.exp_avg.item() == pytest.approx(-0.01, abs=1e-12)
    assert s.exp_avg_sq.item() == pytest.approx(0.001999, abs=1e-12)
    assert p.item() == pytest.approx(-0.0947368411578948, abs=1e-10)
    assert s.step == 2


def test_adam_weight_decay_is_l2_on_gradient():
    p, s = _param([2.0], [0.0])
    adam_step(p, s, lr=0.1, weight_decay=0.5)
    # effective gradient 0.5 * 2 = 1 > 0, so the first step moves by -lr
    assert p.item() == pytest.approx(1.9, rel=1e-6)


def test_adam_rejects_nonfinite_gradient():
    p, s = _param([1.0], [float("nan")])
    with pytest.raises(FloatingPointError, match="emb.table"):
        adam_step(p, s, lr=0.1, name="emb.table")


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6), st.integers(1, 4))
def test_adam_deterministic_and_moments_nonnegative(grads, steps):
    def run():
        p, s = _param([0.3] * len(grads), grads)
        for _ in range(steps):
            p.grad = torch.tensor(grads, dtype=torch.float64)
            adam_step(p, s, lr=0.01, weight_decay=1e-5)
        return p.detach().clone(), s

    (p1, s1), (p2, s2) = run(), run()
    assert torch.equal(p1, p2)
    assert (s1.exp_avg_sq >= 0).all()
    assert s1.step == steps


def test_optimizer_fills_missing_gradients_with_zeros():
    a = torch.nn.Parameter(torch.ones(2))
    b = torch.nn.Parameter(torch.ones(2))
    opt = Adam([("a", a), ("b", b)], lr=0.1)
    (a * 3).sum().backward()
    opt.step()
    assert b.tolist() == [1.0, 1.0]
    assert a[0].item() == pytest.approx(0.9)
    assert math.isfinite(a.sum().item())
