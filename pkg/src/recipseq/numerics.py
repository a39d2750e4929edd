"""Numerical substrate: masked softmax, attention masks, Adam, gradient checks.

Reverse-mode differentiation is delegated to ``torch.autograd``; everything
that decides what the gradients *should* be (finite differences) is written
here against plain float64 tensors so the two routes stay independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import torch

__all__ = [
    "AttentionMask",
    "Adam",
    "AdamState",
    "GradCheckReport",
    "adam_step",
    "finite_diff_check",
    "masked_row_softmax",
    "masked_softmax",
]


class EmptySupportError(ValueError):
    pass


@dataclass
class AttentionMask:
    """Boolean ``(n+1, n+1)`` grid; ``allow[i, j]`` means row i may attend column j."""

    allow: torch.Tensor
    n: int
    valid_len: int

    def __post_init__(self):
        if self.allow.shape != (self.n + 1, self.n + 1):
            raise ValueError(f"mask shape {tuple(self.allow.shape)} != {(self.n + 1, self.n + 1)}")
        if not 0 <= self.valid_len <= self.n:
            raise ValueError(f"valid_len {self.valid_len} outside [0, {self.n}]")
        if not bool(self.allow.any(dim=1).all()):
            raise ValueError("every mask row needs at least one allowed column")
        pad_cols = self.allow[:, self.valid_len + 1 :]
        eye = torch.eye(self.n + 1, dtype=torch.bool)[:, self.valid_len + 1 :]
        # padding columns may only be seen by their own (padding) row
        if bool((pad_cols & ~eye).any()):
            raise ValueError("padding columns must never be attended")

    def rows(self) -> list[set[int]]:
        return [set(torch.nonzero(r).flatten().tolist()) for r in self.allow]


def masked_row_softmax(logits, valid) -> torch.Tensor:
    """Softmax over the ``valid`` entries of a 1-d vector; invalid entries are exactly 0."""
    logits = torch.as_tensor(logits, dtype=torch.get_default_dtype()) if not torch.is_tensor(logits) else logits
    valid = torch.as_tensor(valid, dtype=torch.bool)
    if logits.shape != valid.shape or logits.dim() != 1:
        raise ValueError("logits and valid must be equal-length vectors")
    if not bool(valid.any()):
        raise EmptySupportError("empty attention support")
    return masked_softmax(logits, valid, dim=0)


def masked_softmax(logits: torch.Tensor, valid: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Batched masked softmax. Rows with no valid entry come back all-zero.

    Max-subtraction runs over valid entries only, so a huge logit at a masked
    position cannot underflow the real ones.
    """
    valid = valid.expand_as(logits)
    neg_inf = torch.finfo(logits.dtype).min
    filled = logits.masked_fill(~valid, neg_inf)
    shift = filled.amax(dim=dim, keepdim=True).detach()
    # fully masked rows: shift is finfo.min, keep it finite and harmless
    shift = torch.where(valid.any(dim=dim, keepdim=True), shift, torch.zeros_like(shift))
    ex = torch.exp((logits - shift).masked_fill(~valid, -math.inf))
    denom = ex.sum(dim=dim, keepdim=True)
    return ex / torch.where(denom > 0, denom, torch.ones_like(denom))


# --------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    exp_avg: torch.Tensor
    exp_avg_sq: torch.Tensor
    step: int = 0


def adam_step(
    param: torch.Tensor,
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    name: str = "param",
) -> None:
    """In-place bias-corrected Adam update with L2 weight decay folded into the gradient."""
    grad = param.grad
    if grad is None:
        raise ValueError(f"no gradient populated for {name}")
    if not bool(torch.isfinite(grad).all()):
        raise FloatingPointError(f"non-finite gradient in {name}")
    beta1, beta2 = betas
    with torch.no_grad():
        g = grad + weight_decay * param if weight_decay else grad
        state.step += 1
        state.exp_avg.mul_(beta1).add_(g, alpha=1 - beta1)
        state.exp_avg_sq.mul_(beta2).addcmul_(g, g, value=1 - beta2)
        m_hat = state.exp_avg / (1 - beta1**state.step)
        v_hat = state.exp_avg_sq / (1 - beta2**state.step)
        param.sub_(lr * m_hat / (v_hat.sqrt() + eps))


class Adam:
    """Minimal optimizer driving :func:`adam_step` over named parameters."""

    def __init__(self, named_params: Iterable[tuple[str, torch.Tensor]], lr=1e-3,
                 betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = [(n, p) for n, p in named_params if p.requires_grad]
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = {
            n: AdamState(torch.zeros_like(p), torch.zeros_like(p)) for n, p in self.params
        }

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self):
        for name, p in self.params:
            if p.grad is None:
                # unused this step (e.g. micro-only weights with lambda=0); L2 still applies
                p.grad = torch.zeros_like(p)
            adam_step(p, self.state[name], self.lr, self.betas, self.eps, self.weight_decay, name)


# ------------------------------------------------------- finite differences


@dataclass
class GradCheckReport:
    max_rel_err: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def passed(self) -> dict[str, bool]:
        return {k: v < self.tol for k, v in self.max_rel_err.items()}

    @property
    def ok(self) -> bool:
        return all(self.passed.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)


def _rel_err(analytic: float, numeric: float, abs_floor: float) -> float:
    scale = max(abs(analytic), abs(numeric))
    if scale < abs_floor:
        # both effectively zero: compare absolutely
        return abs(analytic - numeric)
    return abs(analytic - numeric) / scale


def finite_diff_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[tuple[str, torch.Tensor]],
    h: float = 1e-4,
    tol: float = 1e-4,
    max_entries: int | None = None,
    abs_floor: float = 1e-7,
    generator: torch.Generator | None = None,
) -> GradCheckReport:
    """Compare autograd gradients against central differences ``(L(θ+h)-L(θ-h))/2h``.

    ``loss_fn`` must be deterministic and close over ``params``.  Entries are
    all checked unless ``max_entries`` caps the count per tensor (then a
    random subset is drawn from ``generator``).
    """
    for name, p in params:
        p.grad = None
    loss = loss_fn()
    if not bool(torch.isfinite(loss)):
        raise FloatingPointError("non-finite loss in gradient check")
    grads = torch.autograd.grad(loss, [p for _, p in params], allow_unused=True)

    report = GradCheckReport(tol=tol)
    with torch.no_grad():
        for (name, p), g in zip(params, grads):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            gflat = g.reshape(-1)
            idx = range(flat.numel())
            if max_entries is not None and flat.numel() > max_entries:
                idx = torch.randperm(flat.numel(), generator=generator)[:max_entries].tolist()
            worst = 0.0
            count = 0
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise FloatingPointError(f"non-finite loss perturbing {name}[{i}]")
                numeric = (up - down) / (2 * h)
                worst = max(worst, _rel_err(gflat[i].item(), numeric, abs_floor))
                count += 1
            report.max_rel_err[name] = worst
            report.checked[name] = count
    return report
