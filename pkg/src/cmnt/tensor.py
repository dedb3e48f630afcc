"""Differentiable building blocks shared by every model variant.

All arithmetic runs in float64 on top of torch's reverse-mode autograd.  The
functions here validate their inputs more strictly than the torch primitives
they wrap, because the gradient checks and normalisation properties of the
whole system lean on them.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional

import torch
from torch import Tensor, nn

DTYPE = torch.float64
LN_EPS = 1e-6


class NumericError(ValueError):
    """Raised for degenerate numeric inputs (empty, NaN, fully masked rows)."""


_value_checks = True


@contextlib.contextmanager
def value_checks_disabled():
    """Skip data-dependent NaN checks (required inside ``torch.func.vmap``)."""
    global _value_checks
    saved, _value_checks = _value_checks, False
    try:
        yield
    finally:
        _value_checks = saved


def softmax(v: Tensor, dim: int = -1) -> Tensor:
    """Max-subtracted softmax along ``dim``."""
    if v.numel() == 0 or v.shape[dim] == 0:
        raise NumericError("softmax of an empty vector")
    if _value_checks and torch.isnan(v).any():
        raise NumericError("softmax input contains NaN")
    shifted = v - v.max(dim=dim, keepdim=True).values.detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def log_softmax(v: Tensor, dim: int = -1) -> Tensor:
    if v.numel() == 0 or v.shape[dim] == 0:
        raise NumericError("log_softmax of an empty vector")
    shifted = v - v.max(dim=dim, keepdim=True).values.detach()
    return shifted - torch.log(torch.exp(shifted).sum(dim=dim, keepdim=True))


def layer_norm(v: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    n = v.shape[-1]
    if n < 2:
        raise ValueError("layer_norm needs at least two features")
    if gain.shape[-1] != n or bias.shape[-1] != n:
        raise ValueError(
            f"layer_norm length mismatch: input {n}, gain {gain.shape[-1]}, bias {bias.shape[-1]}"
        )
    mean = v.mean(dim=-1, keepdim=True)
    centered = v - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    return centered / torch.sqrt(var + eps) * gain + bias


def dropout(x: Tensor, rate: float, training: bool, generator: Optional[torch.Generator] = None) -> Tensor:
    """Inverted dropout; the identity when not training or rate == 0."""
    if not training or rate <= 0.0:
        return x
    keep = torch.rand(x.shape, dtype=x.dtype, generator=generator) >= rate
    return x * keep / (1.0 - rate)


def cross_entropy(dist: Tensor, target: int) -> Tensor:
    """Negative log-probability (nats) of ``target`` under a probability vector."""
    if dist.dim() != 1:
        raise ValueError("cross_entropy expects a single probability vector")
    if not 0 <= target < dist.shape[0]:
        raise IndexError(f"target {target} outside distribution of size {dist.shape[0]}")
    total = float(dist.sum())
    if abs(total - 1.0) > 1e-6:
        raise NumericError(f"distribution sums to {total}, not 1")
    return -torch.log(dist[target])


def scaled_dot_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: Optional[Tensor] = None,
    bias: Optional[Tensor] = None,
) -> tuple[Tensor, Tensor]:
    """Attention over the second-to-last axis of ``k``/``v``.

    ``mask`` is boolean and broadcastable to the score matrix; True marks a
    visible key.  ``bias`` is an additive float term on the scores.  Returns
    ``(output, weights)``.
    """
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if bias is not None:
        scores = scores + bias
    if mask is not None:
        if not mask.any(dim=-1).all():
            raise NumericError("attention query row has every key masked")
        scores = scores.masked_fill(~mask, float("-inf"))
    weights = softmax(scores, dim=-1)
    return weights @ v, weights


class LayerNorm(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(dim, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(dim, dtype=DTYPE))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


def linear(d_in: int, d_out: int, bias: bool = True) -> nn.Linear:
    layer = nn.Linear(d_in, d_out, bias=bias, dtype=DTYPE)
    nn.init.xavier_uniform_(layer.weight)
    if bias:
        nn.init.zeros_(layer.bias)
    return layer


class MultiHeadAttention(nn.Module):
    """Multi-head scaled dot-product attention with input/output projections.

    Tensors are batch-first: ``(batch, time, dim)``.  Key/value projection is
    exposed separately so decoders can cache it.
    """

    def __init__(self, dim: int, heads: int, dropout_rate: float = 0.0):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"model dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.dropout_rate = dropout_rate
        self.w_q = linear(dim, dim)
        self.w_k = linear(dim, dim)
        self.w_v = linear(dim, dim)
        self.w_o = linear(dim, dim)
        self.last_weights: Optional[Tensor] = None

    def _split(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.heads, self.head_dim).transpose(1, 2)

    def project_kv(self, x: Tensor) -> tuple[Tensor, Tensor]:
        return self._split(self.w_k(x)), self._split(self.w_v(x))

    def attend(
        self,
        query: Tensor,
        k: Tensor,
        v: Tensor,
        mask: Optional[Tensor] = None,
        bias: Optional[Tensor] = None,
    ) -> Tensor:
        """``mask``/``bias`` broadcast against ``(batch, heads, tq, tk)``."""
        q = self._split(self.w_q(query))
        out, weights = scaled_dot_attention(q, k, v, mask, bias)
        self.last_weights = weights
        b, _, t, _ = out.shape
        out = out.transpose(1, 2).reshape(b, t, self.dim)
        return self.w_o(out)

    def forward(self, query, key, value, mask=None, bias=None):
        k = self._split(self.w_k(key))
        v = self._split(self.w_v(value))
        return self.attend(query, k, v, mask, bias)


def multi_head_attention(
    queries: Tensor,
    keys: Tensor,
    values: Tensor,
    mask: Optional[Tensor],
    heads: int,
    module: Optional[MultiHeadAttention] = None,
) -> Tensor:
    """Functional entry point for unbatched ``(rows, dim)`` matrices.

    With no ``module`` given, all projections are the identity.
    """
    if keys.shape[0] != values.shape[0]:
        raise ValueError("key and value row counts differ")
    dim = queries.shape[-1]
    if dim % heads != 0:
        raise ValueError(f"model dim {dim} not divisible by {heads} heads")
    if mask is not None and tuple(mask.shape) != (queries.shape[0], keys.shape[0]):
        raise ValueError("mask shape must be (query rows, key rows)")
    if module is None:
        module = MultiHeadAttention(dim, heads)
        with torch.no_grad():
            for lin in (module.w_q, module.w_k, module.w_v, module.w_o):
                lin.weight.copy_(torch.eye(dim, dtype=DTYPE))
                lin.bias.zero_()
    m = None if mask is None else mask[None, None]
    return module(queries[None], keys[None], values[None], m)[0]


# ---------------------------------------------------------------------------
# Optimisation


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    step: int = 0
    m: dict[str, Tensor] = field(default_factory=dict)
    v: dict[str, Tensor] = field(default_factory=dict)


@torch.no_grad()
def adam_step(params: Mapping[str, Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update, in place, over named parameters."""
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for name, p in params.items():
        g = p.grad
        if name not in state.m:
            state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        update = (m / bc1) / (torch.sqrt(v / bc2) + state.eps)
        p.sub_(state.lr * update)


# ---------------------------------------------------------------------------
# Gradient checking


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    epsilon: float = 1e-5,
    floor: float = 1e-5,
) -> float:
    """Worst relative error between autograd and central differences.

    The relative error of one coordinate is ``|a - n| / max(|a|, |n|, floor)``;
    ``floor`` keeps coordinates whose true gradient is ~0 from dividing noise
    by noise.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-6, 1e-3]")
    params = list(params)
    if not params:
        return 0.0
    for p in params:
        p.grad = None
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NumericError("loss is not finite")
    loss.backward()
    worst = 0.0
    with torch.no_grad():
        for p in params:
            analytic = p.grad.reshape(-1) if p.grad is not None else torch.zeros(p.numel(), dtype=p.dtype)
            flat = p.data.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + epsilon
                up = loss_fn().item()
                flat[i] = orig - epsilon
                down = loss_fn().item()
                flat[i] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise NumericError("loss is not finite under perturbation")
                numeric = (up - down) / (2.0 * epsilon)
                a = analytic[i].item()
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, err)
    return worst


def module_finite_difference_check(
    module: nn.Module,
    loss_fn: Callable[[], Tensor],
    epsilon: float = 1e-5,
    floor: float = 1e-5,
    chunk: int = 512,
) -> float:
    """:func:`finite_difference_check` over every parameter of ``module``.

    Same estimator and error measure, but all perturbed copies of one
    parameter tensor are evaluated in a single vectorised call.  ``loss_fn``
    must read the parameters through ``module``.
    """
    from torch.func import functional_call, vmap

    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-6, 1e-3]")
    named = dict(module.named_parameters())
    if not named:
        return 0.0
    module.zero_grad(set_to_none=True)
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NumericError("loss is not finite")
    loss.backward()
    base = {"inner." + k: v.detach().clone() for k, v in named.items()}
    base.update({"inner." + k: v for k, v in module.named_buffers()})
    holder = _LossHolder(module, loss_fn)
    worst = 0.0
    with torch.no_grad(), value_checks_disabled():
        for name, p in named.items():
            key = "inner." + name
            grad = p.grad
            p = p.detach()
            n = p.numel()
            analytic = torch.zeros(n, dtype=p.dtype) if grad is None else grad.reshape(-1)
            numeric = torch.empty(n, dtype=p.dtype)

            def perturbed(value, key=key):
                return functional_call(holder, {**base, key: value}, ())

            for start in range(0, n, chunk):
                idx = torch.arange(start, min(n, start + chunk))
                delta = torch.zeros(len(idx), n, dtype=p.dtype)
                delta[torch.arange(len(idx)), idx] = epsilon
                flat = p.reshape(1, -1)
                stack = torch.cat([flat + delta, flat - delta]).reshape(-1, *p.shape)
                losses = vmap(perturbed)(stack)
                if not torch.isfinite(losses).all():
                    raise NumericError("loss is not finite under perturbation")
                numeric[idx] = (losses[: len(idx)] - losses[len(idx) :]) / (2.0 * epsilon)
            denom = torch.clamp(torch.maximum(analytic.abs(), numeric.abs()), min=floor)
            worst = max(worst, float(((analytic - numeric).abs() / denom).max()))
    return worst


class _LossHolder(nn.Module):
    def __init__(self, inner: nn.Module, loss_fn):
        super().__init__()
        self.inner = inner
        self.loss_fn = loss_fn

    def forward(self):
        return self.loss_fn()
