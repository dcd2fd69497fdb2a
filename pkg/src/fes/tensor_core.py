"""Differentiable numerical substrate.

Arrays are float64 ``torch.Tensor`` objects; reverse-mode gradients come from
torch autograd.  Everything the model equations need on top of that (masked
softmax, multi-head attention, KL divergence, Adam, initialisation) lives here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, Optional, Tuple

import torch

DTYPE = torch.float64
LOG_EPS = 1e-10

DiffValue = torch.Tensor
ParamSet = Dict[str, torch.Tensor]


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    return torch.tensor(data, dtype=DTYPE, requires_grad=requires_grad)


def iter_params(params: ParamSet) -> Iterator[Tuple[str, torch.Tensor]]:
    """Deterministic (name-sorted) iteration over a parameter set."""
    for name in sorted(params):
        yield name, params[name]


def xavier_uniform(fan_in: int, fan_out: int, generator: torch.Generator) -> torch.Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    w = torch.rand(fan_in, fan_out, generator=generator, dtype=DTYPE) * 2 * bound - bound
    return w.requires_grad_(True)


def zeros(*shape: int) -> torch.Tensor:
    return torch.zeros(*shape, dtype=DTYPE, requires_grad=True)


def ones(*shape: int) -> torch.Tensor:
    return torch.ones(*shape, dtype=DTYPE, requires_grad=True)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def softmax(x: torch.Tensor, axis: int = -1, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Max-subtracted softmax along ``axis``.

    ``mask`` (broadcastable bool, True = keep) zeroes excluded entries.  At
    least one entry per row must be kept.
    """
    if not -x.dim() <= axis < max(x.dim(), 1):
        raise ShapeError(f"axis {axis} invalid for rank-{x.dim()} input")
    if mask is not None:
        x = x.masked_fill(~mask, float("-inf"))
    shift = x.max(dim=axis, keepdim=True).values.detach()
    e = torch.exp(x - shift)
    return e / e.sum(dim=axis, keepdim=True)


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * gain + bias


def linear(x: torch.Tensor, params: ParamSet, name: str) -> torch.Tensor:
    out = x @ params[f"{name}.w"]
    b = params.get(f"{name}.b")
    return out if b is None else out + b


def gelu(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def sinusoidal_positions(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=DTYPE)[:, None]
    i = torch.arange(0, dim, 2, dtype=DTYPE)[None, :]
    angle = pos / torch.pow(torch.tensor(10000.0, dtype=DTYPE), i / dim)
    pe = torch.zeros(length, dim, dtype=DTYPE)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : dim // 2])
    return pe


def multi_head_attention(
    query: torch.Tensor,
    key: torch.Tensor,
    value: torch.Tensor,
    params: ParamSet,
    heads: int,
    prefix: str = "",
    mask: Optional[torch.Tensor] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Scaled dot-product attention with per-head projections.

    query: (..., Lq, d); key/value: (..., Lk, d).  ``mask`` broadcasts to
    (..., Lq, Lk) with True marking attendable keys.  Returns the output
    (..., Lq, d) and weights (..., heads, Lq, Lk).

    Expects ``{prefix}q``, ``k``, ``v``, ``o`` linear layers in ``params``.
    """
    if key.shape[-2] != value.shape[-2]:
        raise ShapeError(f"key length {key.shape[-2]} != value length {value.shape[-2]}")
    d = query.shape[-1]
    if key.shape[-1] != d or value.shape[-1] != d:
        raise ShapeError("query/key/value model dimensions differ")
    if d % heads:
        raise ShapeError(f"model dimension {d} not divisible by {heads} heads")
    dh = d // heads

    def split(x: torch.Tensor) -> torch.Tensor:
        return x.reshape(*x.shape[:-1], heads, dh).transpose(-3, -2)

    q = split(linear(query, params, f"{prefix}q"))
    k = split(linear(key, params, f"{prefix}k"))
    v = split(linear(value, params, f"{prefix}v"))
    scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
    if mask is not None:
        mask = mask.unsqueeze(-3)
    weights = softmax(scores, axis=-1, mask=mask)
    ctx = (weights @ v).transpose(-3, -2)
    ctx = ctx.reshape(*ctx.shape[:-2], d)
    return linear(ctx, params, f"{prefix}o"), weights


def init_attention(params: ParamSet, prefix: str, d: int, gen: torch.Generator) -> None:
    for part in "qkvo":
        params[f"{prefix}{part}.w"] = xavier_uniform(d, d, gen)
        params[f"{prefix}{part}.b"] = zeros(d)


def kl_divergence(p: torch.Tensor, q: torch.Tensor, eps: float = LOG_EPS, check: bool = True) -> torch.Tensor:
    """KL(p || q) = sum p * (ln(p + eps) - ln(q + eps)) over the last axis."""
    if p.shape != q.shape:
        raise ShapeError(f"distribution shapes differ: {tuple(p.shape)} vs {tuple(q.shape)}")
    if check:
        for name, dist in (("p", p), ("q", q)):
            d = dist.detach()
            if (d < 0).any() or ((d.sum(-1) - 1).abs() > 1e-6).any():
                raise ContractError(f"{name} is not a normalized distribution")
    return (p * (torch.log(p + eps) - torch.log(q + eps))).sum(-1)


# ---------------------------------------------------------------------------
# gradients and optimisation
# ---------------------------------------------------------------------------


def backward(loss: torch.Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Gradients accumulate across calls until :func:`zero_grad`.  A second
    backward through the same forward graph is rejected.
    """
    if loss.numel() != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any differentiable input")
    try:
        loss.backward()
    except RuntimeError as exc:
        if "second time" in str(exc):
            raise ContractError("forward graph already consumed; re-run forward first") from exc
        raise


def zero_grad(params: ParamSet) -> None:
    for _, p in iter_params(params):
        p.grad = None


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, torch.Tensor] = field(default_factory=dict)
    v: Dict[str, torch.Tensor] = field(default_factory=dict)


def adam_step(
    params: ParamSet,
    state: AdamState,
    lr: float = 3e-5,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``params``."""
    if lr <= 0:
        raise ContractError("learning rate must be positive")
    missing = [n for n, p in iter_params(params) if p.grad is None]
    if missing:
        raise ContractError(f"no gradient for parameters: {', '.join(missing[:5])}")
    state.step += 1
    t = state.step
    c1 = 1 - beta1**t
    c2 = 1 - beta2**t
    with torch.no_grad():
        for name, p in iter_params(params):
            g = p.grad
            m = state.m.get(name)
            v = state.v.get(name)
            if m is None:
                m = torch.zeros_like(p)
                v = torch.zeros_like(p)
            m = beta1 * m + (1 - beta1) * g
            v = beta2 * v + (1 - beta2) * g * g
            state.m[name], state.v[name] = m, v
            p -= lr * (m / c1) / (torch.sqrt(v / c2) + eps)
    return state
