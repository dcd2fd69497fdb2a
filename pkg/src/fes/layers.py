"""Small building blocks shared by the encoder, decoder and language model."""

from __future__ import annotations

from typing import Optional

import torch

from . import tensor_core as tc
from .tensor_core import ParamSet


def init_ln(params: ParamSet, name: str, d: int) -> None:
    params[f"{name}.g"] = tc.ones(d)
    params[f"{name}.b"] = tc.zeros(d)


def ln(x: torch.Tensor, params: ParamSet, name: str) -> torch.Tensor:
    return tc.layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def init_ffn(params: ParamSet, name: str, d: int, hidden: int, gen: torch.Generator, d_out: Optional[int] = None) -> None:
    params[f"{name}.1.w"] = tc.xavier_uniform(d, hidden, gen)
    params[f"{name}.1.b"] = tc.zeros(hidden)
    params[f"{name}.2.w"] = tc.xavier_uniform(hidden, d if d_out is None else d_out, gen)
    params[f"{name}.2.b"] = tc.zeros(d if d_out is None else d_out)


def ffn(x: torch.Tensor, params: ParamSet, name: str) -> torch.Tensor:
    return tc.linear(tc.gelu(tc.linear(x, params, f"{name}.1")), params, f"{name}.2")


def dropout(x: torch.Tensor, rate: float, rng: Optional[torch.Generator]) -> torch.Tensor:
    """Inverted dropout; a no-op without ``rng`` (evaluation mode)."""
    if rng is None or rate <= 0:
        return x
    keep = torch.rand(x.shape, generator=rng, dtype=x.dtype) >= rate
    return x * keep / (1 - rate)


def causal_mask(length: int) -> torch.Tensor:
    return torch.ones(length, length, dtype=torch.bool).tril()


def embed(tokens: torch.Tensor, params: ParamSet, d: int, key: str = "emb") -> torch.Tensor:
    """Scaled embedding lookup plus sinusoidal positions."""
    x = params[key][tokens] * (d ** 0.5)
    return x + tc.sinusoidal_positions(tokens.shape[-1], d)
