"""Projected Gated Convolution (PGC) block.

Input of width ``d`` is projected to ``2h`` and RMS-normalised, split into a
convolution half and a gate half, multiplied elementwise after a depthwise
kernel-3 convolution of the first half, then projected back to ``d`` and
normalised again.

The module also carries a bare gated unit (depthwise conv times a linear
pathway, no projections or norms) together with its fully expanded
second-order form, which serves as an algebraic cross-check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import (
    Parameter,
    Rng,
    ShapeError,
    Tensor,
    as_tensor,
    depthwise_conv1d,
    linear,
    rmsnorm,
    split,
)


@dataclass
class PGCParams:
    d: int
    h: int
    W_in: Parameter  # (2h, d)
    b_in: Parameter  # (2h,)
    gamma_in: Parameter  # (2h,)
    W_conv: Parameter  # (h, 3)
    b_conv: Parameter  # (h,)
    W_out: Parameter  # (d, h)
    b_out: Parameter  # (d,)
    gamma_out: Parameter  # (d,)
    dropout_p: float = 0.0  # kept for config parity; not applied inside the block

    def parameters(self) -> list[tuple[str, Parameter]]:
        return [("in_proj.weight", self.W_in), ("in_proj.bias", self.b_in),
                ("in_norm.weight", self.gamma_in), ("conv.weight", self.W_conv),
                ("conv.bias", self.b_conv), ("out_proj.weight", self.W_out),
                ("out_proj.bias", self.b_out), ("norm.weight", self.gamma_out)]


def _uniform(rng: Rng, fan_in: int, shape, dtype) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_pgc(d: int, h: int, rng: Rng, dropout: float = 0.0, dtype=np.float64) -> PGCParams:
    if d < 1 or h < 1:
        raise ValueError(f"PGC widths must be >= 1, got d={d}, h={h}")
    P = Parameter
    return PGCParams(
        d, h,
        W_in=P(_uniform(rng, d, (2 * h, d), dtype), "in_proj.weight"),
        b_in=P(_uniform(rng, d, 2 * h, dtype), "in_proj.bias"),
        gamma_in=P(np.ones(2 * h, dtype=dtype), "in_norm.weight"),
        W_conv=P(_uniform(rng, 3, (h, 3), dtype), "conv.weight"),
        b_conv=P(_uniform(rng, 3, h, dtype), "conv.bias"),
        W_out=P(_uniform(rng, h, (d, h), dtype), "out_proj.weight"),
        b_out=P(_uniform(rng, h, d, dtype), "out_proj.bias"),
        gamma_out=P(np.ones(d, dtype=dtype), "norm.weight"),
        dropout_p=dropout,
    )


def pgc_forward(u, params: PGCParams, rng: Rng | None = None, training: bool = False) -> Tensor:
    """(B, L, d) -> (B, L, d)."""
    u = as_tensor(u)
    if u.ndim != 3 or u.shape[-1] != params.d:
        raise ShapeError(f"pgc_forward expects (B, L, {params.d}), got {u.shape}")
    xv = rmsnorm(linear(u, params.W_in, params.b_in), params.gamma_in)
    x, v = split(xv, axis=-1)
    x_conv = depthwise_conv1d(x, params.W_conv, params.b_conv)
    gate = v * x_conv
    return rmsnorm(linear(gate, params.W_out, params.b_out), params.gamma_out)


# ---------------------------------------------------------------------------
# Bare gated unit
# ---------------------------------------------------------------------------


@dataclass
class GatedUnitParams:
    W_conv: np.ndarray  # (3, d); tap j multiplies u[i + j - 1]
    W_lin: np.ndarray  # (d, d)
    b_lin: np.ndarray  # (d,)

    @classmethod
    def random(cls, d: int, rng: Rng) -> "GatedUnitParams":
        return cls(rng.normal(size=(3, d)), rng.normal(size=(d, d)), rng.normal(size=d))


def gated_unit_forward(u: np.ndarray, params: GatedUnitParams) -> np.ndarray:
    """out = depthwise_conv(u) * (u @ W_lin.T + b_lin) for u of shape (L, d)."""
    u = np.asarray(u, dtype=np.float64)
    L, d = u.shape
    pad = np.zeros((L + 2, d))
    pad[1:-1] = u
    Wc = params.W_conv
    u_conv = Wc[0] * pad[:-2] + Wc[1] * pad[1:-1] + Wc[2] * pad[2:]
    u_lin = u @ params.W_lin.T + params.b_lin
    return u_conv * u_lin


def gated_unit_expansion(u: np.ndarray, params: GatedUnitParams) -> np.ndarray:
    """The same map written as its explicit quadratic cross-term sum plus the
    bias-driven linear part, evaluated term by term."""
    u = np.asarray(u, dtype=np.float64)
    L, d = u.shape
    Wc, Wl, bl = params.W_conv, params.W_lin, params.b_lin
    out = np.zeros((L, d))
    for i in range(L):
        for c in range(d):
            acc = 0.0
            for j in (-1, 0, 1):
                if not 0 <= i + j < L:
                    continue
                local = Wc[j + 1, c] * u[i + j, c]
                for c2 in range(d):
                    acc += Wc[j + 1, c] * Wl[c, c2] * u[i + j, c] * u[i, c2]
                acc += bl[c] * local
            out[i, c] = acc
    return out
