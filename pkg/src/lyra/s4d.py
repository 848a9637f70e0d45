"""Diagonal state-space (S4D) convolution layer.

Each channel ``h`` owns N/2 complex modes with continuous-time poles
``A = -exp(log_A_real) + i*A_imag`` and a shared step ``dt = exp(log_dt)``.
The discretised kernel is a sum of decaying complex exponentials

    K[h, t] = 2 * Re( sum_n C'[h, n] * exp(dt*A[h, n] * t) ),
    C' = C * (exp(dt*A) - 1) / A,

i.e. a row-weighted sum over the Vandermonde matrix of ``exp(dt*A)``.
Complex parameters are stored as trailing (re, im) pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import (
    ConfigError,
    InvalidLengthError,
    Parameter,
    Rng,
    ShapeError,
    Tensor,
    _node,
    as_tensor,
    causal_conv_fft,
    dropout_tied,
    gelu,
    glu,
    linear,
    reshape,
    transpose,
)

KERNEL_LR = min(0.001, 0.002)


class TruncationError(ValueError):
    pass


@dataclass
class S4DKernelParams:
    H: int
    N: int
    log_dt: Parameter  # (H,)
    C: Parameter  # (H, N/2, 2) real view of complex C
    log_A_real: Parameter  # (H, N/2)
    A_imag: Parameter  # (H, N/2)

    def parameters(self) -> list[tuple[str, Parameter]]:
        return [("log_dt", self.log_dt), ("C", self.C),
                ("log_A_real", self.log_A_real), ("A_imag", self.A_imag)]

    def discretize(self):
        """Return (dt, A, dtA, C') as numpy arrays (complex where applicable)."""
        return _discretize(self.log_dt.data, self.C.data, self.log_A_real.data, self.A_imag.data)


@dataclass
class S4DLayerParams:
    kernel: S4DKernelParams
    D: Parameter  # (H,)
    W_out: Parameter  # (2H, H)
    b_out: Parameter  # (2H,)
    dropout_p: float = 0.0

    @property
    def H(self) -> int:
        return self.kernel.H

    def parameters(self) -> list[tuple[str, Parameter]]:
        return ([("kernel." + n, p) for n, p in self.kernel.parameters()]
                + [("D", self.D), ("output_linear.weight", self.W_out),
                   ("output_linear.bias", self.b_out)])


def init_s4d_kernel(H: int, N: int, rng: Rng, dt_min: float = 0.001, dt_max: float = 0.1,
                    lr: float | None = KERNEL_LR, dtype=np.float64) -> S4DKernelParams:
    if H < 1:
        raise ConfigError(f"H must be >= 1, got {H}")
    if N < 2 or N % 2:
        raise ConfigError(f"state size N must be a positive even number, got {N}")
    n = N // 2
    log_dt = rng.uniform(size=H) * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min)
    # standard complex normal: re and im each carry variance 1/2
    C = rng.normal(size=(H, n, 2)) * math.sqrt(0.5)
    log_A_real = np.full((H, n), math.log(0.5))
    A_imag = np.tile(math.pi * np.arange(n, dtype=np.float64), (H, 1))

    def reg(name, arr):
        return Parameter(arr.astype(dtype), name=name, lr_override=lr, weight_decay_override=0.0)

    return S4DKernelParams(H, N, reg("log_dt", log_dt), reg("C", C),
                           reg("log_A_real", log_A_real), reg("A_imag", A_imag))


def init_s4d_layer(H: int, N: int, rng: Rng, dropout: float = 0.0, dtype=np.float64,
                   **kernel_args) -> S4DLayerParams:
    kernel = init_s4d_kernel(H, N, rng, dtype=dtype, **kernel_args)
    bound = 1.0 / math.sqrt(H)
    D = rng.normal(size=H)
    W = rng.uniform(-bound, bound, size=(2 * H, H))
    b = rng.uniform(-bound, bound, size=2 * H)
    return S4DLayerParams(kernel, Parameter(D.astype(dtype), "D"),
                          Parameter(W.astype(dtype), "output_linear.weight"),
                          Parameter(b.astype(dtype), "output_linear.bias"), dropout)


def _discretize(log_dt, C, log_A_real, A_imag):
    dt = np.exp(log_dt)
    A = -np.exp(log_A_real) + 1j * A_imag
    dtA = A * dt[:, None]
    Cc = C[..., 0] + 1j * C[..., 1]
    Cp = Cc * np.expm1(dtA) / A
    return dt, A, dtA, Cp


def _block_size(L: int) -> int:
    return 1 << max(0, math.ceil(math.log2(max(1, math.isqrt(L)))))


def _mode_sum(coef: np.ndarray, dtA: np.ndarray, L: int) -> np.ndarray:
    """sum_n coef[h, n] * exp(dtA[h, n] * t) for t < L, shape (H, L).

    Powers are split as t = t0 + tau with a short Vandermonde block in tau and
    one exponential per block start, so only O(H * N * sqrt(L)) exponentials
    are evaluated and the rest is a batched matmul.
    """
    B = _block_size(L)
    nblk = -(-L // B)
    tau = np.arange(B)
    t0 = np.arange(nblk) * B
    Zb = np.exp(dtA[..., None] * tau)  # (H, n, B)
    P = np.exp(dtA[..., None] * t0) * coef[..., None]  # (H, n, nblk)
    out = np.matmul(P.transpose(0, 2, 1), Zb)  # (H, nblk, B)
    return out.reshape(coef.shape[0], -1)[:, :L]


def _mode_moments(g: np.ndarray, dtA: np.ndarray):
    """S = sum_t g[h,t] exp(dtA t) and T = sum_t g[h,t] t exp(dtA t), shape (H, n)."""
    H, L = g.shape
    B = _block_size(L)
    nblk = -(-L // B)
    tau = np.arange(B)
    t0 = np.arange(nblk) * B
    G = np.zeros((H, nblk * B), dtype=dtA.dtype)
    G[:, :L] = g
    G = G.reshape(H, nblk, B)
    Zb = np.exp(dtA[..., None] * tau)  # (H, n, B)
    E0 = np.exp(dtA[..., None] * t0)  # (H, n, nblk)
    I1 = np.matmul(Zb, G.transpose(0, 2, 1))  # (H, n, nblk)
    I2 = np.matmul(Zb * tau, G.transpose(0, 2, 1))
    S = np.sum(E0 * I1, axis=-1)
    T = np.sum(E0 * (t0 * I1 + I2), axis=-1)
    return S, T


def materialize_kernel(params: S4DKernelParams, L: int) -> Tensor:
    """Differentiable (H, L) convolution kernel."""
    if L < 1:
        raise InvalidLengthError(f"kernel length must be >= 1, got {L}")
    log_dt, C, lar, aim = params.log_dt, params.C, params.log_A_real, params.A_imag
    dt, A, dtA, Cp = _discretize(log_dt.data, C.data, lar.data, aim.data)
    real_dtype = log_dt.dtype
    K = (2.0 * _mode_sum(Cp, dtA, L).real).astype(real_dtype)

    def bw(g):
        S, T = _mode_moments(g.astype(dtA.dtype), dtA)
        Cc = C.data[..., 0] + 1j * C.data[..., 1]
        eA = np.exp(dtA)
        E = np.expm1(dtA) / A
        dE_dA = (dt[:, None] * eA * A - np.expm1(dtA)) / (A * A)
        # dL = 2 Re(G_C dC + G_A dA + G_dt d(dt))
        G_C = S * E
        G_A = S * Cc * dE_dA + Cp * T * dt[:, None]
        G_dt = S * Cc * eA + Cp * T * A
        gC = np.stack([2 * G_C.real, -2 * G_C.imag], axis=-1)
        g_lar = 2 * (G_A * -np.exp(lar.data)).real
        g_aim = -2 * G_A.imag
        g_logdt = 2 * G_dt.real.sum(axis=-1) * dt
        return tuple(x.astype(real_dtype) for x in (g_logdt, gC, g_lar, g_aim))

    return _node(K, (log_dt, C, lar, aim), bw, "s4d_kernel")


def kernel_vandermonde_oracle(params: S4DKernelParams, L: int) -> np.ndarray:
    """Reference kernel from an explicitly built Vandermonde matrix
    V[h, n, t] = lambda[h, n]**t (by repeated multiplication)."""
    if L < 1:
        raise InvalidLengthError(f"kernel length must be >= 1, got {L}")
    _, _, dtA, Cp = params.discretize()
    lam = np.exp(dtA)
    V = np.empty(dtA.shape + (L,), dtype=complex)
    V[..., 0] = 1.0
    for t in range(1, L):
        V[..., t] = V[..., t - 1] * lam
    return 2.0 * np.einsum("hn,hnt->ht", Cp, V).real


def kernel_recurrence_oracle(params: S4DKernelParams, L: int) -> np.ndarray:
    """Reference kernel from the per-mode recursion s_{t+1} = lambda * s_t, s_0 = C'."""
    if L < 1:
        raise InvalidLengthError(f"kernel length must be >= 1, got {L}")
    _, _, dtA, Cp = params.discretize()
    lam = np.exp(dtA)
    s = Cp.copy()
    K = np.empty((dtA.shape[0], L))
    for t in range(L):
        K[:, t] = 2.0 * s.sum(axis=-1).real
        s = s * lam
    return K


def kernel_decay_bound(params: S4DKernelParams, L: int) -> np.ndarray:
    """Envelope 2 * sum_n |C'| * exp(t * max_n Re(dtA)) that bounds |K[h, t]|."""
    _, _, dtA, Cp = params.discretize()
    rate = dtA.real.max(axis=-1)
    return 2.0 * np.abs(Cp).sum(axis=-1)[:, None] * np.exp(np.outer(rate, np.arange(L)))


def ssm_scan(u: np.ndarray, params: S4DKernelParams) -> np.ndarray:
    """Run the diagonal recurrence x_t = lambda * x_{t-1} + u_t, y_t = 2 Re(C' . x_t)
    step by step over the last axis of ``u`` (B, H, L). Equals the causal
    convolution of ``u`` with the materialised kernel."""
    _, _, dtA, Cp = params.discretize()
    lam = np.exp(dtA)
    B, H, L = u.shape
    x = np.zeros((B,) + lam.shape, dtype=complex)
    y = np.empty((B, H, L))
    for t in range(L):
        x = x * lam + u[:, :, t, None]
        y[:, :, t] = 2.0 * np.sum(Cp * x, axis=-1).real
    return y


def generating_function_eval(h: np.ndarray, m: int) -> np.ndarray:
    """H(z) = sum_{t<len(h)} h_t z^-t at the m-th roots of unity z_k = exp(2 pi i k / m),
    by direct summation."""
    h = np.asarray(h)
    ell = h.shape[-1]
    if m < ell:
        raise TruncationError(f"need m >= len(h) ({ell}) to avoid aliasing, got m={m}")
    k = np.arange(m)[:, None]
    t = np.arange(ell)[None, :]
    z_inv_pow = np.exp(-2j * np.pi * k * t / m)
    return z_inv_pow @ h


def causal_conv(u, k) -> Tensor:
    """Differentiable causal linear convolution of u (B, H, L) with k (H, L)."""
    u, k = as_tensor(u), as_tensor(k)
    if u.shape[-2:] != k.shape:
        raise ShapeError(f"kernel shape {k.shape} does not match input {u.shape}")
    ud, kd = u.data, k.data

    def bw(g):
        gr = g[..., ::-1]
        gu = causal_conv_fft(gr, kd)[..., ::-1]
        gk = causal_conv_fft(gr, ud)[..., ::-1].sum(axis=0)
        return gu, gk

    return _node(causal_conv_fft(ud, kd), (u, k), bw, "causal_conv")


def s4d_forward(u, layer: S4DLayerParams, rng: Rng | None = None, training: bool = False,
                kernel: Tensor | None = None) -> Tensor:
    """S4D layer on u (B, H, L): FFT long convolution, D skip, GELU, tied
    dropout, then a pointwise H -> 2H projection gated back to H by a GLU.

    ``kernel`` may be passed to override the materialised kernel.
    """
    u = as_tensor(u)
    if u.ndim != 3 or u.shape[1] != layer.H:
        raise ShapeError(f"s4d_forward expects (B, {layer.H}, L), got {u.shape}")
    L = u.shape[-1]
    k = materialize_kernel(layer.kernel, L) if kernel is None else kernel
    y = causal_conv(u, k) + u * reshape(layer.D, (layer.H, 1))
    y = dropout_tied(gelu(y), layer.dropout_p, rng, training)
    y = linear(transpose(y, (0, 2, 1)), layer.W_out, layer.b_out)
    return transpose(glu(y, axis=-1), (0, 2, 1))


def kernel_svd_spectrum(K: np.ndarray) -> np.ndarray:
    """Singular values of an (H, L) kernel matrix, descending."""
    K = np.asarray(K, dtype=np.float64)
    if K.ndim != 2 or min(K.shape) < 1:
        raise ShapeError(f"expected a non-empty (H, L) matrix, got {K.shape}")
    return np.linalg.svd(K, compute_uv=False)
