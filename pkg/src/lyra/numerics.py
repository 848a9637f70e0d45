"""Array core for Lyra: seeded RNG, real FFT helpers, a small reverse-mode tape
and the neural primitives the architecture needs.

Arrays are plain ``numpy.ndarray``. Differentiable values are wrapped in
:class:`Tensor`; every primitive records a closure that maps the output
gradient to gradients of its inputs. :func:`backward` replays the tape in
reverse topological order.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float64
RMSNORM_EPS = 1e-8

_grad_enabled = True

# Names of primitives whose adjoint is deliberately broken; used by the
# gradcheck negative test only.
CORRUPTED_ADJOINTS: set[str] = set()


class ShapeError(ValueError):
    pass


class InvalidLengthError(ValueError):
    pass


class InvalidProbabilityError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# RNG
# ---------------------------------------------------------------------------


class Rng:
    """Deterministic generator on top of the counter-based Philox bit stream.

    Uniform draws come straight from numpy's Philox/``random()`` path, which is
    bit-stable across platforms. Normal draws use Box-Muller on those uniforms
    so that they do not depend on numpy's ziggurat tables.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return low + (high - low) * self._gen.random(size)

    def normal(self, size=None) -> np.ndarray:
        shape = () if size is None else tuple(np.atleast_1d(size))
        n = int(np.prod(shape, dtype=np.int64))
        half = (n + 1) // 2
        u1 = 1.0 - self._gen.random(half)  # (0, 1]
        u2 = self._gen.random(half)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        out = z[:n].reshape(shape)
        return out if size is not None else float(out)

    def bernoulli(self, p: float, size) -> np.ndarray:
        return self._gen.random(size) < p

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)

    def spawn(self, key: int) -> "Rng":
        """Independent child stream; depends only on (seed, key)."""
        return Rng((self.seed * 0x9E3779B97F4A7C15 + int(key) + 1) & 0xFFFFFFFFFFFFFFFF)


# ---------------------------------------------------------------------------
# FFT
# ---------------------------------------------------------------------------


def next_pow2(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


def rfft(x: np.ndarray, n: int | None = None) -> np.ndarray:
    """One-sided DFT along the last axis, zero-padding (or truncating) to ``n``."""
    n = x.shape[-1] if n is None else n
    if n < 1:
        raise InvalidLengthError(f"FFT length must be >= 1, got {n}")
    return np.fft.rfft(x, n=n, axis=-1)


def irfft(X: np.ndarray, n: int) -> np.ndarray:
    if n < 1:
        raise InvalidLengthError(f"FFT length must be >= 1, got {n}")
    return np.fft.irfft(X, n=n, axis=-1)


def causal_conv_fft(u: np.ndarray, k: np.ndarray) -> np.ndarray:
    """y[..., t] = sum_{s<=t} k[..., s] u[..., t-s], t < L, via zero-padded FFT.

    Transform length is the next power of two >= 2L, so there is no wrap-around.
    """
    L = u.shape[-1]
    if L < 1:
        raise InvalidLengthError("empty sequence")
    n = next_pow2(2 * L)
    y = irfft(rfft(u, n) * rfft(k, n), n)[..., :L]
    return y.astype(np.result_type(u.dtype, k.dtype), copy=False)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add(self, -other)
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """Trainable leaf with a gradient buffer and optional optimizer overrides."""

    __slots__ = ("grad", "lr_override", "weight_decay_override", "name")

    def __init__(self, data, name: str = "", lr_override: float | None = None,
                 weight_decay_override: float | None = None):
        super().__init__(np.array(data), requires_grad=True)
        for label, v in (("lr_override", lr_override),
                         ("weight_decay_override", weight_decay_override)):
            if v is not None and not (math.isfinite(v) and 0.0 <= v <= 1.0):
                raise ValueError(f"{label} must be finite and in [0, 1], got {v}")
        self.grad = np.zeros_like(self.data)
        self.lr_override = lr_override
        self.weight_decay_override = weight_decay_override
        self.name = name

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        if op in CORRUPTED_ADJOINTS:
            good = backward
            backward = lambda g: tuple(None if x is None else 1.01 * x for x in good(g))
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(p) into ``p.grad`` for every reachable Parameter."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad = node.grad + g
            continue
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# Elementwise / structural primitives
# ---------------------------------------------------------------------------


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Wrap both operands; a bare Python scalar takes the other side's float
    dtype so that float32 graphs stay float32."""
    if isinstance(a, (int, float)) and isinstance(b, Tensor) and b.dtype.kind == "f":
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if isinstance(b, (int, float)) and isinstance(a, Tensor) and a.dtype.kind == "f":
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return as_tensor(a), as_tensor(b)


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                 "mul")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _node(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / count)


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def split(a: Tensor, axis: int = -1) -> tuple[Tensor, Tensor]:
    """Halve ``a`` along ``axis``; the extent must be even."""
    n = a.shape[axis]
    if n % 2:
        raise ShapeError(f"cannot halve axis of extent {n}")
    h = n // 2
    axis = axis % a.ndim
    idx_a = [slice(None)] * a.ndim
    idx_b = [slice(None)] * a.ndim
    idx_a[axis] = slice(0, h)
    idx_b[axis] = slice(h, n)
    idx_a, idx_b = tuple(idx_a), tuple(idx_b)
    shape, dtype = a.shape, a.dtype

    def part(idx):
        def bw(g):
            full = np.zeros(shape, dtype=dtype)
            full[idx] = g
            return (full,)
        return _node(a.data[idx], (a,), bw, "split")

    return part(idx_a), part(idx_b)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # numerically stable in both tails
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = (xd * cdf).astype(xd.dtype, copy=False)

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _node(out, (x,), bw, "gelu")


def glu(x, axis: int = -1) -> Tensor:
    """a * sigmoid(b) where (a, b) are the two halves of ``x`` along ``axis``."""
    x = as_tensor(x)
    if x.shape[axis] % 2:
        raise ShapeError(f"glu needs an even channel extent, got {x.shape[axis]}")
    a, b = np.split(x.data, 2, axis=axis)
    s = _sigmoid(b)

    def bw(g):
        return (np.concatenate([g * s, g * a * s * (1.0 - s)], axis=axis),)

    return _node(a * s, (x,), bw, "glu")


def linear(x, W, b=None) -> Tensor:
    """Position-wise ``x @ W.T + b`` over the last axis."""
    x, W = as_tensor(x), as_tensor(W)
    if x.shape[-1] != W.shape[1]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight in-dim {W.shape[1]}")
    xd, Wd = x.data, W.data
    x2 = xd.reshape(-1, xd.shape[-1])
    out = (x2 @ Wd.T).reshape(xd.shape[:-1] + (Wd.shape[0],))
    parents = [x, W]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[0],):
            raise ShapeError(f"linear: bias shape {b.shape} != ({W.shape[0]},)")
        out = out + b.data
        parents.append(b)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ Wd).reshape(xd.shape) if x.requires_grad else None
        gW = g2.T @ x2
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    return _node(out, parents, bw, "linear")


def rmsnorm(x, gamma, eps: float = RMSNORM_EPS) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * gamma over the last axis."""
    x, gamma = as_tensor(x), as_tensor(gamma)
    if gamma.shape != (x.shape[-1],):
        raise ShapeError(f"rmsnorm: gain shape {gamma.shape} != ({x.shape[-1]},)")
    xd, gd = x.data, gamma.data
    d = xd.shape[-1]
    r = 1.0 / np.sqrt(np.mean(xd * xd, axis=-1, keepdims=True) + eps)
    normed = xd * r

    def bw(g):
        gn = g * gd
        proj = np.einsum("...i,...i->...", gn, normed)[..., None] / d
        gx = r * (gn - normed * proj)
        gg = np.einsum("ni,ni->i", g.reshape(-1, d), normed.reshape(-1, d))
        return gx, gg

    return _node(normed * gd, (x, gamma), bw, "rmsnorm")


def depthwise_conv1d(u, W, b) -> Tensor:
    """Per-channel kernel-3 convolution with zero padding 1.

    ``u`` is (B, L, h), ``W`` is (h, 3), ``b`` is (h,). Tap ``W[c, j]`` multiplies
    ``u[i + j - 1, c]``.
    """
    u, W, b = as_tensor(u), as_tensor(W), as_tensor(b)
    if u.ndim != 3:
        raise ShapeError(f"depthwise_conv1d expects (B, L, h), got {u.shape}")
    B, L, h = u.shape
    if L == 0:
        raise InvalidLengthError("empty sequence")
    if W.shape != (h, 3) or b.shape != (h,):
        raise ShapeError(f"depthwise_conv1d: weights {W.shape}, bias {b.shape} for {h} channels")
    ud, Wd = u.data, W.data
    pad = np.zeros((B, L + 2, h), dtype=ud.dtype)
    pad[:, 1:-1] = ud
    out = pad[:, :-2] * Wd[:, 0] + pad[:, 1:-1] * Wd[:, 1] + pad[:, 2:] * Wd[:, 2] + b.data

    def bw(g):
        gpad = np.zeros((B, L + 2, h), dtype=g.dtype)
        gpad[:, 1:-1] = g
        gu = gpad[:, 2:] * Wd[:, 0] + gpad[:, 1:-1] * Wd[:, 1] + gpad[:, :-2] * Wd[:, 2]
        gW = np.stack([np.einsum("blc,blc->c", g, pad[:, j:j + L]) for j in range(3)], axis=1)
        return gu, gW, g.sum(axis=(0, 1))

    return _node(out, (u, W, b), bw, "depthwise_conv1d")


def dropout_tied(x, p: float, rng: Rng | None, training: bool) -> Tensor:
    """Dropout with one Bernoulli draw per (batch, channel), shared over the
    remaining axes; survivors are scaled by 1/(1-p). Identity in eval mode."""
    if not 0.0 <= p < 1.0:
        raise InvalidProbabilityError(f"dropout probability must be in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an Rng")
    mask_shape = x.shape[:2] + (1,) * (x.ndim - 2)
    mask = rng.bernoulli(1.0 - p, mask_shape).astype(x.dtype) / (1.0 - p)
    return _node(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Normwise relative error max|a - n| / max(max|n|, floor)."""
    scale = max(float(np.max(np.abs(numeric), initial=0.0)), floor)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def finite_difference(loss_fn: Callable[[], float], param: Parameter, step: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn`` w.r.t. every entry of ``param``."""
    out = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    of = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = loss_fn()
        flat[i] = orig - step
        fm = loss_fn()
        flat[i] = orig
        of[i] = (fp - fm) / (2 * step)
    return out


def gradcheck(loss_fn: Callable[[], Tensor], params: Sequence[Parameter],
              step: float = 1e-5) -> dict[str, float]:
    """Compare tape gradients with central differences.

    Returns the normwise relative error per parameter (keyed by name, or by
    position when unnamed).
    """
    zero_grad(params)
    backward(loss_fn())
    analytic = [p.grad.copy() for p in params]

    def scalar():
        with no_grad():
            return float(loss_fn().data)

    report = {}
    for i, (p, a) in enumerate(zip(params, analytic)):
        report[p.name or str(i)] = relative_error(a, finite_difference(scalar, p, step))
    return report
