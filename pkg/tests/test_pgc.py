import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lyra.numerics import Rng, ShapeError, gradcheck, square, tsum
from lyra.pgc import GatedUnitParams, gated_unit_expansion, gated_unit_forward, init_pgc, pgc_forward


def scalar_pgc(u, P):
    """Loop-by-loop reimplementation of the block for a single sequence (L, d)."""
    L, d = u.shape
    h = P.h

    def norm(vec, gain):
        r = 1.0 / math.sqrt(sum(v * v for v in vec) / len(vec) + 1e-8)
        return [v * r * g for v, g in zip(vec, gain)]

    xv = []
    for i in range(L):
        proj = [sum(P.W_in.data[o, c] * u[i, c] for c in range(d)) + P.b_in.data[o] for o in range(2 * h)]
        xv.append(norm(proj, P.gamma_in.data))
    out = np.zeros((L, d))
    for i in range(L):
        gate = []
        for c in range(h):
            acc = P.b_conv.data[c]
            for j in (-1, 0, 1):
                if 0 <= i + j < L:
                    acc += P.W_conv.data[c, j + 1] * xv[i + j][c]
            gate.append(acc * xv[i][h + c])
        proj = [sum(P.W_out.data[o, c] * gate[c] for c in range(h)) + P.b_out.data[o] for o in range(d)]
        out[i] = norm(proj, P.gamma_out.data)
    return out


def test_matches_scalar_loop():
    P = init_pgc(4, 3, Rng(0))
    u = Rng(1).normal(size=(1, 6, 4))
    assert np.allclose(pgc_forward(u, P).data[0], scalar_pgc(u[0], P), rtol=1e-12, atol=1e-12)


def test_unit_gate_passes_convolution_through():
    d, h = 3, 2
    P = init_pgc(d, h, Rng(2))
    # The in-norm acts over both halves at once, so v == 1 after it is forced by
    # making the whole projection the constant 1 (zero weights, unit biases).
    P.W_in.data[:] = 0.0
    P.b_in.data[:] = 1.0
    P.gamma_in.data[:] = 1.0
    u = Rng(3).normal(size=(1, 5, d))
    xv = np.ones((1, 5, 2 * h))
    x_conv = (np.pad(xv[..., :h], ((0, 0), (1, 1), (0, 0)))[:, :-2] * P.W_conv.data[:, 0]
              + xv[..., :h] * P.W_conv.data[:, 1]
              + np.pad(xv[..., :h], ((0, 0), (1, 1), (0, 0)))[:, 2:] * P.W_conv.data[:, 2]
              + P.b_conv.data)
    lin = x_conv @ P.W_out.data.T + P.b_out.data
    ref = lin / np.sqrt(np.mean(lin ** 2, axis=-1, keepdims=True) + 1e-8) * P.gamma_out.data
    assert np.allclose(pgc_forward(u, P).data, ref, atol=1e-7)


def test_zero_input_interior_is_position_constant():
    P = init_pgc(4, 3, Rng(4))
    out = pgc_forward(np.zeros((1, 9, 4)), P).data[0]
    # the zero padding of the depthwise conv only touches the two end positions
    assert np.allclose(out[1:-1], out[1], atol=1e-14)


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        pgc_forward(np.zeros((1, 4, 5)), init_pgc(4, 2, Rng(0)))


@pytest.mark.parametrize("p", [0, 3, 6])
def test_locality(p):
    P = init_pgc(3, 2, Rng(5))
    u = Rng(6).normal(size=(1, 7, 3))
    v = u.copy()
    v[0, p] += Rng(7).normal(size=3)
    diff = np.abs(pgc_forward(u, P).data - pgc_forward(v, P).data).max(axis=-1)[0]
    changed = set(np.flatnonzero(diff > 0))
    assert changed <= {p - 1, p, p + 1}
    assert p in changed


def test_gradients():
    P = init_pgc(3, 2, Rng(8))
    u = Rng(9).normal(size=(2, 5, 3))
    y = Rng(10).normal(size=(2, 5, 3))
    report = gradcheck(lambda: tsum(square(pgc_forward(u, P) - y)), [p for _, p in P.parameters()])
    assert max(report.values()) < 1e-5, report


# --- bare gated unit ------------------------------------------------------------


def test_pure_scaled_convolution():
    d = 3
    rng = Rng(11)
    P = GatedUnitParams(rng.normal(size=(3, d)), np.zeros((d, d)), np.array([5.0, -2.0, 7.0]))
    u = rng.normal(size=(6, d))
    pad = np.pad(u, ((1, 1), (0, 0)))
    conv = P.W_conv[0] * pad[:-2] + P.W_conv[1] * pad[1:-1] + P.W_conv[2] * pad[2:]
    assert np.allclose(gated_unit_forward(u, P), P.b_lin * conv, rtol=1e-14)


@pytest.mark.parametrize("p", [0, 2, 4])
def test_one_hot_receptive_field(p):
    P = GatedUnitParams.random(3, Rng(12))
    u = np.zeros((5, 3))
    u[p, 1] = 1.0
    support = set(np.flatnonzero(np.abs(gated_unit_forward(u, P)).sum(axis=1)))
    assert support <= {p - 1, p, p + 1}


def test_expansion_zero_linear_path():
    P = GatedUnitParams(Rng(13).normal(size=(3, 2)), np.zeros((2, 2)), np.zeros(2))
    assert np.array_equal(gated_unit_expansion(Rng(14).normal(size=(4, 2)), P), np.zeros((4, 2)))


def test_expansion_pure_quadratic():
    P = GatedUnitParams(np.array([[0.0], [1.0], [0.0]]), np.array([[1.7]]), np.zeros(1))
    u = Rng(15).normal(size=(6, 1))
    assert np.allclose(gated_unit_expansion(u, P), 1.7 * u ** 2, rtol=1e-15)
    assert np.allclose(gated_unit_forward(u, P), 1.7 * u ** 2, rtol=1e-15)


def test_expansion_identity_random_5x3():
    rng = Rng(16)
    P = GatedUnitParams.random(3, rng)
    u = rng.normal(size=(5, 3))
    assert np.allclose(gated_unit_forward(u, P), gated_unit_expansion(u, P), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("seed", range(50))
def test_expansion_identity_50_instances(seed):
    rng = Rng(100 + seed)
    L, d = int(rng.integers(1, 9)), int(rng.integers(1, 5))
    P = GatedUnitParams.random(d, rng)
    u = rng.normal(size=(L, d))
    a, b = gated_unit_forward(u, P), gated_unit_expansion(u, P)
    assert np.max(np.abs(a - b)) <= 1e-12 * max(1.0, np.max(np.abs(b)))


@settings(max_examples=30, deadline=None)
@given(alpha=st.floats(-4, 4, allow_nan=False), seed=st.integers(0, 10_000))
def test_bias_free_unit_is_degree_two_homogeneous(alpha, seed):
    rng = Rng(seed)
    P = GatedUnitParams.random(3, rng)
    P.b_lin = np.zeros(3)
    u = rng.normal(size=(5, 3))
    assert np.allclose(gated_unit_forward(alpha * u, P), alpha ** 2 * gated_unit_forward(u, P),
                       rtol=1e-12, atol=1e-12)
