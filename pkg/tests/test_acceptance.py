"""Acceptance gate: one test per criterion, each at its stated tolerance and
runtime budget. Run ``pytest tests/test_acceptance.py -v`` for the summary table."""

import csv
import math
import time
from pathlib import Path

import numpy as np

from lyra.cli import EXIT_OK, main
from lyra.model import LyraConfig, build, forward, load_checkpoint, param_count, save_checkpoint
from lyra.numerics import Rng, gradcheck, relative_error
from lyra.pgc import GatedUnitParams, gated_unit_expansion, gated_unit_forward
from lyra.s4d import (
    causal_conv,
    generating_function_eval,
    init_s4d_kernel,
    kernel_recurrence_oracle,
    kernel_vandermonde_oracle,
    materialize_kernel,
)
from lyra.train import mse_loss

RECIPES = Path(__file__).resolve().parents[1] / "recipes"


class Timer:
    def __enter__(self):
        self.t0 = time.monotonic()
        return self

    def __exit__(self, *exc):
        self.seconds = time.monotonic() - self.t0


def train_recipe(name, out, *extra):
    with Timer() as t:
        code = main(["train", "--config", str(RECIPES / name), "--out", str(out), *extra])
    assert code == EXIT_OK
    with open(out / "metrics.csv", newline="") as f:
        rows = [r for r in csv.DictReader(f) if r["split"] != "train"]
    return rows[-1], t.seconds


def direct_conv(u, k):
    L = u.shape[-1]
    y = np.zeros_like(u)
    for t in range(L):
        y[..., t] = np.einsum("...hs,hs->...h", u[..., t::-1], k[:, :t + 1])
    return y


def test_c01_parameter_count(record_property):
    cfg = LyraConfig(d_input=4, d_model=64, pgc_hiddens=[16, 128], num_s4=1, d_state=64, d_output=2)
    n = param_count(build(cfg, Rng(0)))
    record_property("params", n)
    assert n == 46210


def test_c02_kernel_correctness(record_property):
    worst = 0.0
    with Timer() as t:
        for seed in range(20):
            rng = Rng(seed)
            H, N, L = int(rng.integers(1, 5)), 2 * int(rng.integers(1, 5)), int(rng.integers(1, 65))
            p = init_s4d_kernel(H, N, rng)
            p.log_A_real.data += 0.3 * rng.normal(size=p.log_A_real.shape)
            p.A_imag.data += 0.2 * rng.normal(size=p.A_imag.shape)
            fast, vand, rec = materialize_kernel(p, L).data, kernel_vandermonde_oracle(p, L), kernel_recurrence_oracle(p, L)
            worst = max(worst, relative_error(fast, vand), relative_error(fast, rec), relative_error(vand, rec))
    record_property("max_rel", f"{worst:.2e}")
    record_property("seconds", f"{t.seconds:.2f}")
    assert worst <= 1e-10
    assert t.seconds < 5


def test_c03_fft_convolution(record_property):
    worst = 0.0
    with Timer() as t:
        for L in (8, 64, 256):
            rng = Rng(L)
            u, k = rng.normal(size=(2, 3, L)), rng.normal(size=(3, L))
            worst = max(worst, relative_error(causal_conv(u, k).data, direct_conv(u, k)))
    record_property("max_rel", f"{worst:.2e}")
    assert worst <= 1e-10
    assert t.seconds < 5


def test_c04_generating_function_identity(record_property):
    worst = 0.0
    with Timer() as t:
        for m in (8, 16, 64):
            h = Rng(100 + m).normal(size=m)
            Hz = generating_function_eval(h, m)
            worst = max(worst, relative_error(Hz, np.fft.fft(h)), relative_error(np.fft.ifft(Hz).real, h))
    record_property("max_rel", f"{worst:.2e}")
    assert worst <= 1e-10
    assert t.seconds < 1


def test_c05_gating_expansion_identity(record_property):
    worst = 0.0
    with Timer() as t:
        for seed in range(50):
            rng = Rng(500 + seed)
            L, d = int(rng.integers(1, 17)), int(rng.integers(1, 9))
            P = GatedUnitParams.random(d, rng)
            u = rng.normal(size=(L, d))
            a, b = gated_unit_forward(u, P), gated_unit_expansion(u, P)
            worst = max(worst, float(np.max(np.abs(a - b))) / max(1.0, float(np.max(np.abs(b)))))
    record_property("max_err", f"{worst:.2e}")
    assert worst <= 1e-12
    assert t.seconds < 1


def test_c06_gradient_correctness(record_property):
    cfg = LyraConfig(d_input=3, d_model=4, pgc_hiddens=[3], num_s4=1, d_state=4, d_output=2)
    model = build(cfg, Rng(0))
    x, y = Rng(1).normal(size=(2, 8, 3)), Rng(2).normal(size=(2, 2))
    with Timer() as t:
        report = gradcheck(lambda: mse_loss(forward(model, x, Rng(3), training=True), y), model.parameters())
    record_property("tensors", len(report))
    record_property("max_rel", f"{max(report.values()):.2e}")
    assert len(report) == len(model.parameters())
    assert all(e <= 1e-5 for e in report.values()), report
    assert t.seconds < 30


def test_c07_polynomial_task(tmp_path, record_property):
    row, seconds = train_recipe("poly.yaml", tmp_path)
    n = param_count(load_checkpoint(tmp_path / "final.lyra"))
    record_property("params", n)
    record_property("test_r2", f"{float(row['r2']):.4f}")
    record_property("seconds", round(seconds))
    assert n == 201
    assert int(row["epoch"]) == 3000
    assert float(row["r2"]) >= 0.95
    assert seconds < 120


def test_c08_epistasis_task(tmp_path, record_property):
    row, seconds = train_recipe("epistasis.yaml", tmp_path)
    orders = {k: float(row[f"r2_order_{k}"]) for k in (1, 2, 3)}
    record_property("test_r2", f"{float(row['r2']):.4f}")
    record_property("by_order", {k: round(v, 3) for k, v in orders.items()})
    record_property("seconds", round(seconds))
    assert float(row["r2"]) >= 0.90
    assert all(math.isfinite(v) for v in orders.values())
    assert seconds < 300


def test_c09_selective_copying(tmp_path, record_property):
    row, seconds = train_recipe("copy.yaml", tmp_path)
    record_property("slot_accuracy", f"{float(row['slot_accuracy']):.4f}")
    record_property("seconds", round(seconds))
    assert int(row["step"]) == 50000
    assert float(row["slot_accuracy"]) >= 0.95
    assert seconds < 1800


def test_c10_frequency_analysis(tmp_path, record_property):
    row, seconds = train_recipe("frequency.yaml", tmp_path)
    record_property("composite_r2", f"{float(row['composite_r2']):.4f}")
    record_property("bin_match", row["bin_match"])
    record_property("seconds", round(seconds))
    assert float(row["composite_r2"]) >= 0.95
    assert float(row["bin_match"]) == 1.0
    assert seconds < 600


def test_c11_subquadratic_scaling(tmp_path, record_property):
    with Timer() as t:
        code = main(["bench", "--config", str(RECIPES / "bench.yaml"), "--out", str(tmp_path)])
    assert code == EXIT_OK
    with open(tmp_path / "bench.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    lengths = [int(r["sequence_length"]) for r in rows]
    med = [float(r["median_ms"]) for r in rows]
    ratios = [b / a for a, b in zip(med, med[1:])]
    record_property("ratios", [round(r, 2) for r in ratios])
    record_property("seconds", round(t.seconds))
    assert lengths == [2 ** k for k in range(10, 17)]
    assert all(r["status"] == "ok" and r["batch_size"] == "2" for r in rows)
    assert max(ratios) <= 2.7
    assert t.seconds < 300


def test_c12_determinism_and_round_trip(tmp_path, record_property):
    short = tmp_path / "short.yaml"
    short.write_text("model: {preset: poly201, dropout: 0.1}\n"
                     "train: {epochs: 40, batch_size: 50, lr: 0.003, eval_every: 5}\n"
                     "task: {poly: {}}\n")
    with Timer() as t:
        for name in ("a", "b"):
            assert main(["train", "--config", str(short), "--out", str(tmp_path / name), "--seed", "7"]) == EXIT_OK
        same_metrics = (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

        model = build(LyraConfig(d_input=4, d_model=64, pgc_hiddens=[16, 128], num_s4=1, d_state=64,
                                 d_output=2), Rng(9))
        save_checkpoint(model, tmp_path / "m.lyra")
        x = Rng(10).normal(size=(2, 128, 4))
        same_forward = np.array_equal(forward(model, x).data, forward(load_checkpoint(tmp_path / "m.lyra"), x).data)
    record_property("seconds", round(t.seconds))
    assert same_metrics
    assert same_forward
    assert t.seconds < 120
