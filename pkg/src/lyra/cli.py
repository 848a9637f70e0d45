"""``lyra`` command line: gradcheck, params, kernel, train, eval, bench.

Every command reads an optional YAML run config (``--config``) and honours
``--seed``, ``--out`` and ``--precision``. Exit codes: 0 success,
1 verification failure, 2 numerical abort, 64 configuration error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import yaml

from . import numerics
from .model import (
    PRESETS,
    CheckpointError,
    LyraConfig,
    LyraModel,
    block_param_counts,
    build,
    forward,
    load_checkpoint,
    param_count,
    param_count_formula,
    read_checkpoint_header,
    save_checkpoint,
)
from .numerics import ConfigError, Rng, no_grad
from .s4d import kernel_svd_spectrum, materialize_kernel
from .tasks import (
    AMINO_ACIDS,
    NUCLEOTIDES,
    CsvFormatError,
    EncodingError,
    FrequencySpec,
    SelectiveCopySpec,
    SequenceDataset,
    SyntheticPolySpec,
    copy_slot_accuracy,
    frequency_dataset,
    frequency_scores,
    gen_epistasis_dataset,
    gen_selective_copy,
    load_csv_dataset,
    poly_dataset,
)
from .train import (
    NumericalAbort,
    TrainConfig,
    evaluate,
    mse_loss,
    predict,
    r2_by_order,
    train_loop,
)

logger = logging.getLogger("lyra")

EXIT_OK, EXIT_VERIFY, EXIT_NUMERIC, EXIT_CONFIG = 0, 1, 2, 64

GRADCHECK_MAX_WIDTH = 8
GRADCHECK_MAX_LENGTH = 16
GRADCHECK_TOL = 1e-5
BENCH_MIN_REPS = 5
BENCH_MIN_WARMUP = 2
TASK_KINDS = ("poly", "epistasis", "copy", "frequency", "csv")
TOP_LEVEL_KEYS = {"model", "train", "task", "output_dir", "seed", "precision",
                  "gradcheck", "kernel", "bench"}
ALPHABETS = {"nucleotide": NUCLEOTIDES, "protein": AMINO_ACIDS}


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    task: tuple[str, dict] | None = None
    output_dir: str | None = None
    seed: int = 0
    precision: str = "f64"
    gradcheck: dict = field(default_factory=dict)
    kernel: dict = field(default_factory=dict)
    bench: dict = field(default_factory=dict)
    base_dir: str = "."

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64


def _parse_seed(value) -> int:
    try:
        seed = int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {value!r}") from None
    if not 0 <= seed < 2 ** 64:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return seed


def load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, encoding="utf-8") as f:
            raw = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML ({e})") from None
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    unknown = set(raw) - TOP_LEVEL_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown section(s) {sorted(unknown)}")
    for key in ("model", "train", "gradcheck", "kernel", "bench"):
        if not isinstance(raw.get(key) or {}, dict):
            raise ConfigError(f"{path}: section '{key}' must be a mapping")
    task = None
    if raw.get("task") is not None:
        section = raw["task"]
        if not isinstance(section, dict) or len(section) != 1:
            raise ConfigError(f"{path}: 'task' must contain exactly one of {list(TASK_KINDS)}")
        (kind, body), = section.items()
        if kind not in TASK_KINDS:
            raise ConfigError(f"{path}: unknown task kind {kind!r}; choose from {list(TASK_KINDS)}")
        task = (kind, dict(body or {}))
    cfg = RunConfig(
        model=dict(raw.get("model") or {}), train=dict(raw.get("train") or {}), task=task,
        output_dir=raw.get("output_dir"), seed=_parse_seed(raw.get("seed", 0)),
        precision=str(raw.get("precision", "f64")), gradcheck=dict(raw.get("gradcheck") or {}),
        kernel=dict(raw.get("kernel") or {}), bench=dict(raw.get("bench") or {}),
        base_dir=os.path.dirname(os.path.abspath(path)),
    )
    if cfg.task and cfg.task[0] == "csv":
        csv_path = _resolve(cfg, cfg.task[1].get("path"))
        if csv_path is None or not os.path.isfile(csv_path):
            raise ConfigError(f"{path}: csv task path {cfg.task[1].get('path')!r} does not exist")
    return cfg


def _resolve(cfg: RunConfig, p: str | None) -> str | None:
    if p is None:
        return None
    return p if os.path.isabs(p) else os.path.join(cfg.base_dir, p)


def _pop(section: dict, key: str, default, cast: Callable = lambda v: v):
    try:
        return cast(section.pop(key, default))
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for '{key}': {section.get(key)!r}") from None


def _no_leftovers(section: dict, where: str) -> None:
    if section:
        raise ConfigError(f"unknown field(s) in {where}: {sorted(section)}")


# ---------------------------------------------------------------------------
# Tasks
# ---------------------------------------------------------------------------


@dataclass
class TaskBundle:
    dataset: SequenceDataset
    d_input: int
    d_output: int
    loss: str
    n_classes: int | None = None
    metrics_fn: Callable | None = None
    describe: dict = field(default_factory=dict)


def build_task(kind: str, body: dict, seed: int, cfg: RunConfig) -> TaskBundle:
    """Materialise the dataset for a task section. The data seed defaults to
    the run seed and can be pinned with ``seed`` inside the section."""
    body = dict(body)
    data_seed = _pop(body, "seed", seed, _parse_seed)

    if kind == "poly":
        coeffs = body.pop("coeffs", None)
        n_train = _pop(body, "n_train", 800, int)
        n_test = _pop(body, "n_test", 200, int)
        if coeffs is None:
            spec = SyntheticPolySpec.random(data_seed, n_train, n_test)
        else:
            if len(coeffs) != 6:
                raise ConfigError("poly coeffs must list a0..a5")
            spec = SyntheticPolySpec(tuple(float(c) for c in coeffs),
                                     _pop(body, "sin_amp", 0.0, float), _pop(body, "sin_freq", 0.0, float),
                                     _pop(body, "cos_amp", 0.0, float), _pop(body, "cos_freq", 0.0, float),
                                     data_seed, n_train, n_test)
        _no_leftovers(body, "task.poly")
        return TaskBundle(poly_dataset(spec), 1, 1, "mse", describe=dataclasses.asdict(spec))

    if kind == "epistasis":
        l, K = _pop(body, "l", 8, int), _pop(body, "K", 3, int)
        n_terms = _pop(body, "n_terms", 24, int)
        n_samples = body.pop("n_samples", None)
        landscape, ds = gen_epistasis_dataset(
            l, K, n_terms, Rng(data_seed), _pop(body, "train_fraction", 0.8, float),
            None if n_samples is None else int(n_samples), _pop(body, "stratify", True, bool))
        _no_leftovers(body, "task.epistasis")
        ev = ds.indices("val") if np.any(ds.split == "val") else ds.indices("test")
        orders = ds.meta["orders"][ev]

        def by_order(pred, labels):
            scores = r2_by_order(pred, labels, orders)
            return {f"r2_order_{k}": v for k, v in sorted(scores.items())}

        terms = {",".join(map(str, S)): c for S, c in landscape.terms.items()}
        return TaskBundle(ds, 2, 1, "mse", metrics_fn=by_order,
                          describe={"l": l, "K": K, "terms": terms})

    if kind == "copy":
        spec = SelectiveCopySpec.gfp_example(
            length=_pop(body, "length", 64, int), target_mode=_pop(body, "target_mode", "ordered", str))
        for key in ("min_mutations", "max_mutations"):
            if key in body:
                setattr(spec, key, _pop(body, key, None, int))
        if "comutation_rate" in body:
            spec.comutation_rate = _pop(body, "comutation_rate", None, float)
        spec.validate()
        n_train, n_test = _pop(body, "n_train", 20000, int), _pop(body, "n_test", 1000, int)
        _no_leftovers(body, "task.copy")
        rng = Rng(data_seed)
        tr = gen_selective_copy(spec, rng.spawn(0), n_train)
        te = gen_selective_copy(spec, rng.spawn(1), n_test)
        split = np.array(["train"] * n_train + ["test"] * n_test, dtype=object)
        ds = SequenceDataset(np.concatenate([tr.inputs, te.inputs]),
                             np.concatenate([tr.labels, te.labels]), split,
                             meta={"tokens": np.concatenate([tr.meta["tokens"], te.meta["tokens"]])})

        def slots(pred, labels):
            return {"slot_accuracy": copy_slot_accuracy(spec, pred, labels)}

        return TaskBundle(ds, ds.inputs.shape[-1], spec.n_slots * spec.n_classes, "cross_entropy",
                          n_classes=spec.n_classes, metrics_fn=slots,
                          describe={"target_mode": spec.target_mode, "n_slots": spec.n_slots,
                                    "n_classes": spec.n_classes, "length": spec.length})

    if kind == "frequency":
        length = _pop(body, "length", 64, int)
        bins = body.pop("bins", None)
        freqs = body.pop("frequencies", None)
        amps, phases = body.pop("amplitudes", None), body.pop("phases", None)
        if freqs is not None:
            spec = FrequencySpec(tuple(freqs), amps, phases, length)
        else:
            spec = FrequencySpec.bin_aligned(tuple(bins or (3, 7, 12, 18)), length,
                                             amplitudes=amps, phases=phases)
        n = _pop(body, "n", 2000, int)
        ds = frequency_dataset(spec, Rng(data_seed), n, _pop(body, "train_fraction", 0.8, float))
        _no_leftovers(body, "task.frequency")
        C = len(spec.frequencies)

        def scores(pred, labels):
            return frequency_scores(pred, labels, C, length)

        return TaskBundle(ds, 1, (1 + C) * length, "mse", metrics_fn=scores,
                          describe={"frequencies": list(spec.frequencies), "length": length})

    # csv
    alphabet = str(_pop(body, "alphabet", "protein", str))
    alphabet = ALPHABETS.get(alphabet, alphabet)
    label_kind = _pop(body, "label_kind", "real", str)
    ds = load_csv_dataset(_resolve(cfg, body.pop("path")), alphabet, label_kind,
                          _pop(body, "train_fraction", 0.8, float), data_seed,
                          _pop(body, "policy", "strict", str))
    n_classes = body.pop("n_classes", None)
    _no_leftovers(body, "task.csv")
    if label_kind == "class":
        n_classes = int(n_classes) if n_classes is not None else int(ds.labels.max()) + 1
        return TaskBundle(ds, len(alphabet), n_classes, "cross_entropy", n_classes=n_classes)
    return TaskBundle(ds, len(alphabet), 1, "mse")


def model_config(cfg: RunConfig, task: TaskBundle | None = None, default: str | None = None) -> LyraConfig:
    section = dict(cfg.model)
    if not section and default is not None:
        section = {"preset": default}
    if task is not None:
        for key, value in (("d_input", task.d_input), ("d_output", task.d_output)):
            merged = {**PRESETS.get(section.get("preset", ""), {}), **section}
            if key in merged and int(merged[key]) != value:
                raise ConfigError(f"model.{key}={merged[key]} does not match the task ({value})")
            section[key] = value
    return LyraConfig.from_dict(section)


def train_config(cfg: RunConfig, task: TaskBundle) -> TrainConfig:
    section = dict(cfg.train)
    for key, value in (("loss", task.loss), ("n_classes", task.n_classes)):
        if key in section and section[key] != value:
            raise ConfigError(f"train.{key}={section[key]!r} does not match the task ({value!r})")
        section[key] = value
    section.setdefault("seed", cfg.seed)
    return TrainConfig.from_dict(section)


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_rows(path: str, rows: list[dict], columns: list[str] | None = None) -> None:
    if columns is None:
        columns = []
        for r in rows:
            columns += [k for k in r if k not in columns]
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])


def write_predictions(path: str, model: LyraModel, ds: SequenceDataset, task: TaskBundle) -> None:
    split = "val" if np.any(ds.split == "val") else "test"
    ids = ds.indices(split)
    rows = []
    if len(ids):
        pred = predict(model, ds.inputs[ids])
        if task.loss == "cross_entropy":
            pred = pred.reshape(len(ids), -1, task.n_classes).argmax(-1)
        target = np.asarray(ds.labels[ids]).reshape(pred.shape)
        for i, sid in enumerate(ids):
            for j in range(pred.shape[1]):
                rows.append({"sample_id": int(sid), "split": split, "output": j,
                             "prediction": pred[i, j].item(), "target": target[i, j].item()})
    write_rows(path, rows, ["sample_id", "split", "output", "prediction", "target"])


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gradcheck(cfg: RunConfig, out: str, corrupt: list[str] | None = None) -> int:
    if cfg.precision != "f64":
        raise ConfigError("gradcheck runs in 64-bit precision only (use --precision f64)")
    mcfg = model_config(cfg, default="tiny")
    section = dict(cfg.gradcheck)
    L = _pop(section, "length", 8, int)
    B = _pop(section, "batch", 2, int)
    step = _pop(section, "step", 1e-5, float)
    tol = _pop(section, "tol", GRADCHECK_TOL, float)
    _no_leftovers(section, "gradcheck")
    if mcfg.d_model > GRADCHECK_MAX_WIDTH or L > GRADCHECK_MAX_LENGTH:
        raise ConfigError(
            f"gradcheck needs d_model <= {GRADCHECK_MAX_WIDTH} and length <= {GRADCHECK_MAX_LENGTH} "
            f"(got d_model={mcfg.d_model}, length={L}); finite differences cost two forwards per "
            "parameter entry, so use a tiny config such as 'model: {preset: tiny}'")
    rng = Rng(cfg.seed)
    model = build(mcfg, rng.spawn(0))
    x = rng.spawn(1).normal(size=(B, L, mcfg.d_input))
    y = rng.spawn(2).normal(size=(B, mcfg.d_output))

    def loss_fn():
        # a fresh stream per call keeps dropout masks identical across evaluations
        return mse_loss(forward(model, x, Rng(cfg.seed).spawn(3), training=True), y)

    saved = set(numerics.CORRUPTED_ADJOINTS)
    numerics.CORRUPTED_ADJOINTS.update(corrupt or [])
    try:
        report = numerics.gradcheck(loss_fn, model.parameters(), step)
    finally:
        numerics.CORRUPTED_ADJOINTS.clear()
        numerics.CORRUPTED_ADJOINTS.update(saved)
    rows = [{"tensor": n, "max_rel_error": e, "pass": int(e <= tol)} for n, e in report.items()]
    write_rows(os.path.join(out, "gradcheck.csv"), rows)
    failed = [r["tensor"] for r in rows if not r["pass"]]
    for r in rows:
        print(f"{'ok  ' if r['pass'] else 'FAIL'} {r['tensor']:<32} {r['max_rel_error']:.3e}")
    if failed:
        print(f"gradcheck failed for: {', '.join(failed)} (tolerance {tol:g})", file=sys.stderr)
        return EXIT_VERIFY
    print(f"gradcheck passed: {len(rows)} tensors within {tol:g}")
    return EXIT_OK


def cmd_params(cfg: RunConfig, out: str) -> int:
    mcfg = model_config(cfg, default="nucleotide")
    model = build(mcfg, Rng(cfg.seed))
    total, formula = param_count(model), param_count_formula(mcfg)
    blocks = block_param_counts(model)
    rows = [{"block": k, "params": v} for k, v in blocks.items()] + [{"block": "total", "params": total}]
    write_rows(os.path.join(out, "params.csv"), rows)
    for k, v in blocks.items():
        print(f"{k:<10} {v}")
    print(f"total      {total}")
    if total != formula:
        print(f"closed-form count {formula} disagrees with the built model", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def _model_from(cfg: RunConfig, checkpoint: str | None, default: str) -> LyraModel:
    if checkpoint:
        return load_checkpoint(checkpoint).astype(cfg.dtype)
    return build(model_config(cfg, default=default), Rng(cfg.seed), cfg.dtype)


def cmd_kernel(cfg: RunConfig, out: str, length: int | None, layer: int | None,
               checkpoint: str | None, zero_c: bool = False) -> int:
    section = dict(cfg.kernel)
    L = length if length is not None else _pop(section, "length", 96, int)
    idx = layer if layer is not None else _pop(section, "layer", 0, int)
    section.pop("length", None), section.pop("layer", None)
    _no_leftovers(section, "kernel")
    if L < 1:
        raise ConfigError(f"kernel length must be >= 1, got {L}")
    model = _model_from(cfg, checkpoint, "nucleotide")
    if not 0 <= idx < len(model.s4_blocks):
        raise ConfigError(f"model has {len(model.s4_blocks)} S4D layer(s); layer {idx} requested")
    kparams = model.s4_blocks[idx].kernel
    if zero_c:
        kparams.C.data[...] = 0.0
    with no_grad():
        K = materialize_kernel(kparams, L).data
    sigma = kernel_svd_spectrum(K)
    H = K.shape[0]
    with open(os.path.join(out, "kernel.csv"), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["channel", "t", "value"])
        for c in range(H):
            for t in range(L):
                w.writerow([c, t, repr(float(K[c, t]))])
    write_rows(os.path.join(out, "kernel_spectrum.csv"),
               [{"index": i, "sigma": float(s)} for i, s in enumerate(sigma)])
    print(f"wrote {H} filters of length {L} and {len(sigma)} singular values to {out}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, out: str) -> int:
    if cfg.task is None:
        raise ConfigError("train needs a 'task' section")
    task = build_task(*cfg.task, cfg.seed, cfg)
    mcfg = model_config(cfg, task)
    tcfg = train_config(cfg, task)
    model = build(mcfg, Rng(cfg.seed), cfg.dtype)
    t0 = time.monotonic()
    result = train_loop(model, task.dataset, tcfg, log_every=0, metrics_fn=task.metrics_fn)
    elapsed = time.monotonic() - t0
    write_rows(os.path.join(out, "metrics.csv"), _metric_rows(result.history))
    last = result.history[-1]
    save_checkpoint(model, os.path.join(out, "final.lyra"),
                    extra={"epoch": last["epoch"], "step": last["step"], "state": "final"})
    final_state = model.state_dict()
    model.load_state_dict(result.best_state)
    save_checkpoint(model, os.path.join(out, "best.lyra"),
                    extra={"epoch": result.best_epoch, "state": "best"})
    model.load_state_dict(final_state)
    write_predictions(os.path.join(out, "predictions.csv"), model, task.dataset, task)
    eval_rows = [r for r in result.history if r["split"] != "train"]
    summary = {"params": param_count(model), "best_epoch": result.best_epoch,
               "best_loss": result.best_loss, "final": eval_rows[-1] if eval_rows else None,
               "task": {"kind": cfg.task[0], **task.describe}}
    with open(os.path.join(out, "summary.json"), "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True, default=float)
    logger.info("trained in %.1f s", elapsed)
    if eval_rows:
        print(" ".join(f"{k}={_fmt(v)}" for k, v in eval_rows[-1].items()))
    return EXIT_OK


def _metric_rows(history: list[dict]) -> list[dict]:
    return [{"epoch": r["epoch"], "step": r["step"], "split": r["split"],
             **{k: v for k, v in r.items() if k not in ("epoch", "step", "split")}} for r in history]


def cmd_eval(cfg: RunConfig, out: str, checkpoint: str | None) -> int:
    if not checkpoint:
        raise ConfigError("eval needs --checkpoint PATH")
    if cfg.task is None:
        raise ConfigError("eval needs the run config's 'task' section to rebuild the data")
    header, _ = read_checkpoint_header(checkpoint)
    model = load_checkpoint(checkpoint)
    task = build_task(*cfg.task, cfg.seed, cfg)
    if (model.config.d_input, model.config.d_output) != (task.d_input, task.d_output):
        raise ConfigError("checkpoint architecture does not match the task's input/output widths")
    tcfg = train_config(cfg, task)
    ds = task.dataset
    split = "val" if np.any(ds.split == "val") else "test"
    x, y = ds.subset(split)
    extra = header.get("extra", {})
    row = {"epoch": extra.get("epoch"), "step": extra.get("step"), "split": split,
           **evaluate(model, x, y, tcfg, metrics_fn=task.metrics_fn)}
    write_rows(os.path.join(out, "metrics.csv"), [row])
    write_predictions(os.path.join(out, "predictions.csv"), model, ds, task)
    print(" ".join(f"{k}={_fmt(v)}" for k, v in row.items()))
    return EXIT_OK


def _is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


def cmd_bench(cfg: RunConfig, out: str, lengths: list[int] | None, batch_sizes: list[int] | None,
              reps: int | None, warmup: int | None) -> int:
    section = dict(cfg.bench)
    lengths = lengths or [int(v) for v in section.pop("lengths", [2 ** k for k in range(10, 17)])]
    batch_sizes = batch_sizes or [int(v) for v in section.pop("batch_sizes", [2])]
    reps = reps if reps is not None else _pop(section, "reps", BENCH_MIN_REPS, int)
    warmup = warmup if warmup is not None else _pop(section, "warmup", BENCH_MIN_WARMUP, int)
    for k in ("lengths", "batch_sizes", "reps", "warmup"):
        section.pop(k, None)
    _no_leftovers(section, "bench")
    if reps < BENCH_MIN_REPS:
        raise ConfigError(f"reps must be >= {BENCH_MIN_REPS}, got {reps}")
    if warmup < BENCH_MIN_WARMUP:
        raise ConfigError(f"warmup must be >= {BENCH_MIN_WARMUP}, got {warmup}")
    if not all(_is_pow2(L) for L in lengths):
        raise ConfigError(f"bench lengths must be powers of two, got {lengths}")
    if any(b >= a for b, a in zip(lengths, lengths[1:])):
        raise ConfigError(f"bench lengths must be strictly increasing, got {lengths}")
    if any(b < 1 for b in batch_sizes):
        raise ConfigError(f"batch sizes must be >= 1, got {batch_sizes}")
    model = build(model_config(cfg, default="nucleotide"), Rng(cfg.seed), cfg.dtype)
    rng = Rng(cfg.seed).spawn(1)
    with _pooled_heap():
        rows = _bench_rows(model, rng, lengths, batch_sizes, reps, warmup, cfg.dtype)
    write_rows(os.path.join(out, "bench.csv"), rows,
               ["sequence_length", "batch_size", "median_ms", "iqr_ms", "reps", "status"])
    return EXIT_OK


def _bench_rows(model, rng, lengths, batch_sizes, reps, warmup, dtype) -> list[dict]:
    rows = []
    for B in batch_sizes:
        for L in lengths:
            row = {"sequence_length": L, "batch_size": B, "reps": reps}
            try:
                x = rng.normal(size=(B, L, model.config.d_input)).astype(dtype)
                times = bench_forward(model, x, reps, warmup)
                q1, med, q3 = np.percentile(times, [25, 50, 75])
                row.update(median_ms=float(med), iqr_ms=float(q3 - q1), status="ok")
            except MemoryError:
                row.update(median_ms=None, iqr_ms=None, status="failed: out of memory")
            rows.append(row)
            print(f"L={L:<6} B={B:<3} median={_fmt(row['median_ms'])} ms  {row['status']}")
    return rows


_M_TRIM_THRESHOLD, _M_MMAP_MAX = -1, -4


@contextlib.contextmanager
def _pooled_heap():
    """Keep freed blocks on the glibc heap while timing.

    By default large numpy buffers are mmap'd and unmapped on every forward, so
    each rep pays fresh page faults that grow with L. Disabling mmap and
    trimming lets the warmup reps fault the workspace in once. No-op off glibc.
    """
    try:
        import ctypes
        libc = ctypes.CDLL("libc.so.6")
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        yield
        return
    mallopt(_M_MMAP_MAX, 0)
    mallopt(_M_TRIM_THRESHOLD, 2 ** 31 - 1)
    try:
        yield
    finally:
        mallopt(_M_MMAP_MAX, 65536)
        mallopt(_M_TRIM_THRESHOLD, 128 * 1024)
        libc.malloc_trim(0)


def bench_forward(model: LyraModel, x: np.ndarray, reps: int, warmup: int) -> np.ndarray:
    """Wall-clock milliseconds of ``reps`` eval-mode forwards after ``warmup`` untimed ones."""
    with no_grad():
        for _ in range(warmup):
            forward(model, x)
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            forward(model, x)
            times.append((time.perf_counter() - t0) * 1e3)
    return np.asarray(times)


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config")
    common.add_argument("--seed", help="unsigned 64-bit seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument("--precision", choices=("f32", "f64"), help="floating-point width")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="lyra", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    g.add_argument("--corrupt-adjoint", action="append", help=argparse.SUPPRESS)
    sub.add_parser("params", parents=[common], help="total and per-block parameter counts")
    k = sub.add_parser("kernel", parents=[common], help="dump S4D kernels and their singular values")
    k.add_argument("--length", type=int)
    k.add_argument("--layer", type=int)
    k.add_argument("--checkpoint")
    k.add_argument("--zero-c", action="store_true", help=argparse.SUPPRESS)
    sub.add_parser("train", parents=[common], help="train on the configured task")
    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the configured task")
    e.add_argument("--checkpoint", required=True)
    b = sub.add_parser("bench", parents=[common], help="forward-pass scaling benchmark")
    b.add_argument("--lengths", type=_int_list)
    b.add_argument("--batch-sizes", type=_int_list)
    b.add_argument("--reps", type=int)
    b.add_argument("--warmup", type=int)
    return parser


@contextlib.contextmanager
def _thread_cap():
    value = os.environ.get("LYRA_THREADS")
    if not value:
        yield
        return
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"LYRA_THREADS must be a positive integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=n):
        yield


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args.config)
        if args.seed is not None:
            cfg.seed = _parse_seed(args.seed)
        if args.precision is not None:
            cfg.precision = args.precision
        if cfg.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {cfg.precision!r}")
        out = args.out or _resolve(cfg, cfg.output_dir) or os.path.join("runs", args.command)
        os.makedirs(out, exist_ok=True)
        with _thread_cap():
            if args.command == "gradcheck":
                return cmd_gradcheck(cfg, out, args.corrupt_adjoint)
            if args.command == "params":
                return cmd_params(cfg, out)
            if args.command == "kernel":
                return cmd_kernel(cfg, out, args.length, args.layer, args.checkpoint, args.zero_c)
            if args.command == "train":
                return cmd_train(cfg, out)
            if args.command == "eval":
                return cmd_eval(cfg, out, args.checkpoint)
            return cmd_bench(cfg, out, args.lengths, args.batch_sizes, args.reps, args.warmup)
    except NumericalAbort as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CheckpointError, CsvFormatError, EncodingError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
