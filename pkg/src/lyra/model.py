"""Lyra: encoder -> PGC stack -> prenorm residual S4D blocks -> mean pool -> decoder."""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    ConfigError,
    Parameter,
    Rng,
    ShapeError,
    Tensor,
    as_tensor,
    dropout_tied,
    linear,
    rmsnorm,
    tmean,
    transpose,
)
from .pgc import PGCParams, init_pgc, pgc_forward
from .s4d import S4DLayerParams, init_s4d_layer, s4d_forward

MAGIC = b"LYRA1\n"
FORMAT_VERSION = 1

# Named configurations; a config dict may start from one with ``preset: name``.
PRESETS: dict[str, dict] = {
    # nucleotide classifier, 46,210 parameters
    "nucleotide": dict(d_input=4, d_model=64, pgc_hiddens=[16, 128], num_s4=1, d_state=64, d_output=2),
    # polynomial regressor, 201 parameters
    "poly201": dict(d_input=1, d_model=4, pgc_hiddens=[4], num_s4=1, d_state=6, d_output=1,
                    dropout=0.0, final_dropout=0.0),
    # width-48 single-PGC/single-S4D model used for epistasis and frequency runs
    "compact48": dict(d_model=48, pgc_hiddens=[16], num_s4=1, d_state=64, dropout=0.2, final_dropout=0.1),
    # smallest full model accepted by the gradient check
    "tiny": dict(d_input=3, d_model=4, pgc_hiddens=[3], num_s4=1, d_state=4, d_output=2),
}


@dataclass
class LyraConfig:
    d_input: int
    d_model: int
    pgc_hiddens: list[int] = field(default_factory=list)
    num_s4: int = 1
    d_state: int = 64
    d_output: int = 10
    dropout: float = 0.2
    final_dropout: float = 0.2
    prenorm: bool = True
    # With encoder=False the input feeds the blocks directly (d_model == d_input).
    encoder: bool = True

    def validate(self) -> None:
        for name in ("d_input", "d_model", "d_output"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.num_s4 < 0:
            raise ConfigError(f"num_s4 must be >= 0, got {self.num_s4}")
        if self.num_s4 and (self.d_state < 2 or self.d_state % 2):
            raise ConfigError(f"d_state must be a positive even number, got {self.d_state}")
        if any(int(h) < 1 for h in self.pgc_hiddens):
            raise ConfigError(f"pgc_hiddens entries must be >= 1, got {self.pgc_hiddens}")
        for name in ("dropout", "final_dropout"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {p}")
        if not self.encoder and self.d_model != self.d_input:
            raise ConfigError("encoder=False requires d_model == d_input")

    @classmethod
    def from_dict(cls, d: dict) -> "LyraConfig":
        d = dict(d)
        if "preset" in d:
            name = d.pop("preset")
            if name not in PRESETS:
                raise ConfigError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}")
            d = {**PRESETS[name], **d}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config field(s): {sorted(unknown)}")
        try:
            cfg = cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None
        cfg.pgc_hiddens = [int(h) for h in cfg.pgc_hiddens]
        cfg.validate()
        return cfg


@dataclass
class LyraModel:
    config: LyraConfig
    encoder_W: Parameter | None
    encoder_b: Parameter | None
    pgc_blocks: list[PGCParams]
    s4_norms: list[Parameter]
    s4_blocks: list[S4DLayerParams]
    decoder_W: Parameter
    decoder_b: Parameter

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        out = []
        if self.encoder_W is not None:
            out += [("encoder.weight", self.encoder_W), ("encoder.bias", self.encoder_b)]
        for i, blk in enumerate(self.pgc_blocks):
            out += [(f"pgc.{i}.{n}", p) for n, p in blk.parameters()]
        for i, (g, blk) in enumerate(zip(self.s4_norms, self.s4_blocks)):
            out.append((f"s4.{i}.norm.weight", g))
            out += [(f"s4.{i}.{n}", p) for n, p in blk.parameters()]
        out += [("decoder.weight", self.decoder_W), ("decoder.bias", self.decoder_b)]
        return out

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for n, p in self.named_parameters():
            if state[n].shape != p.shape:
                raise ShapeError(f"{n}: shape {state[n].shape} != {p.shape}")
            p.data = np.array(state[n], dtype=p.dtype)

    def astype(self, dtype) -> "LyraModel":
        """Cast every parameter in place (e.g. to float32 for benchmarking)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        return self

    @property
    def dtype(self):
        return self.decoder_W.dtype


def _uniform(rng: Rng, fan_in: int, shape, dtype) -> Parameter:
    bound = 1.0 / math.sqrt(fan_in)
    return Parameter(rng.uniform(-bound, bound, size=shape).astype(dtype))


def build(config: LyraConfig, rng: Rng, dtype=np.float64) -> LyraModel:
    config.validate()
    d, H = config.d_input, config.d_model
    enc_W = enc_b = None
    if config.encoder:
        enc_W, enc_b = _uniform(rng, d, (H, d), dtype), _uniform(rng, d, H, dtype)
    pgcs = [init_pgc(H, h, rng, config.dropout, dtype) for h in config.pgc_hiddens]
    norms, s4s = [], []
    for _ in range(config.num_s4):
        norms.append(Parameter(np.ones(H, dtype=dtype)))
        s4s.append(init_s4d_layer(H, config.d_state, rng, config.dropout, dtype))
    dec_W = _uniform(rng, H, (config.d_output, H), dtype)
    dec_b = _uniform(rng, H, config.d_output, dtype)
    model = LyraModel(config, enc_W, enc_b, pgcs, norms, s4s, dec_W, dec_b)
    for name, p in model.named_parameters():
        p.name = name
    return model


def mean_pool(e) -> Tensor:
    """Average over the sequence axis of (B, L, d)."""
    return tmean(as_tensor(e), axis=1)


def forward(model: LyraModel, x, rng: Rng | None = None, training: bool = False,
            return_embeddings: bool = False):
    cfg = model.config
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[-1] != cfg.d_input:
        raise ShapeError(f"expected input (B, L, {cfg.d_input}), got {x.shape}")
    if x.shape[1] < 1:
        raise ShapeError("sequence length must be >= 1")
    if model.encoder_W is not None:
        x = linear(x, model.encoder_W, model.encoder_b)
    for blk in model.pgc_blocks:
        x = pgc_forward(x, blk, rng, training)
    for gamma, layer in zip(model.s4_norms, model.s4_blocks):
        z = rmsnorm(x, gamma) if cfg.prenorm else x
        z = s4d_forward(transpose(z, (0, 2, 1)), layer, rng, training)
        z = transpose(dropout_tied(z, cfg.dropout, rng, training), (0, 2, 1))
        x = x + z
        if not cfg.prenorm:
            x = rmsnorm(x, gamma)
    embeddings = x
    pooled = dropout_tied(mean_pool(x), cfg.final_dropout, rng, training)
    out = linear(pooled, model.decoder_W, model.decoder_b)
    return (out, embeddings) if return_embeddings else out


# ---------------------------------------------------------------------------
# Parameter counting
# ---------------------------------------------------------------------------


def param_count(model: LyraModel) -> int:
    return sum(p.size for p in model.parameters())


def block_param_counts(model: LyraModel) -> dict[str, int]:
    counts: dict[str, int] = {}
    for name, p in model.named_parameters():
        parts = name.split(".")
        key = ".".join(parts[:2]) if parts[0] in ("pgc", "s4") else parts[0]
        counts[key] = counts.get(key, 0) + p.size
    return counts


def param_count_formula(cfg: LyraConfig) -> int:
    """Closed-form count; must agree with :func:`param_count` of a built model."""
    d = cfg.d_model
    total = cfg.d_input * d + d if cfg.encoder else 0
    for h in cfg.pgc_hiddens:
        total += (d * 2 * h + 2 * h) + 2 * h + (3 * h + h) + (h * d + d) + d
    n = cfg.d_state // 2
    per_s4 = d + (d + 2 * d * n + d * n + d * n + d) + (d * 2 * d + 2 * d)
    total += cfg.num_s4 * per_s4
    return total + d * cfg.d_output + cfg.d_output


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class ManifestError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


def save_checkpoint(model: LyraModel, path: str | os.PathLike, extra: dict | None = None) -> None:
    """Write ``MAGIC``, a JSON header, a NUL byte, then the little-endian payload."""
    manifest, chunks, offset = [], [], 0
    for name, p in model.named_parameters():
        arr = np.ascontiguousarray(p.data, dtype=p.dtype.newbyteorder("<"))
        manifest.append({"name": name, "shape": list(arr.shape),
                         "dtype": arr.dtype.str, "byte_offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = {"format_version": FORMAT_VERSION, "config": dataclasses.asdict(model.config),
              "manifest": manifest, "payload_bytes": offset}
    if extra:
        header["extra"] = extra
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\0")
        for c in chunks:
            f.write(c)


def read_checkpoint_header(path: str | os.PathLike) -> tuple[dict, bytes]:
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(MAGIC):
        raise CheckpointFormatError(f"{path}: not a Lyra checkpoint (bad magic)")
    end = blob.find(b"\0", len(MAGIC))
    if end < 0:
        raise CheckpointFormatError(f"{path}: header is not NUL-terminated")
    try:
        header = json.loads(blob[len(MAGIC):end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"{path}: unreadable header ({e})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {header.get('format_version')!r}, expected {FORMAT_VERSION}")
    return header, blob[end + 1:]


def load_checkpoint(path: str | os.PathLike) -> LyraModel:
    header, payload = read_checkpoint_header(path)
    config = LyraConfig.from_dict(header["config"])
    model = build(config, Rng(0))
    params = model.named_parameters()
    manifest = header["manifest"]
    if [m["name"] for m in manifest] != [n for n, _ in params]:
        raise ManifestError(f"{path}: parameter names do not match the config's architecture")
    need = 0
    for m, (name, p) in zip(manifest, params):
        if tuple(m["shape"]) != p.shape:
            raise ManifestError(f"{path}: {name} has manifest shape {m['shape']}, "
                                f"architecture expects {list(p.shape)}")
        dt = np.dtype(m["dtype"])
        need = max(need, m["byte_offset"] + dt.itemsize * p.size)
    if len(payload) < need or len(payload) < header.get("payload_bytes", 0):
        raise TruncatedPayloadError(f"{path}: payload has {len(payload)} bytes, need {need}")
    for m, (_, p) in zip(manifest, params):
        dt = np.dtype(m["dtype"])
        arr = np.frombuffer(payload, dtype=dt, count=p.size, offset=m["byte_offset"])
        p.data = arr.reshape(p.shape).astype(dt.newbyteorder("="))
        p.grad = np.zeros_like(p.data)
    return model
