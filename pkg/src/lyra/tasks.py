"""Synthetic task generators (polynomial regression, epistatic landscapes,
selective copying, frequency separation), one-hot encoding and CSV ingestion.

Every generator is a pure function of its spec and the supplied :class:`Rng`.
"""

from __future__ import annotations

import csv
import itertools
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .numerics import ConfigError, Rng
from .train import r2

NUCLEOTIDES = "ACGT"
AMINO_ACIDS = "ACDEFGHIKLMNPQRSTVWY"
SPLITS = ("train", "val", "test")


class EncodingError(ValueError):
    pass


class CsvFormatError(ValueError):
    pass


@dataclass
class SequenceDataset:
    inputs: np.ndarray  # (n, L, channels)
    labels: np.ndarray  # (n, ...) reals or class ids
    split: np.ndarray  # (n,) of "train" / "val" / "test"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.split = np.asarray(self.split, dtype=object)
        if not (len(self.inputs) == len(self.labels) == len(self.split)):
            raise ValueError("inputs, labels and split must have the same length")

    def __len__(self) -> int:
        return len(self.inputs)

    def subset(self, name: str):
        sel = self.split == name
        return self.inputs[sel], self.labels[sel]

    def indices(self, name: str) -> np.ndarray:
        return np.flatnonzero(self.split == name)


def random_split(n: int, rng: Rng, train_fraction: float = 0.8,
                 val_fraction: float = 0.0) -> np.ndarray:
    """Assign each of ``n`` rows to train/val/test by a seeded permutation."""
    perm = rng.permutation(n)
    n_train = int(round(train_fraction * n))
    n_val = int(round(val_fraction * n))
    split = np.empty(n, dtype=object)
    split[perm[:n_train]] = "train"
    split[perm[n_train:n_train + n_val]] = "val"
    split[perm[n_train + n_val:]] = "test"
    return split


def stratified_split(groups, rng: Rng, train_fraction: float = 0.8) -> np.ndarray:
    """Train/test assignment made separately inside each group, so every group
    keeps roughly ``1 - train_fraction`` of its rows for testing."""
    groups = np.asarray(groups)
    split = np.empty(len(groups), dtype=object)
    for g in np.unique(groups):
        rows = np.flatnonzero(groups == g)
        rows = rows[rng.permutation(len(rows))]
        n_test = int(round((1.0 - train_fraction) * len(rows)))
        split[rows[:len(rows) - n_test]] = "train"
        split[rows[len(rows) - n_test:]] = "test"
    return split


# ---------------------------------------------------------------------------
# Polynomial regression
# ---------------------------------------------------------------------------


@dataclass
class SyntheticPolySpec:
    coeffs: tuple[float, ...] = (0.0,) * 6  # a_0 .. a_5
    sin_amp: float = 0.0
    sin_freq: float = 0.0
    cos_amp: float = 0.0
    cos_freq: float = 0.0
    seed: int = 0
    n_train: int = 800
    n_test: int = 200

    @classmethod
    def random(cls, seed: int = 0, n_train: int = 800, n_test: int = 200) -> "SyntheticPolySpec":
        """Randomly parameterised quintic plus one sine and one cosine term."""
        rng = Rng(seed)
        coeffs = tuple(float(c) for c in rng.normal(size=6))
        amps = rng.normal(size=2)
        freqs = rng.uniform(1.0, 4.0, size=2)
        return cls(coeffs, float(amps[0]), float(freqs[0]), float(amps[1]), float(freqs[1]),
                   seed, n_train, n_test)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        y = np.zeros_like(x)
        for c in reversed(self.coeffs):
            y = y * x + c
        return y + self.sin_amp * np.sin(self.sin_freq * x) + self.cos_amp * np.cos(self.cos_freq * x)


def gen_poly_task(spec: SyntheticPolySpec, rng: Rng | None = None):
    """Draw x ~ U[-1, 1] and return (x_train, y_train, x_test, y_test) as 1-D arrays."""
    if spec.n_train < 1 or spec.n_test < 1:
        raise ConfigError("n_train and n_test must be >= 1")
    rng = Rng(spec.seed) if rng is None else rng
    x = rng.uniform(-1.0, 1.0, size=spec.n_train + spec.n_test)
    y = spec(x)
    return x[:spec.n_train], y[:spec.n_train], x[spec.n_train:], y[spec.n_train:]


def poly_dataset(spec: SyntheticPolySpec, rng: Rng | None = None) -> SequenceDataset:
    """Each scalar sample becomes a length-1, single-channel sequence."""
    xtr, ytr, xte, yte = gen_poly_task(spec, rng)
    x = np.concatenate([xtr, xte])
    y = np.concatenate([ytr, yte])
    split = np.array(["train"] * len(xtr) + ["test"] * len(xte), dtype=object)
    return SequenceDataset(x[:, None, None], y[:, None], split)


# ---------------------------------------------------------------------------
# Epistatic landscapes
# ---------------------------------------------------------------------------


@dataclass
class EpistasisLandscape:
    """f(u) = sum over position subsets S of c_S * prod_{i in S} u_i.

    Positions are 1-based; subsets are stored as sorted tuples.
    """
    l: int
    K: int
    terms: dict[tuple[int, ...], float] = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for S, c in self.terms.items():
            S = tuple(sorted(int(i) for i in S))
            if not 1 <= len(S) <= self.K:
                raise ValueError(f"term {S} has order outside [1, {self.K}]")
            if len(set(S)) != len(S) or S[0] < 1 or S[-1] > self.l:
                raise ValueError(f"term {S} has repeated or out-of-range positions")
            if S in clean:
                raise ValueError(f"duplicate term {S}")
            clean[S] = float(c)
        self.terms = clean


def eval_epistasis(landscape: EpistasisLandscape, u) -> float | np.ndarray:
    """Evaluate the landscape on one vector ``u`` (length l) or a batch (n, l)."""
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-1] != landscape.l:
        raise ValueError(f"expected {landscape.l} positions, got {u.shape[-1]}")
    out = np.zeros(u.shape[:-1])
    for S, c in landscape.terms.items():
        out = out + c * np.prod(u[..., [i - 1 for i in S]], axis=-1)
    return float(out) if out.ndim == 0 else out


def random_landscape(l: int, K: int, n_terms: int, rng: Rng) -> EpistasisLandscape:
    """Sparse landscape with coefficients c_S ~ N(0, 1/|S|).

    Each term first draws its order uniformly from the orders that still have
    unused subsets, so every order up to K is represented.
    """
    if K > l or K < 1:
        raise ConfigError(f"need 1 <= K <= l, got K={K}, l={l}")
    pools = {k: [S for S in itertools.combinations(range(1, l + 1), k)] for k in range(1, K + 1)}
    available = sum(len(p) for p in pools.values())
    if n_terms > available:
        raise ConfigError(f"n_terms={n_terms} exceeds the {available} subsets of order <= {K}")
    used = {k: set() for k in pools}
    terms = {}
    for _ in range(n_terms):
        open_orders = [k for k in pools if len(used[k]) < len(pools[k])]
        k = open_orders[int(rng.integers(len(open_orders)))]
        free = [i for i in range(len(pools[k])) if i not in used[k]]
        pick = free[int(rng.integers(len(free)))]
        used[k].add(pick)
        terms[pools[k][pick]] = float(rng.normal() / math.sqrt(k))
    return EpistasisLandscape(l, K, terms)


def gen_epistasis_dataset(l: int, K: int, n_terms: int, rng: Rng, train_fraction: float = 0.8,
                          n_samples: int | None = None, stratify: bool = True):
    """Landscape plus a dataset of binary genotypes one-hot encoded over a 2-letter
    alphabet. Enumerates all 2**l genotypes when ``n_samples`` is None.

    With ``stratify`` the split is drawn per mutation count, so low-order
    buckets (only ``l`` single mutants) still reach the test set.
    """
    landscape = random_landscape(l, K, n_terms, rng)
    if n_samples is None:
        if l > 16:
            raise ConfigError("exhaustive enumeration is limited to l <= 16")
        bits = (np.arange(2 ** l)[:, None] >> np.arange(l)[::-1]) & 1
    else:
        bits = rng.integers(0, 2, size=(n_samples, l))
    u = bits.astype(np.float64)
    labels = np.asarray(eval_epistasis(landscape, u)).reshape(-1, 1)
    inputs = np.stack([1.0 - u, u], axis=-1)
    orders = bits.sum(axis=1)
    split = (stratified_split(orders, rng, train_fraction) if stratify
             else random_split(len(u), rng, train_fraction))
    ds = SequenceDataset(inputs, labels, split, meta={"orders": orders, "genotypes": bits})
    return landscape, ds


# ---------------------------------------------------------------------------
# Selective copying
# ---------------------------------------------------------------------------

# Token 0 is the blank filler; amino acid j of AMINO_ACIDS is token j + 1.
COPY_VOCAB = "-" + AMINO_ACIDS

# First 64 residues of avGFP.
GFP_WILD_TYPE_64 = "MSKGEELFTGVVPILVELDGDVNGHKFSVSGEGEGDATYGKLTLKFICTTGKLPVPWPTLVTTF"


@dataclass
class SelectiveCopySpec:
    wild_type: str
    mutable_positions: list[int]  # 0-based sequence positions
    substitutions: dict[int, str]  # allowed replacement residues per mutable position
    comutation_patterns: list[list[int]] = field(default_factory=list)
    comutation_rate: float = 0.5
    min_mutations: int = 1
    max_mutations: int = 14
    length: int = 64
    # "ordered": slot j holds the j-th mutation by position (padded with a sentinel).
    # "keyed": slot j holds the residue planted at mutable position j (or the sentinel).
    target_mode: str = "ordered"

    def __post_init__(self):
        self.mutable_positions = sorted(int(p) for p in self.mutable_positions)
        self.substitutions = {int(k): v for k, v in self.substitutions.items()}
        self.validate()

    def validate(self) -> None:
        if not 64 <= self.length <= 1024:
            raise ConfigError(f"length must be in [64, 1024], got {self.length}")
        if not 1 <= self.min_mutations <= self.max_mutations <= 14:
            raise ConfigError("mutation counts must satisfy 1 <= min <= max <= 14")
        if len(set(self.mutable_positions)) != len(self.mutable_positions):
            raise ConfigError("mutable_positions must be unique")
        limit = min(self.length, len(self.wild_type))
        for p in self.mutable_positions:
            if not 0 <= p < limit:
                raise ConfigError(f"mutable position {p} outside the wild type / sequence")
            subs = self.substitutions.get(p, "")
            if not subs or any(a not in AMINO_ACIDS or a == self.wild_type[p] for a in subs):
                raise ConfigError(f"position {p} needs non-wild-type amino-acid substitutions")
        mp = set(self.mutable_positions)
        for pat in self.comutation_patterns:
            if not set(pat) <= mp:
                raise ConfigError(f"co-mutation pattern {pat} uses non-mutable positions")
        if self.max_mutations > len(self.mutable_positions):
            raise ConfigError("max_mutations exceeds the number of mutable positions")
        if self.target_mode not in ("ordered", "keyed"):
            raise ConfigError(f"target_mode must be 'ordered' or 'keyed', got {self.target_mode!r}")

    @property
    def mutation_vocab(self) -> list[tuple[int, int]]:
        """All plantable (position, token) pairs; class ``len(vocab)`` is the sentinel."""
        return [(p, COPY_VOCAB.index(a)) for p in self.mutable_positions for a in self.substitutions[p]]

    @property
    def n_slots(self) -> int:
        return self.max_mutations if self.target_mode == "ordered" else len(self.mutable_positions)

    @property
    def n_classes(self) -> int:
        if self.target_mode == "ordered":
            return len(self.mutation_vocab) + 1
        return max(len(s) for s in self.substitutions.values()) + 1

    @classmethod
    def gfp_example(cls, length: int = 64, target_mode: str = "ordered") -> "SelectiveCopySpec":
        """Bundled stand-in: 20 mutable sites on the avGFP N-terminus, two or
        three substitutions each, and four co-mutation pairs."""
        subs = {
            1: "RN", 4: "KG", 7: "SV", 10: "AI", 14: "AT", 17: "GK", 21: "GY",
            25: "QRY", 28: "AT", 31: "RD", 34: "DS", 37: "SC", 39: "NH", 42: "IV",
            46: "VT", 49: "AS", 53: "SH", 56: "LF", 60: "ME", 63: "LS",
        }
        return cls(GFP_WILD_TYPE_64, sorted(subs), subs,
                   comutation_patterns=[[4, 7], [21, 25], [39, 42], [56, 60]],
                   length=length, target_mode=target_mode)


def _plant(spec: SelectiveCopySpec, rng: Rng) -> list[tuple[int, int]]:
    m = int(rng.integers(spec.min_mutations, spec.max_mutations + 1))
    chosen: list[int] = []
    while len(chosen) < m:
        room = m - len(chosen)
        fitting = [pat for pat in spec.comutation_patterns
                   if len(pat) <= room and not set(pat) & set(chosen)]
        if fitting and rng.uniform() < spec.comutation_rate:
            chosen.extend(fitting[int(rng.integers(len(fitting)))])
            continue
        free = [p for p in spec.mutable_positions if p not in chosen]
        chosen.append(free[int(rng.integers(len(free)))])
    out = []
    for p in sorted(chosen):
        subs = spec.substitutions[p]
        out.append((p, COPY_VOCAB.index(subs[int(rng.integers(len(subs)))])))
    return out


def encode_copy_target(spec: SelectiveCopySpec, mutations: list[tuple[int, int]]) -> np.ndarray:
    sentinel = spec.n_classes - 1
    target = np.full(spec.n_slots, sentinel, dtype=np.int64)
    if spec.target_mode == "ordered":
        vocab = {pair: i for i, pair in enumerate(spec.mutation_vocab)}
        for j, pair in enumerate(sorted(mutations)):
            target[j] = vocab[pair]
    else:
        slot = {p: j for j, p in enumerate(spec.mutable_positions)}
        for p, tok in mutations:
            target[slot[p]] = spec.substitutions[p].index(COPY_VOCAB[tok])
    return target


def decode_copy_target(spec: SelectiveCopySpec, target) -> list[tuple[int, int]]:
    """Inverse of :func:`encode_copy_target`: the sorted (position, token) list."""
    sentinel = spec.n_classes - 1
    out = []
    if spec.target_mode == "ordered":
        vocab = spec.mutation_vocab
        out = [vocab[c] for c in np.asarray(target) if c != sentinel]
    else:
        for j, c in enumerate(np.asarray(target)):
            if c == sentinel:
                continue
            p = spec.mutable_positions[j]
            out.append((p, COPY_VOCAB.index(spec.substitutions[p][c])))
    return sorted(out)


def gen_selective_copy(spec: SelectiveCopySpec, rng: Rng, n: int) -> SequenceDataset:
    """Inputs are one-hot over ``COPY_VOCAB``: blank tokens everywhere except
    the planted substitutions. Targets are per-slot class ids."""
    spec.validate()
    tokens = np.zeros((n, spec.length), dtype=np.int64)
    targets = np.empty((n, spec.n_slots), dtype=np.int64)
    counts = np.empty(n, dtype=np.int64)
    for i in range(n):
        muts = _plant(spec, rng)
        for p, tok in muts:
            tokens[i, p] = tok
        targets[i] = encode_copy_target(spec, muts)
        counts[i] = len(muts)
    inputs = np.eye(len(COPY_VOCAB))[tokens]
    split = np.full(n, "train", dtype=object)
    return SequenceDataset(inputs, targets, split, meta={"tokens": tokens, "mutation_counts": counts})


def hamming_to_wild_type(spec: SelectiveCopySpec, tokens: np.ndarray) -> int:
    """Hamming distance between the wild type with the sample's substitutions
    applied and the wild type itself."""
    mutant = list(spec.wild_type)
    for p, t in enumerate(tokens):
        if t:
            mutant[p] = COPY_VOCAB[t]
    return sum(a != b for a, b in zip(mutant, spec.wild_type))


def copy_slot_accuracy(spec: SelectiveCopySpec, logits: np.ndarray, targets: np.ndarray) -> float:
    """Fraction of planted mutations whose slot is predicted exactly (padding
    slots are not counted)."""
    k = spec.n_classes
    pred = np.asarray(logits).reshape(len(targets), spec.n_slots, k).argmax(-1)
    real = targets != k - 1
    return float(np.mean(pred[real] == targets[real]))


# ---------------------------------------------------------------------------
# Frequency separation
# ---------------------------------------------------------------------------


@dataclass
class FrequencySpec:
    """Composite of cosines with fixed angular frequencies.

    Amplitudes/phases left as ``None`` are drawn per sample (amplitude
    U[0.5, 1.5], phase U[0, 2 pi)); given values are used as-is.
    """
    frequencies: tuple[float, ...]
    amplitudes: tuple[float, ...] | None = None
    phases: tuple[float, ...] | None = None
    length: int = 64

    def __post_init__(self):
        self.frequencies = tuple(float(w) for w in self.frequencies)
        self.validate()

    def validate(self) -> None:
        if self.length < 8:
            raise ConfigError(f"length must be >= 8, got {self.length}")
        if len(set(self.frequencies)) != len(self.frequencies):
            raise ConfigError(f"frequencies must be pairwise distinct, got {self.frequencies}")
        for name in ("amplitudes", "phases"):
            v = getattr(self, name)
            if v is not None and len(v) != len(self.frequencies):
                raise ConfigError(f"{name} must have one entry per frequency")

    @classmethod
    def bin_aligned(cls, bins=(3, 7, 12, 18), length: int = 64, **kw) -> "FrequencySpec":
        return cls(tuple(2 * math.pi * k / length for k in bins), length=length, **kw)


def gen_frequency_task(spec: FrequencySpec, rng: Rng, n: int):
    """Return (composite (n, L), components (n, C, L))."""
    spec.validate()
    C = len(spec.frequencies)
    amps = (np.broadcast_to(np.asarray(spec.amplitudes, dtype=np.float64), (n, C))
            if spec.amplitudes is not None else rng.uniform(0.5, 1.5, size=(n, C)))
    phases = (np.broadcast_to(np.asarray(spec.phases, dtype=np.float64), (n, C))
              if spec.phases is not None else rng.uniform(0.0, 2 * math.pi, size=(n, C)))
    t = np.arange(spec.length)
    w = np.asarray(spec.frequencies)
    components = amps[..., None] * np.cos(w[None, :, None] * t + phases[..., None])
    return components.sum(axis=1), components


def frequency_dataset(spec: FrequencySpec, rng: Rng, n: int, train_fraction: float = 0.8) -> SequenceDataset:
    """Inputs (n, L, 1) composite; labels (n, (1 + C) * L) = composite then components."""
    composite, components = gen_frequency_task(spec, rng, n)
    labels = np.concatenate([composite[:, None], components], axis=1).reshape(n, -1)
    return SequenceDataset(composite[..., None], labels, random_split(n, rng, train_fraction),
                           meta={"n_components": components.shape[1], "length": spec.length})


def dominant_bin(signal: np.ndarray) -> np.ndarray:
    """Index of the largest rfft magnitude along the last axis."""
    return np.abs(np.fft.rfft(np.asarray(signal, dtype=np.float64), axis=-1)).argmax(axis=-1)


def frequency_scores(pred: np.ndarray, labels: np.ndarray, n_components: int, length: int) -> dict:
    """Composite R^2, component R^2, and the fraction of (sample, component)
    pairs whose predicted dominant bin equals the target's."""
    n = len(labels)
    pred = np.asarray(pred, dtype=np.float64).reshape(n, 1 + n_components, length)
    labels = np.asarray(labels, dtype=np.float64).reshape(n, 1 + n_components, length)
    return {
        "composite_r2": r2(pred[:, 0], labels[:, 0]),
        "component_r2": r2(pred[:, 1:], labels[:, 1:]),
        "bin_match": float(np.mean(dominant_bin(pred[:, 1:]) == dominant_bin(labels[:, 1:]))),
    }


# ---------------------------------------------------------------------------
# Encoding and CSV ingestion
# ---------------------------------------------------------------------------


def one_hot_encode(sequence: str, alphabet: str, policy: str = "strict") -> np.ndarray:
    """(L, |alphabet|) one-hot matrix. Unknown tokens raise under ``policy="strict"``
    and become uniform rows under ``policy="smear"``."""
    index = {a: i for i, a in enumerate(alphabet)}
    out = np.zeros((len(sequence), len(alphabet)))
    for i, ch in enumerate(sequence):
        j = index.get(ch)
        if j is not None:
            out[i, j] = 1.0
        elif policy == "smear":
            out[i] = 1.0 / len(alphabet)
        else:
            raise EncodingError(f"token {ch!r} at position {i} is not in alphabet {alphabet!r}")
    return out


def one_hot_stacked(guide: str, target: str, alphabet: str = NUCLEOTIDES, policy: str = "strict") -> np.ndarray:
    """Guide and target encodings concatenated along channels, e.g. 4 + 4 = 8."""
    if len(guide) != len(target):
        raise EncodingError(f"guide length {len(guide)} != target length {len(target)}")
    return np.concatenate([one_hot_encode(guide, alphabet, policy),
                           one_hot_encode(target, alphabet, policy)], axis=1)


def decode_one_hot(x: np.ndarray, alphabet: str) -> str:
    return "".join(alphabet[i] for i in np.asarray(x).argmax(axis=-1))


def load_csv_dataset(path: str | os.PathLike, alphabet: str, label_kind: str = "real",
                     train_fraction: float = 0.8, seed: int = 0, policy: str = "strict") -> SequenceDataset:
    """Read ``sequence,label[,split]`` rows. Without a split column, rows are
    split randomly with the given seed."""
    if label_kind not in ("real", "class"):
        raise ConfigError(f"label_kind must be 'real' or 'class', got {label_kind!r}")
    seqs, encoded, labels, splits = [], [], [], []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["sequence", "label"]:
            raise CsvFormatError(f"{path}:1: header must start with 'sequence,label'")
        has_split = len(header) > 2 and header[2].strip() == "split"
        if len(header) > (3 if has_split else 2):
            raise CsvFormatError(f"{path}:1: unexpected columns {header}")
        width = len(header)
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != width:
                raise CsvFormatError(f"{path}:{line}: expected {width} fields, got {len(row)}")
            seq = row[0].strip()
            try:
                lab = float(row[1]) if label_kind == "real" else int(row[1])
            except ValueError:
                raise CsvFormatError(f"{path}:{line}: cannot parse label {row[1]!r}") from None
            if seqs and len(seq) != len(seqs[0]):
                raise CsvFormatError(f"{path}:{line}: sequence length {len(seq)} != {len(seqs[0])}")
            try:
                enc = one_hot_encode(seq, alphabet, policy)
            except EncodingError as e:
                raise CsvFormatError(f"{path}:{line}: {e}") from None
            if has_split:
                sp = row[2].strip()
                if sp not in SPLITS:
                    raise CsvFormatError(f"{path}:{line}: split must be one of {SPLITS}, got {sp!r}")
                splits.append(sp)
            seqs.append(seq)
            encoded.append(enc)
            labels.append(lab)
    if not seqs:
        raise CsvFormatError(f"{path}: no data rows")
    inputs = np.stack(encoded)
    y = np.asarray(labels, dtype=np.float64 if label_kind == "real" else np.int64)
    if label_kind == "real":
        y = y[:, None]
    split = np.asarray(splits, dtype=object) if has_split else random_split(len(seqs), Rng(seed), train_fraction)
    return SequenceDataset(inputs, y, split, meta={"sequences": seqs})
