"""Synthetic next-token tasks standing in for fine-tuning corpora.

Each sample is a token sequence plus a per-position gold target: gold[t] is
the token the model should emit after reading tokens[0..t]. Positions with
gold == -1 carry no supervision (prompt/noise regions). Reserved ids at the
top of the vocabulary: EOS = V-1, SEP = V-2, MARKER = V-3.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TASK_KINDS = ("copy", "reverse", "modsum", "needle")

NO_LABEL = -1


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    vocab: int = 32
    length: int = 8  # payload length (data tokens per sample)
    n_samples: int = 200
    seed: int = 0
    modulus: int = 7  # modsum only

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; choose from {TASK_KINDS}")
        if self.vocab < 6:
            raise ValueError("vocab must be >= 6 (3 reserved ids + data tokens)")
        if self.length < 2 or self.n_samples < 1:
            raise ValueError("invalid length or sample count")
        if self.kind == "modsum" and not (2 <= self.modulus <= self.vocab - 3):
            raise ValueError("modulus must fit below the reserved token ids")

    @property
    def eos(self) -> int:
        return self.vocab - 1

    @property
    def sep(self) -> int:
        return self.vocab - 2

    @property
    def marker(self) -> int:
        return self.vocab - 3

    @property
    def n_data_tokens(self) -> int:
        return self.vocab - 3

    def sequence_length(self) -> int:
        if self.kind in ("copy", "reverse"):
            return 2 * self.length + 2  # payload, SEP, payload, EOS
        if self.kind == "modsum":
            return self.length + 1  # seeded recurrence, EOS
        return self.length + 3  # needle: prefix containing marker+needle, SEP, needle, EOS


@dataclass
class Dataset:
    """Fixed-length token batch: tokens (N, T) int64, gold (N, T) with -1 holes."""

    tokens: np.ndarray
    gold: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.gold = np.asarray(self.gold, dtype=np.int64)
        if self.tokens.shape != self.gold.shape:
            raise ValueError("tokens and gold must share a shape")

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.tokens[idx], self.gold[idx])

    def split(self, holdout_fraction: float, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        rng = np.random.default_rng(seed)
        n = len(self)
        perm = rng.permutation(n)
        n_hold = max(1, int(round(n * holdout_fraction)))
        return self.subset(perm[n_hold:]), self.subset(perm[:n_hold])


def _gen_sample(task: TaskSpec, rng: np.random.Generator) -> tuple[list[int], list[int]]:
    nd = task.n_data_tokens
    m = task.length
    if task.kind in ("copy", "reverse"):
        payload = rng.integers(0, nd, size=m).tolist()
        answer = payload if task.kind == "copy" else payload[::-1]
        tokens = payload + [task.sep] + answer + [task.eos]
        gold = [NO_LABEL] * m + answer + [task.eos, NO_LABEL]
        return tokens, gold
    if task.kind == "modsum":
        M = task.modulus
        seq = [int(rng.integers(0, M)), int(rng.integers(0, M))]
        for _ in range(m - 2):
            seq.append((seq[-1] + seq[-2]) % M)
        tokens = seq + [task.eos]
        # gold[t] targets the prediction made after reading tokens[..t]
        gold = [NO_LABEL] + [seq[j] for j in range(2, m)] + [task.eos, NO_LABEL]
        return tokens, gold
    # needle: random prefix containing MARKER followed by the needle token
    prefix_len = m
    marker_pos = int(rng.integers(0, prefix_len - 1))
    prefix = rng.integers(0, nd, size=prefix_len).tolist()
    needle = prefix[marker_pos + 1]
    tokens = (
        prefix[:marker_pos] + [task.marker] + prefix[marker_pos + 1 :] + [task.sep, needle, task.eos]
    )
    gold = [NO_LABEL] * (len(tokens) - 3) + [needle, task.eos, NO_LABEL]
    return tokens, gold


def generate(task: TaskSpec) -> Dataset:
    """Deterministic per seed; all samples share one sequence length."""
    rng = np.random.default_rng(task.seed)
    T = task.sequence_length()
    tokens = np.zeros((task.n_samples, T), dtype=np.int64)
    gold = np.zeros((task.n_samples, T), dtype=np.int64)
    for i in range(task.n_samples):
        toks, g = _gen_sample(task, rng)
        if len(toks) != T or len(g) != T:
            raise AssertionError(f"generator produced length {len(toks)}/{len(g)}, want {T}")
        tokens[i] = toks
        gold[i] = g
    return Dataset(tokens, gold)


def derive_gold(task: TaskSpec, tokens: np.ndarray) -> np.ndarray:
    """Re-derive labels from a token sequence; the generator's independent check."""
    tokens = list(int(t) for t in tokens)
    T = len(tokens)
    gold = [NO_LABEL] * T
    if task.kind in ("copy", "reverse"):
        m = task.length
        payload = tokens[:m]
        answer = payload if task.kind == "copy" else payload[::-1]
        for j, a in enumerate(answer):
            gold[m + j] = a
        gold[m + len(answer)] = task.eos
    elif task.kind == "modsum":
        for t in range(1, task.length - 1):
            gold[t] = (tokens[t] + tokens[t - 1]) % task.modulus
        gold[task.length - 1] = task.eos
    else:
        marker_pos = tokens.index(task.marker)
        needle = tokens[marker_pos + 1]
        gold[T - 3] = needle
        gold[T - 2] = task.eos
    return np.array(gold, dtype=np.int64)


def save_dataset(path, ds: Dataset) -> None:
    with open(path, "w") as f:
        for i in range(len(ds)):
            rec = {"input": ds.tokens[i].tolist(), "gold": ds.gold[i].tolist()}
            f.write(json.dumps(rec) + "\n")


def load_dataset(path) -> Dataset:
    tokens, gold = [], []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        tokens.append(rec["input"])
        gold.append(rec["gold"])
    return Dataset(np.array(tokens), np.array(gold))
