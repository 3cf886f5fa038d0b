"""Vocabularies, parallel corpora, synthetic tasks and padding helpers."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tensor import ContractError

log = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<s>", "</s>", "<unk>")
PROVENANCES = ("ground_truth", "distilled")
TASKS = ("copy", "reverse", "cipher")


class FormatError(ValueError):
    """A file on disk does not follow its declared format."""


class Vocabulary:
    """Token <-> id map with ids 0-3 reserved for PAD, BOS, EOS, UNK."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.itos[i] for i in ids if i not in (PAD, BOS, EOS))

    @classmethod
    def synthetic(cls, size: int) -> "Vocabulary":
        """``size`` ids in total: the reserved four plus ``w4 .. w{size-1}``."""
        if size <= len(RESERVED):
            raise ContractError(f"vocabulary needs more than {len(RESERVED)} entries")
        return cls(f"w{i}" for i in range(len(RESERVED), size))

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[: len(RESERVED)]) != RESERVED:
            raise FormatError(f"{path}: first lines must be the reserved tokens {RESERVED}")
        body = lines[len(RESERVED):]
        if len(set(body)) != len(body) or set(body) & set(RESERVED):
            raise FormatError(f"{path}: duplicate vocabulary entry")
        return cls(body)


def tokenize(line: str, vocab: Vocabulary, append_eos: bool = False) -> list[int]:
    ids = [vocab.id(tok) for tok in line.split()]
    if append_eos and ids:
        ids.append(EOS)
    return ids


@dataclass
class SentencePair:
    src: list[int]
    tgt: list[int]


@dataclass
class ParallelCorpus:
    pairs: list[SentencePair] = field(default_factory=list)
    provenance: str = "ground_truth"

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ContractError(f"unknown provenance {self.provenance!r}")
        for p in self.pairs:
            if not p.src or not p.tgt:
                raise ContractError("parallel corpus may not contain empty sentences")

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    @property
    def sources(self) -> list[list[int]]:
        return [p.src for p in self.pairs]

    @property
    def targets(self) -> list[list[int]]:
        return [p.tgt for p in self.pairs]

    def max_len(self) -> int:
        return max((max(len(p.src), len(p.tgt)) for p in self.pairs), default=0)


def cipher_permutation(vocab_size: int, seed: int) -> np.ndarray:
    """Seeded permutation of the content ids; reserved ids map to themselves."""
    rng = np.random.default_rng([seed, 0xC1F])
    perm = np.arange(vocab_size)
    perm[len(RESERVED):] = len(RESERVED) + rng.permutation(vocab_size - len(RESERVED))
    return perm


def apply_task(task: str, src: Sequence[int], perm: np.ndarray | None = None) -> list[int]:
    if task == "copy":
        return list(src)
    if task == "reverse":
        return list(reversed(src))
    if task == "cipher":
        if perm is None:
            raise ContractError("cipher task needs a permutation")
        return [int(perm[t]) for t in src]
    raise ContractError(f"unknown task {task!r}")


def gen_synthetic_corpus(
    task: str,
    vocab_size: int,
    n_pairs: int,
    len_range: tuple[int, int],
    seed: int,
) -> ParallelCorpus:
    """Deterministic synthetic corpus; source tokens are uniform over content ids."""
    if task not in TASKS:
        raise ContractError(f"unknown task {task!r}")
    lo, hi = len_range
    if lo < 1 or hi < lo:
        raise ContractError(f"bad length range {len_range}")
    perm = cipher_permutation(vocab_size, seed) if task == "cipher" else None
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n_pairs):
        n = int(rng.integers(lo, hi + 1))
        src = rng.integers(len(RESERVED), vocab_size, size=n).tolist()
        pairs.append(SentencePair(src, apply_task(task, src, perm)))
    return ParallelCorpus(pairs, "ground_truth")


def split_dev(corpus: ParallelCorpus, frac: float = 0.05, seed: int = 0) -> tuple[ParallelCorpus, ParallelCorpus]:
    """Seeded shuffle, then hold out ``frac`` of the pairs (at least one)."""
    order = np.random.default_rng(seed).permutation(len(corpus))
    n_dev = max(1, int(round(frac * len(corpus)))) if len(corpus) > 1 else 0
    dev = [corpus.pairs[i] for i in sorted(order[:n_dev])]
    train = [corpus.pairs[i] for i in sorted(order[n_dev:])]
    return ParallelCorpus(train, corpus.provenance), ParallelCorpus(dev, corpus.provenance)


def pad_sequences(seqs: Sequence[Sequence[int]], pad: int = PAD) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to the longest sequence. Returns ``(ids, valid)``."""
    if not seqs:
        raise ContractError("cannot pad an empty batch")
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), pad, dtype=np.int64)
    valid = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        valid[i, : len(s)] = True
    return ids, valid


# ----------------------------------------------------------------------------
# text files
# ----------------------------------------------------------------------------


def read_lines(path) -> list[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


def write_lines(path, lines: Iterable[str]) -> None:
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def write_corpus(stem, corpus: ParallelCorpus, vocab: Vocabulary) -> tuple[Path, Path]:
    """Write ``stem.src`` / ``stem.tgt``."""
    src_path, tgt_path = Path(f"{stem}.src"), Path(f"{stem}.tgt")
    write_lines(src_path, (vocab.decode(p.src) for p in corpus))
    write_lines(tgt_path, (vocab.decode(p.tgt) for p in corpus))
    return src_path, tgt_path


def read_corpus(stem, vocab: Vocabulary, provenance: str = "ground_truth") -> ParallelCorpus:
    src_lines = read_lines(f"{stem}.src")
    tgt_lines = read_lines(f"{stem}.tgt")
    if len(src_lines) != len(tgt_lines):
        raise FormatError(f"{stem}: {len(src_lines)} source lines vs {len(tgt_lines)} target lines")
    pairs = []
    for n, (s, t) in enumerate(zip(src_lines, tgt_lines), 1):
        src, tgt = tokenize(s, vocab), tokenize(t, vocab)
        if not src or not tgt:
            raise FormatError(f"{stem}: empty sentence on line {n}")
        pairs.append(SentencePair(src, tgt))
    return ParallelCorpus(pairs, provenance)
