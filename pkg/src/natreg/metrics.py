"""Corpus BLEU and repetition / coverage diagnostics."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

from .data import TASKS, apply_task, cipher_permutation
from .inference import dedup_postprocess
from .tensor import ContractError

MAX_ORDER = 4


def ngram_counts(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(hypotheses: Sequence[Sequence], references: Sequence[Sequence]) -> dict:
    """Summed clipped matches and totals per order, plus corpus lengths."""
    if len(hypotheses) != len(references):
        raise ContractError(f"{len(hypotheses)} hypotheses but {len(references)} references")
    matches = [0] * MAX_ORDER
    hyp_totals = [0] * MAX_ORDER
    ref_totals = [0] * MAX_ORDER
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, MAX_ORDER + 1):
            h, r = ngram_counts(hyp, n), ngram_counts(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            hyp_totals[n - 1] += max(len(hyp) - n + 1, 0)
            ref_totals[n - 1] += max(len(ref) - n + 1, 0)
    return {"matches": matches, "hyp_totals": hyp_totals, "ref_totals": ref_totals, "hyp_len": hyp_len, "ref_len": ref_len}


def bleu(
    hypotheses: Sequence[Sequence],
    references: Sequence[Sequence],
    strict: bool = False,
    lowercase: bool = False,
) -> float:
    """Corpus BLEU-4 in [0, 100] with one reference per hypothesis.

    Unless ``strict``, a zero precision at order 2 or higher is replaced by
    add-one smoothing. Orders with no n-grams on either side are skipped.
    """
    if lowercase:
        hypotheses = [[str(t).lower() for t in h] for h in hypotheses]
        references = [[str(t).lower() for t in r] for r in references]
    st = bleu_stats(hypotheses, references)
    c, r = st["hyp_len"], st["ref_len"]
    if c == 0:
        return 0.0
    log_p = []
    for n in range(MAX_ORDER):
        m, total = st["matches"][n], st["hyp_totals"][n]
        if total == 0 and st["ref_totals"][n] == 0:
            continue
        if m == 0:
            if strict or n == 0:
                return 0.0
            m, total = 1, total + 1
        log_p.append(math.log(m / total))
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return 100.0 * bp * math.exp(sum(log_p) / len(log_p))


def repetition_stats(hypotheses: Sequence[Sequence]) -> tuple[float, float]:
    """(mean de-dup operations per sentence, percentage of sentences with any)."""
    if not hypotheses:
        return 0.0, 0.0
    ops = [dedup_postprocess(h)[1] for h in hypotheses]
    return sum(ops) / len(ops), 100.0 * sum(1 for k in ops if k) / len(ops)


def task_map(task: str, vocab_size: int | None = None, seed: int | None = None) -> Callable[[Sequence[int]], list[int]]:
    """Ground-truth source→target mapping of a synthetic task."""
    if task not in TASKS:
        raise ContractError(f"unknown task {task!r}")
    perm = None
    if task == "cipher":
        if vocab_size is None or seed is None:
            raise ContractError("cipher task needs vocab_size and seed")
        perm = cipher_permutation(vocab_size, seed)
    return lambda src: apply_task(task, src, perm)


def coverage_ratio(hypotheses: Sequence[Sequence], sources: Sequence[Sequence], mapping) -> float:
    """Mean fraction of distinct expected target tokens present in each hypothesis.

    ``mapping`` is a callable from :func:`task_map` or a task name for the
    permutation-free tasks.
    """
    if isinstance(mapping, str):
        mapping = task_map(mapping)
    if len(hypotheses) != len(sources):
        raise ContractError(f"{len(hypotheses)} hypotheses but {len(sources)} sources")
    if not hypotheses:
        return 0.0
    fractions = []
    for hyp, src in zip(hypotheses, sources):
        expected = set(mapping(src))
        if not expected:
            continue
        fractions.append(len(expected & set(hyp)) / len(expected))
    return sum(fractions) / len(fractions) if fractions else 0.0


@dataclass
class EvalReport:
    bleu: float
    per_sentence_dedup_ops: float
    pct_sentences_with_repeats: float
    coverage_ratio: float | None = None

    def __post_init__(self):
        for key, value in asdict(self).items():
            if value is not None and not math.isfinite(value):
                raise ContractError(f"{key} is not finite: {value}")

    def _items(self):
        return [(k, v) for k, v in asdict(self).items() if v is not None]

    def to_text(self) -> str:
        return "".join(f"{k} = {v:.2f}\n" if k == "bleu" else f"{k} = {v:.4f}\n" for k, v in self._items())

    def to_json_lines(self) -> str:
        return "".join(json.dumps({"metric": k, "value": v}) + "\n" for k, v in self._items())


def evaluate(hypotheses, references, sources=None, mapping=None, strict: bool = False) -> EvalReport:
    mean_ops, pct = repetition_stats(hypotheses)
    cov = None
    if sources is not None and mapping is not None:
        cov = coverage_ratio(hypotheses, sources, mapping)
    return EvalReport(bleu(hypotheses, references, strict=strict), mean_ops, pct, cov)
