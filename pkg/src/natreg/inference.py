"""Decoding: parallel NAT argmax, noisy parallel decoding with teacher
rescoring, length-normalised beam search for the autoregressive teacher,
the de-duplication postprocess and latency measurement."""

from __future__ import annotations

import logging
import statistics
import time
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import BOS, EOS, PAD, pad_sequences
from .nat import LengthRule, length_candidates, predict_length, uniform_map_batch
from .tensor import ContractError, Tensor
from .transformer import ModelConfig, ModelParams, decode_at, decode_nat, encode

log = logging.getLogger(__name__)


@dataclass
class Candidate:
    length: int
    tokens: list[int]
    nat_logprob: float
    teacher_score: float | None = None


# ----------------------------------------------------------------------------
# NAT decoding
# ----------------------------------------------------------------------------


def decode_parallel_lengths(
    src_ids: Sequence[int],
    lengths: Sequence[int],
    nat_params: ModelParams,
    cfg: ModelConfig,
) -> list[Candidate]:
    """One encoder pass, then one padded decoder pass over every requested length."""
    src = np.asarray(src_ids, dtype=np.int64)[None, :]
    lengths = [int(n) for n in lengths]
    if min(lengths) < 1:
        raise ContractError("target length must be at least 1")
    with T.no_grad():
        enc_out = encode(src, nat_params, cfg)
        srcs = np.repeat(src, len(lengths), axis=0)
        dec_in, valid = uniform_map_batch(srcs, np.full(len(lengths), src.shape[1]), np.asarray(lengths), nat_params.src_embed)
        _, logits = decode_nat(dec_in, enc_out, nat_params, cfg, tgt_valid=valid)
        logp = T.log_softmax(logits, axis=-1).data
    tokens = logp.argmax(axis=-1)  # first maximum, i.e. lowest id on ties
    best = np.take_along_axis(logp, tokens[..., None], axis=-1)[..., 0]
    out = []
    for row, n in enumerate(lengths):
        out.append(Candidate(n, tokens[row, :n].tolist(), float(best[row, :n].sum())))
    return out


def decode_parallel(src_ids, t_y: int, nat_params: ModelParams, cfg: ModelConfig) -> Candidate:
    """Argmax at every position of a single NAT pass with target length ``t_y``."""
    return decode_parallel_lengths(src_ids, [t_y], nat_params, cfg)[0]


def rescore(
    candidates: Sequence[Candidate],
    src_ids: Sequence[int],
    teacher_params: ModelParams,
    cfg: ModelConfig,
    normalize: bool = True,
) -> list[Candidate]:
    """Score candidates with the teacher's teacher-forced log-likelihood.

    The candidate is scored together with the closing EOS; with ``normalize``
    the sum is divided by the number of scored tokens. Returns new candidates
    sorted by descending score (stable, so ties keep input order).
    """
    if not candidates:
        raise ContractError("rescore needs at least one candidate")
    src = np.asarray(src_ids, dtype=np.int64)[None, :]
    dec_in, valid = pad_sequences([[BOS] + c.tokens for c in candidates])
    targets, _ = pad_sequences([c.tokens + [EOS] for c in candidates])
    with T.no_grad():
        enc_out = encode(src, teacher_params, cfg)
        logits = decode_at(dec_in, enc_out, teacher_params, cfg, tgt_valid=valid)
        logp = T.log_softmax(logits, axis=-1).data
    tok = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    sums = np.where(valid, tok, 0.0).sum(axis=1)
    counts = valid.sum(axis=1)
    scored = [
        replace(c, teacher_score=float(s / n if normalize else s))
        for c, s, n in zip(candidates, sums, counts)
    ]
    return sorted(scored, key=lambda c: -c.teacher_score)


def translate_npd(
    src_ids: Sequence[int],
    rule: LengthRule,
    nat_params: ModelParams,
    nat_cfg: ModelConfig,
    teacher_params: ModelParams | None = None,
    teacher_cfg: ModelConfig | None = None,
    normalize: bool = True,
) -> tuple[Candidate, list[Candidate]]:
    """Noisy parallel decoding over ``2b + 1`` target lengths.

    With ``b == 0`` the single candidate is returned and the teacher is not
    consulted. Otherwise all candidates are rescored and the best returned.
    """
    t_x = len(src_ids)
    if rule.b == 0:
        cand = decode_parallel(src_ids, predict_length(t_x, rule), nat_params, nat_cfg)
        return cand, [cand]
    if teacher_params is None:
        raise ContractError("rescoring more than one candidate needs a teacher")
    lengths = length_candidates(t_x, rule)
    cands = decode_parallel_lengths(src_ids, lengths, nat_params, nat_cfg)
    ranked = rescore(cands, src_ids, teacher_params, teacher_cfg or nat_cfg, normalize)
    # gather back in candidate-length order
    ranked_by_len = sorted(ranked, key=lambda c: c.length)
    return ranked[0], ranked_by_len


# ----------------------------------------------------------------------------
# autoregressive decoding
# ----------------------------------------------------------------------------


def _step_logprobs(teacher, cfg, enc_out, src_valid, rows, prefixes):
    dec_in = np.asarray([[BOS] + list(p) for p in prefixes], dtype=np.int64)
    enc = Tensor(enc_out[rows])
    sv = None if src_valid is None else src_valid[rows]
    logits = decode_at(dec_in, enc, teacher, cfg, src_valid=sv)
    return T.log_softmax(logits[:, -1, :], axis=-1).data


def greedy_decode(src_ids, at_params: ModelParams, cfg: ModelConfig, max_len: int) -> list[int]:
    src = np.asarray(src_ids, dtype=np.int64)[None, :]
    out: list[int] = []
    with T.no_grad():
        enc_out = encode(src, at_params, cfg).data
        for _ in range(max_len):
            lp = _step_logprobs(at_params, cfg, enc_out, None, np.zeros(1, dtype=np.int64), [out])[0]
            lp[[PAD, BOS]] = -np.inf
            nxt = int(lp.argmax())
            if nxt == EOS:
                break
            out.append(nxt)
    return out


def default_max_len(t_x: int, cfg: ModelConfig) -> int:
    return min(cfg.max_len - 1, 2 * t_x + 10)


def beam_search_batch(
    sources: Sequence[Sequence[int]],
    at_params: ModelParams,
    cfg: ModelConfig,
    beam: int = 4,
    max_len: int | None = None,
    chunk: int = 128,
) -> list[list[int]]:
    """Beam search over many sentences at once (decoder steps are batched)."""
    if beam < 1:
        raise ContractError("beam must be >= 1")
    results: list[list[int]] = []
    for start in range(0, len(sources), chunk):
        results.extend(_beam_chunk(sources[start:start + chunk], at_params, cfg, beam, max_len))
    return results


def _beam_chunk(sources, teacher, cfg, k, max_len):
    src, src_valid = pad_sequences(sources)
    limits = [max_len if max_len is not None else default_max_len(len(s), cfg) for s in sources]
    with T.no_grad():
        enc_out = encode(src, teacher, cfg, src_valid=src_valid).data
    n = len(sources)
    alive = [[((), 0.0)] for _ in range(n)]
    finished: list[list[tuple[tuple[int, ...], float, int]]] = [[] for _ in range(n)]
    active = set(range(n))
    step = 0
    while active:
        order = sorted(active)
        rows, prefixes, owner = [], [], []
        for s in order:
            for tokens, _ in alive[s]:
                rows.append(s)
                prefixes.append(tokens)
                owner.append(s)
        with T.no_grad():
            lp = _step_logprobs(teacher, cfg, enc_out, src_valid, np.asarray(rows), prefixes)
        lp[:, [PAD, BOS]] = -np.inf
        offset = 0
        for s in order:
            hyps = alive[s]
            block = lp[offset:offset + len(hyps)]
            offset += len(hyps)
            base = np.asarray([score for _, score in hyps])[:, None]
            total = (base + block).reshape(-1)
            vocab = block.shape[1]
            lex_rank = np.empty(len(hyps), dtype=np.int64)
            lex_rank[sorted(range(len(hyps)), key=lambda i: hyps[i][0])] = np.arange(len(hyps))
            flat = np.arange(total.size)
            order_idx = np.lexsort((flat % vocab, lex_rank[flat // vocab], -total))[: 2 * k]
            new_alive = []
            for rank, idx in enumerate(order_idx):
                score = float(total[idx])
                if not np.isfinite(score):
                    break
                h, v = divmod(int(idx), vocab)
                tokens = hyps[h][0]
                if v == EOS:
                    if rank < k:
                        finished[s].append((tokens, score, len(tokens) + 1))
                elif len(new_alive) < k:
                    new_alive.append((tokens + (v,), score))
            if step + 1 >= limits[s]:
                finished[s].extend((t, sc, len(t)) for t, sc in new_alive)
                new_alive = []
            alive[s] = new_alive
            if len(finished[s]) >= k or not new_alive:
                active.discard(s)
        step += 1
    out = []
    for s in range(n):
        if not finished[s]:
            out.append([])
            continue
        best = min(finished[s], key=lambda f: (-(f[1] / max(f[2], 1)), f[0]))
        out.append(list(best[0]))
    return out


def beam_search(src_ids, at_params: ModelParams, cfg: ModelConfig, beam: int = 4, max_len: int | None = None) -> list[int]:
    """Length-normalised beam search; stops at EOS or ``max_len`` tokens."""
    return beam_search_batch([list(src_ids)], at_params, cfg, beam, max_len)[0]


# ----------------------------------------------------------------------------
# postprocess and latency
# ----------------------------------------------------------------------------


def dedup_postprocess(tokens: Sequence) -> tuple[list, int]:
    """Collapse each run of identical adjacent tokens; count removed tokens."""
    out: list = []
    for tok in tokens:
        if not out or out[-1] != tok:
            out.append(tok)
    return out, len(tokens) - len(out)


@dataclass
class LatencyReport:
    mean_ms: float
    std_ms: float
    n: int


def measure_latency(
    test_corpus: Sequence,
    decode_fn: Callable[[object], object],
    warmup: int = 3,
) -> LatencyReport:
    """Sequential per-sentence wall-clock time, batch size 1.

    The first ``warmup`` sentences are decoded once beforehand and excluded.
    """
    items = list(test_corpus)
    if not items:
        raise ContractError("latency needs a non-empty corpus")
    for item in items[:warmup]:
        decode_fn(item)
    times = []
    for item in items:
        t0 = time.perf_counter()
        decode_fn(item)
        times.append((time.perf_counter() - t0) * 1000.0)
    std = statistics.pstdev(times) if len(times) > 1 else 0.0
    return LatencyReport(statistics.fmean(times), std, len(times))
