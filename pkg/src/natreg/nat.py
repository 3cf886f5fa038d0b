"""Target-length rule, uniform decoder-input mapping and the NAT forward pass."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ContractError, Tensor
from .transformer import ModelConfig, ModelParams, decode_nat, encode

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LengthRule:
    """``T_y = T_x + delta_t``, widened to ``2b + 1`` candidates at inference."""

    delta_t: int = 0
    b: int = 0

    def __post_init__(self):
        if self.b < 0:
            raise ContractError(f"half-window b must be non-negative, got {self.b}")


def predict_length(t_x: int, rule: LengthRule) -> int:
    if t_x < 1:
        raise ContractError("source length must be positive")
    return max(1, t_x + rule.delta_t)


def length_candidates(t_x: int, rule: LengthRule) -> list[int]:
    """Ascending, duplicate-free candidate lengths; lengths below 1 are clamped."""
    center = t_x + rule.delta_t
    raw = range(center - rule.b, center + rule.b + 1)
    out = sorted({max(1, n) for n in raw})
    if len(out) < 2 * rule.b + 1:
        log.debug("length window clamped at 1: %d of %d candidates kept", len(out), 2 * rule.b + 1)
    return out


def uniform_map_indices(t_x: int, t_y: int) -> np.ndarray:
    """1-based source index for each of ``t_y`` decoder positions.

    ``i = round(t_x / t_y * t)`` with halves rounded away from zero, clamped
    to ``[1, t_x]``. Integer arithmetic keeps the rounding exact.
    """
    if t_x < 1 or t_y < 1:
        raise ContractError(f"lengths must be positive, got t_x={t_x}, t_y={t_y}")
    t = np.arange(1, t_y + 1, dtype=np.int64)
    # floor(p/q + 1/2) for p = t_x * t, q = t_y, both positive
    idx = (2 * t_x * t + t_y) // (2 * t_y)
    return np.clip(idx, 1, t_x)


def uniform_map_inputs(src_ids, t_y: int, embedding_table: Tensor) -> Tensor:
    """Decoder inputs ``[t_y, d]``: row ``t`` is the embedding of the mapped source token."""
    src = np.asarray(src_ids, dtype=np.int64)
    idx = uniform_map_indices(len(src), t_y) - 1
    return T.embedding(embedding_table, src[idx])


def uniform_map_batch(
    src: np.ndarray,
    src_lens: np.ndarray,
    tgt_lens: np.ndarray,
    embedding_table: Tensor,
) -> tuple[Tensor, np.ndarray]:
    """Batched mapping. Returns inputs ``[B, max t_y, d]`` and the target validity mask."""
    b = len(src_lens)
    max_ty = int(max(tgt_lens))
    ids = np.zeros((b, max_ty), dtype=np.int64)
    valid = np.zeros((b, max_ty), dtype=bool)
    for row, (tx, ty) in enumerate(zip(src_lens, tgt_lens)):
        ids[row, :ty] = src[row, uniform_map_indices(int(tx), int(ty)) - 1]
        valid[row, :ty] = True
    return T.embedding(embedding_table, ids), valid


def nat_forward(
    src_ids,
    t_y: int,
    params: ModelParams,
    cfg: ModelConfig,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """encode -> uniform mapping -> non-causal decode for one sentence."""
    src = np.asarray(src_ids, dtype=np.int64)
    enc_out = encode(src, params, cfg, rng=rng)
    dec_in = uniform_map_inputs(src, t_y, params.src_embed)
    return decode_nat(dec_in, enc_out, params, cfg, rng=rng)


def nat_forward_batch(
    src: np.ndarray,
    src_valid: np.ndarray,
    tgt_lens,
    params: ModelParams,
    cfg: ModelConfig,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor, np.ndarray]:
    """Padded-batch NAT forward. Returns ``(hidden, logits, tgt_valid)``."""
    src_lens = src_valid.sum(axis=1)
    enc_out = encode(src, params, cfg, src_valid=src_valid, rng=rng)
    dec_in, tgt_valid = uniform_map_batch(src, src_lens, np.asarray(tgt_lens), params.src_embed)
    hidden, logits = decode_nat(dec_in, enc_out, params, cfg, tgt_valid=tgt_valid, src_valid=src_valid, rng=rng)
    return hidden, logits, tgt_valid
