"""Training objectives for the NAT model and its two auxiliary regularisers.

Every loss accepts a single sentence (``[T, ...]`` tensors) or a padded
batch (``[B, T, ...]`` plus a boolean validity mask). Per-sentence losses
are summed over positions and then averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import BOS, pad_sequences
from .nat import nat_forward_batch
from .tensor import ContractError, Tensor
from .transformer import ConfigurationError, ModelConfig, ModelParams, decode_at, encode_hidden


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 2.0
    beta: float = 0.5

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigurationError("loss weights must be non-negative")


@dataclass(frozen=True)
class LossMode:
    """Which auxiliary terms are active.

    ``universal`` replaces the target-aware similarity term with a plain
    penalty on adjacent hidden-state cosine similarity. ``sever_embedding``
    stops the reconstruction loss from reaching the shared embedding table
    through the backward decoder's token lookup.
    """

    sim: bool = False
    rec: bool = False
    universal: bool = False
    sever_embedding: bool = False

    def __post_init__(self):
        if self.sim and self.universal:
            raise ConfigurationError("sim and universal similarity terms are mutually exclusive")

    @classmethod
    def from_name(cls, name: str) -> "LossMode":
        try:
            return ARMS[name]
        except KeyError:
            raise ConfigurationError(f"unknown mode {name!r}; expected one of {sorted(ARMS)}") from None


ARMS = {
    "base": LossMode(),
    "sim": LossMode(sim=True),
    "rec": LossMode(rec=True),
    "both": LossMode(sim=True, rec=True),
    "universal": LossMode(universal=True),
}


@dataclass
class LossBreakdown:
    l_ce: float
    l_sim: float
    l_rec: float
    total: float
    loss: Tensor | None = field(default=None, repr=False, compare=False)
    terms: dict[str, Tensor] = field(default_factory=dict, repr=False, compare=False)

    def log_line(self, step: int) -> str:
        return (
            f"step={step} l_ce={self.l_ce:.9g} l_sim={self.l_sim:.9g} "
            f"l_rec={self.l_rec:.9g} total={self.total:.9g}"
        )


def _batched(x: Tensor, valid):
    if x.ndim == 2:
        x = x.reshape(1, *x.shape)
        if valid is None:
            valid = np.ones(x.shape[:2], dtype=bool)
    elif valid is None:
        valid = np.ones(x.shape[:2], dtype=bool)
    return x, np.asarray(valid, dtype=bool)


def _zero(like: Tensor) -> Tensor:
    return Tensor(np.zeros((), dtype=like.dtype))


def cross_entropy(logits: Tensor, target_ids, valid=None) -> Tensor:
    """Negative log-likelihood of ``target_ids`` under ``softmax(logits)``."""
    tgt = np.asarray(target_ids, dtype=np.int64)
    if tgt.ndim == 1:
        tgt = tgt[None, :]
    logits, valid = _batched(logits, valid)
    if logits.shape[:2] != tgt.shape:
        raise ContractError(f"logits {logits.shape[:2]} vs targets {tgt.shape}: lengths differ")
    logp = T.pick(T.log_softmax(logits, axis=-1), np.where(valid, tgt, 0))
    mask = Tensor(valid.astype(logits.dtype))
    return (logp * mask).sum() * (-1.0 / tgt.shape[0])


def similarity_terms(hidden: Tensor, target_ids, embedding_table: Tensor) -> Tensor:
    """Per-pair values ``1 + cos(h_t, h_t+1) * (1 - cos(y_t, y_t+1))`` for ``[T, d]`` or ``[B, T, d]``.

    Target embeddings enter as constants.
    """
    tgt = np.asarray(target_ids, dtype=np.int64)
    emb = embedding_table.data[tgt]
    s_y = T.cosine_sim(Tensor(emb[..., :-1, :]), Tensor(emb[..., 1:, :])).data
    s_h = T.cosine_sim(hidden[..., :-1, :], hidden[..., 1:, :])
    return 1.0 + s_h * Tensor(1.0 - s_y)


def similarity_loss(hidden: Tensor, target_ids, embedding_table: Tensor, valid=None) -> Tensor:
    tgt = np.asarray(target_ids, dtype=np.int64)
    if tgt.ndim == 1:
        tgt = tgt[None, :]
    hidden, valid = _batched(hidden, valid)
    if hidden.shape[1] < 2:
        return _zero(hidden)
    terms = similarity_terms(hidden, np.where(valid, tgt, 0), embedding_table)
    pair_valid = (valid[:, 1:] & valid[:, :-1]).astype(hidden.dtype)
    return (terms * Tensor(pair_valid)).sum() * (1.0 / tgt.shape[0])


def universal_similarity_penalty(hidden: Tensor, valid=None) -> Tensor:
    """Sum of ``cos(h_t, h_t+1)`` over adjacent pairs, regardless of targets."""
    hidden, valid = _batched(hidden, valid)
    if hidden.shape[1] < 2:
        return _zero(hidden)
    s_h = T.cosine_sim(hidden[:, :-1, :], hidden[:, 1:, :])
    pair_valid = (valid[:, 1:] & valid[:, :-1]).astype(hidden.dtype)
    return (s_h * Tensor(pair_valid)).sum() * (1.0 / hidden.shape[0])


def reconstruction_loss(
    hidden: Tensor,
    src_ids,
    backward_params: ModelParams,
    config: ModelConfig,
    hidden_valid=None,
    src_valid=None,
    rng: np.random.Generator | None = None,
    sever_embedding: bool = False,
) -> Tensor:
    """``-sum_t log P_back(x_t | h, x_<t)``: the backward model reads ``h`` and re-emits the source."""
    if hidden.shape[-1] != config.d_model:
        raise ConfigurationError(
            f"hidden width {hidden.shape[-1]} does not match backward d_model {config.d_model}"
        )
    src = np.asarray(src_ids, dtype=np.int64)
    if src.ndim == 1:
        src = src[None, :]
    if src_valid is None:
        src_valid = np.ones(src.shape, dtype=bool)
    hidden, hidden_valid = _batched(hidden, hidden_valid)
    params = backward_params
    if sever_embedding:
        params = ModelParams(backward_params)
        params["embed.tgt"] = backward_params["embed.tgt"].detach()
    dec_in = np.concatenate([np.full((src.shape[0], 1), BOS, dtype=np.int64), src[:, :-1]], axis=1)
    dec_in = np.where(src_valid, dec_in, 0)
    enc_out = encode_hidden(hidden, params, config, valid=hidden_valid, rng=rng)
    logits = decode_at(dec_in, enc_out, params, config, tgt_valid=src_valid, src_valid=hidden_valid, rng=rng)
    return cross_entropy(logits, src, src_valid)


def joint_loss(
    src_batch,
    tgt_batch,
    nat_params: ModelParams,
    backward_params: ModelParams | None,
    config: ModelConfig,
    weights: LossWeights = LossWeights(),
    mode: LossMode = LossMode(sim=True, rec=True),
    rng: np.random.Generator | None = None,
    backward_config: ModelConfig | None = None,
    target_embedding: Tensor | None = None,
) -> LossBreakdown:
    """``L = L_ce + alpha * L_sim + beta * L_rec`` on a batch of id sequences.

    Disabled terms are reported as 0 and left out of the total.
    ``target_embedding`` overrides the table used for target-token
    similarities (the finite-difference oracle passes a frozen copy).
    """
    if src_batch and np.ndim(src_batch[0]) == 0:
        src_batch, tgt_batch = [src_batch], [tgt_batch]
    src, src_valid = pad_sequences(src_batch)
    tgt, tgt_valid = pad_sequences(tgt_batch)
    tgt_lens = tgt_valid.sum(axis=1)
    hidden, logits, valid = nat_forward_batch(src, src_valid, tgt_lens, nat_params, config, rng)
    l_ce = cross_entropy(logits, tgt, valid)
    total = l_ce
    l_sim = l_rec = None
    if mode.sim:
        table = nat_params.tgt_embed if target_embedding is None else target_embedding
        l_sim = similarity_loss(hidden, tgt, table, valid)
    elif mode.universal:
        l_sim = universal_similarity_penalty(hidden, valid)
    if l_sim is not None:
        total = total + l_sim * weights.alpha
    if mode.rec:
        if backward_params is None:
            raise ConfigurationError("reconstruction term needs backward model parameters")
        l_rec = reconstruction_loss(
            hidden, src, backward_params, backward_config or config,
            hidden_valid=valid, src_valid=src_valid, rng=rng, sever_embedding=mode.sever_embedding,
        )
        total = total + l_rec * weights.beta
    return LossBreakdown(
        l_ce=l_ce.item(),
        l_sim=0.0 if l_sim is None else l_sim.item(),
        l_rec=0.0 if l_rec is None else l_rec.item(),
        total=total.item(),
        loss=total,
        terms={k: v for k, v in (("l_ce", l_ce), ("l_sim", l_sim), ("l_rec", l_rec)) if v is not None},
    )
