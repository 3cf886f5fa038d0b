"""Transformer blocks and the three model assemblies.

* ``at``       autoregressive teacher: encoder + causal decoder.
* ``nat``      non-autoregressive model: encoder + decoder without causal
               mask and with a positional-attention sub-layer in every layer.
* ``backward`` reconstructor used by the reconstruction regulariser; its
               encoder consumes NAT hidden states instead of token embeddings
               and its decoder embedding table is shared with the NAT model.

All forward functions are batched: token ids are ``[B, T]`` integer arrays
with a boolean validity mask of the same shape (``None`` means no padding).
Sub-layers are post-norm (residual, then layer norm).
"""

from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import ContractError, Tensor

NEG_INF = -1e9


class EmptySequenceError(ContractError):
    pass


class LengthError(ContractError):
    pass


class ConfigurationError(ValueError):
    pass


class AttentionMaskKind(enum.Enum):
    CAUSAL = "causal"
    NONE = "none"
    PADDING_ONLY = "padding_only"


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ff: int = 128
    dropout: float = 0.1
    max_len: int = 32
    src_vocab_size: int = 40
    tgt_vocab_size: int = 40
    share_src_tgt_vocab: bool = True
    learned_pos: bool = False
    activation: str = "relu"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigurationError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must lie in [0, 1), got {self.dropout}")
        if min(self.src_vocab_size, self.tgt_vocab_size, self.max_len, self.d_ff) < 1:
            raise ConfigurationError("vocabulary sizes, max_len and d_ff must be positive")
        if self.share_src_tgt_vocab and self.src_vocab_size != self.tgt_vocab_size:
            raise ConfigurationError("shared vocabulary needs src_vocab_size == tgt_vocab_size")
        if self.activation not in ("relu", "gelu"):
            raise ConfigurationError(f"unknown activation {self.activation!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @classmethod
    def small(cls, **kw) -> "ModelConfig":
        """IWSLT14-style small setting: 5+5 layers, width 256, 4 heads."""
        base = dict(d_model=256, n_heads=4, n_enc_layers=5, n_dec_layers=5, d_ff=1024, max_len=256)
        base.update(kw)
        return cls(**base)

    @classmethod
    def base(cls, **kw) -> "ModelConfig":
        base = dict(d_model=512, n_heads=8, n_enc_layers=6, n_dec_layers=6, d_ff=2048, max_len=256)
        base.update(kw)
        return cls(**base)

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)


class ModelParams(dict):
    """Named tensors of one model. Shared tables appear as the same object."""

    def unique_tensors(self) -> list[Tensor]:
        seen, out = set(), []
        for t in self.values():
            if id(t) not in seen:
                seen.add(id(t))
                out.append(t)
        return out

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.unique_tensors())

    def copy_data(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.items()}

    def load_data(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            self[k].data[...] = v

    @property
    def src_embed(self) -> Tensor:
        return self["embed.src"]

    @property
    def tgt_embed(self) -> Tensor:
        return self["embed.tgt"] if "embed.tgt" in self else self["embed.src"]


# ----------------------------------------------------------------------------
# initialisation
# ----------------------------------------------------------------------------


def _uniform(rng, fan_in, shape, name):
    bound = 1.0 / math.sqrt(fan_in)
    data = rng.uniform(-bound, bound, size=shape).astype(T.default_dtype())
    return Tensor(data, requires_grad=True, name=name)


def _zeros(shape, name):
    return Tensor(np.zeros(shape, dtype=T.default_dtype()), requires_grad=True, name=name)


def _ones(shape, name):
    return Tensor(np.ones(shape, dtype=T.default_dtype()), requires_grad=True, name=name)


def _add_attention(p, rng, d, prefix):
    for proj in ("q", "k", "v", "o"):
        p[f"{prefix}.{proj}.w"] = _uniform(rng, d, (d, d), f"{prefix}.{proj}.w")
        p[f"{prefix}.{proj}.b"] = _zeros((d,), f"{prefix}.{proj}.b")


def _add_ln(p, d, prefix):
    p[f"{prefix}.g"] = _ones((d,), f"{prefix}.g")
    p[f"{prefix}.b"] = _zeros((d,), f"{prefix}.b")


def _add_ffn(p, rng, d, d_ff, prefix):
    p[f"{prefix}.w1"] = _uniform(rng, d, (d, d_ff), f"{prefix}.w1")
    p[f"{prefix}.b1"] = _zeros((d_ff,), f"{prefix}.b1")
    p[f"{prefix}.w2"] = _uniform(rng, d_ff, (d_ff, d), f"{prefix}.w2")
    p[f"{prefix}.b2"] = _zeros((d,), f"{prefix}.b2")


MODEL_KINDS = ("at", "nat", "backward")


def init_params(
    kind: str,
    cfg: ModelConfig,
    rng: np.random.Generator,
    shared_embedding: Tensor | None = None,
) -> ModelParams:
    """Initialise a model of ``kind``.

    For ``backward`` the decoder embedding table is ``shared_embedding``
    (normally the NAT model's source table) when given.
    """
    if kind not in MODEL_KINDS:
        raise ConfigurationError(f"unknown model kind {kind!r}")
    d = cfg.d_model
    p = ModelParams()
    if kind == "backward":
        # reconstructs source tokens: its decoder vocabulary is the source one
        if shared_embedding is not None:
            if shared_embedding.shape != (cfg.src_vocab_size, d):
                raise ConfigurationError(
                    f"shared embedding {shared_embedding.shape} does not match ({cfg.src_vocab_size}, {d})"
                )
            p["embed.tgt"] = shared_embedding
        else:
            p["embed.tgt"] = _uniform(rng, d, (cfg.src_vocab_size, d), "embed.tgt")
    else:
        p["embed.src"] = _uniform(rng, d, (cfg.src_vocab_size, d), "embed.src")
        if not cfg.share_src_tgt_vocab:
            p["embed.tgt"] = _uniform(rng, d, (cfg.tgt_vocab_size, d), "embed.tgt")
    if cfg.learned_pos:
        p["pos"] = _uniform(rng, d, (cfg.max_len, d), "pos")
    for i in range(cfg.n_enc_layers):
        _add_attention(p, rng, d, f"enc.{i}.self")
        _add_ln(p, d, f"enc.{i}.ln1")
        _add_ffn(p, rng, d, cfg.d_ff, f"enc.{i}.ffn")
        _add_ln(p, d, f"enc.{i}.ln2")
    for i in range(cfg.n_dec_layers):
        _add_attention(p, rng, d, f"dec.{i}.self")
        _add_ln(p, d, f"dec.{i}.ln_self")
        if kind == "nat":
            _add_attention(p, rng, d, f"dec.{i}.pos")
            _add_ln(p, d, f"dec.{i}.ln_pos")
        _add_attention(p, rng, d, f"dec.{i}.cross")
        _add_ln(p, d, f"dec.{i}.ln_cross")
        _add_ffn(p, rng, d, cfg.d_ff, f"dec.{i}.ffn")
        _add_ln(p, d, f"dec.{i}.ln_ffn")
    v_out = cfg.src_vocab_size if kind == "backward" else cfg.tgt_vocab_size
    p["out.w"] = _uniform(rng, d, (d, v_out), "out.w")
    p["out.b"] = _zeros((v_out,), "out.b")
    return p


# ----------------------------------------------------------------------------
# positional encodings and masks
# ----------------------------------------------------------------------------


@lru_cache(maxsize=16)
def _sinusoid(max_len: int, d: int, dtype) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    pe = pe.astype(dtype)
    pe.setflags(write=False)
    return pe


def positional_table(params: ModelParams, cfg: ModelConfig, length: int) -> Tensor:
    if length > cfg.max_len:
        raise LengthError(f"sequence length {length} exceeds max_len={cfg.max_len}")
    if cfg.learned_pos:
        return params["pos"][:length]
    dtype = params["out.w"].dtype.type
    return Tensor(_sinusoid(cfg.max_len, cfg.d_model, dtype)[:length])


def build_mask(
    kind: AttentionMaskKind,
    tq: int,
    tk: int,
    key_valid: np.ndarray | None = None,
    dtype=np.float32,
) -> np.ndarray | None:
    """Additive attention mask broadcastable to ``[B, H, Tq, Tk]``."""
    mask = None
    if kind is AttentionMaskKind.CAUSAL:
        if tq != tk:
            raise ContractError(f"causal mask needs a square pattern, got {tq}x{tk}")
        mask = np.triu(np.full((tq, tk), NEG_INF, dtype=dtype), k=1)[None, None]
    if key_valid is not None and kind is not AttentionMaskKind.NONE:
        pad = np.where(key_valid, 0.0, NEG_INF).astype(dtype)[:, None, None, :]
        mask = pad if mask is None else mask + pad
    return mask


# ----------------------------------------------------------------------------
# building blocks
# ----------------------------------------------------------------------------


def linear(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    return x @ params[f"{prefix}.w"] + params[f"{prefix}.b"]


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def multi_head_attention(
    query: Tensor,
    key: Tensor,
    value: Tensor,
    mask: AttentionMaskKind,
    params: ModelParams,
    prefix: str,
    cfg: ModelConfig,
    key_valid: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    return_weights: bool = False,
):
    """Scaled dot-product attention over ``cfg.n_heads`` heads.

    Accepts ``[T, d]`` or ``[B, T, d]`` operands. ``query`` and ``key`` may
    lack the batch axis while ``value`` has it (positional attention).
    """
    squeeze = value.ndim == 2
    if query.ndim == 2:
        query = query.reshape(1, *query.shape)
    if key.ndim == 2:
        key = key.reshape(1, *key.shape)
    if value.ndim == 2:
        value = value.reshape(1, *value.shape)
    tq, tk = query.shape[1], key.shape[1]
    if tk == 0 or value.shape[1] == 0:
        raise EmptySequenceError("attention over an empty key sequence")
    if tq == 0:
        raise EmptySequenceError("attention with an empty query sequence")
    if query.shape[-1] != cfg.d_model:
        raise T.DimensionError(f"attention input width {query.shape[-1]} != d_model {cfg.d_model}")
    h = cfg.n_heads
    q = _split_heads(linear(query, params, f"{prefix}.q"), h)
    k = _split_heads(linear(key, params, f"{prefix}.k"), h)
    v = _split_heads(linear(value, params, f"{prefix}.v"), h)
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(cfg.head_dim))
    add = build_mask(mask, tq, tk, key_valid, dtype=scores.dtype.type)
    if add is not None:
        scores = scores + Tensor(add)
    weights = T.softmax(scores, axis=-1)
    ctx = weights @ v  # [B, H, Tq, dh]
    b = ctx.shape[0]
    ctx = ctx.transpose(0, 2, 1, 3).reshape(b, tq, cfg.d_model)
    out = linear(ctx, params, f"{prefix}.o")
    if squeeze:
        out = out.reshape(tq, cfg.d_model)
    if return_weights:
        return out, weights.data
    return out


def _sublayer(x, y, params, prefix, cfg, rng):
    y = T.dropout(y, cfg.dropout, rng)
    return T.layer_norm(x + y, params[f"{prefix}.g"], params[f"{prefix}.b"])


def feed_forward(x: Tensor, params: ModelParams, prefix: str, cfg: ModelConfig, rng=None) -> Tensor:
    act = T.relu if cfg.activation == "relu" else T.gelu
    hidden = act(x @ params[f"{prefix}.w1"] + params[f"{prefix}.b1"])
    hidden = T.dropout(hidden, cfg.dropout, rng)
    return hidden @ params[f"{prefix}.w2"] + params[f"{prefix}.b2"]


def positional_attention_layer(
    h_prev: Tensor,
    params: ModelParams,
    cfg: ModelConfig,
    layer: int = 0,
    key_valid: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    return_weights: bool = False,
):
    """Positions as query and key, previous hidden states as value; residual + norm."""
    t = h_prev.shape[-2]
    pos = positional_table(params, cfg, t)
    prefix = f"dec.{layer}.pos"
    res = multi_head_attention(
        pos, pos, h_prev, AttentionMaskKind.PADDING_ONLY, params, prefix, cfg,
        key_valid=key_valid, rng=rng, return_weights=return_weights,
    )
    out, weights = res if return_weights else (res, None)
    y = _sublayer(h_prev, out, params, f"dec.{layer}.ln_pos", cfg, rng)
    return (y, weights) if return_weights else y


# ----------------------------------------------------------------------------
# stacks
# ----------------------------------------------------------------------------


def _as_batch(ids) -> np.ndarray:
    arr = np.asarray(ids, dtype=np.int64)
    if arr.ndim == 1:
        arr = arr[None, :]
    return arr


def encoder_stack(
    x: Tensor,
    params: ModelParams,
    cfg: ModelConfig,
    src_valid: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> Tensor:
    x = T.dropout(x, cfg.dropout, rng)
    for i in range(cfg.n_enc_layers):
        a = multi_head_attention(x, x, x, AttentionMaskKind.PADDING_ONLY, params, f"enc.{i}.self", cfg, src_valid, rng)
        x = _sublayer(x, a, params, f"enc.{i}.ln1", cfg, rng)
        f = feed_forward(x, params, f"enc.{i}.ffn", cfg, rng)
        x = _sublayer(x, f, params, f"enc.{i}.ln2", cfg, rng)
    return x


def embed_tokens(table: Tensor, ids: np.ndarray, params: ModelParams, cfg: ModelConfig) -> Tensor:
    x = T.embedding(table, ids) * math.sqrt(cfg.d_model)
    return x + positional_table(params, cfg, ids.shape[1])


def encode(
    src_ids,
    params: ModelParams,
    cfg: ModelConfig,
    src_valid: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Encode ``[T]`` or ``[B, T]`` source ids; returns ``[T, d]`` or ``[B, T, d]``."""
    single = np.asarray(src_ids).ndim == 1
    ids = _as_batch(src_ids)
    if ids.shape[1] == 0:
        raise EmptySequenceError("empty source sentence")
    if ids.max() >= cfg.src_vocab_size or ids.min() < 0:
        raise ContractError("source id outside vocabulary")
    out = encoder_stack(embed_tokens(params.src_embed, ids, params, cfg), params, cfg, src_valid, rng)
    return out.reshape(out.shape[1:]) if single else out


def encode_hidden(
    hidden: Tensor,
    params: ModelParams,
    cfg: ModelConfig,
    valid: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Run the encoder on continuous inputs (the backward model's view of NAT states)."""
    if hidden.shape[-1] != cfg.d_model:
        raise ConfigurationError(f"hidden width {hidden.shape[-1]} != backward d_model {cfg.d_model}")
    if hidden.ndim == 2:
        hidden = hidden.reshape(1, *hidden.shape)
    return encoder_stack(hidden + positional_table(params, cfg, hidden.shape[1]), params, cfg, valid, rng)


def _batch_enc(enc_out: Tensor) -> Tensor:
    return enc_out.reshape(1, *enc_out.shape) if enc_out.ndim == 2 else enc_out


def decode_at(
    tgt_prefix_ids,
    enc_out: Tensor,
    params: ModelParams,
    cfg: ModelConfig,
    tgt_valid: np.ndarray | None = None,
    src_valid: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Causal decoder; returns next-token logits ``[T, V]`` (or ``[B, T, V]``)."""
    single = np.asarray(tgt_prefix_ids).ndim == 1
    ids = _as_batch(tgt_prefix_ids)
    if ids.shape[1] == 0:
        raise EmptySequenceError("empty decoder prefix")
    if ids.shape[1] > cfg.max_len:
        raise LengthError(f"prefix length {ids.shape[1]} exceeds max_len={cfg.max_len}")
    enc_out = _batch_enc(enc_out)
    x = T.dropout(embed_tokens(params.tgt_embed, ids, params, cfg), cfg.dropout, rng)
    for i in range(cfg.n_dec_layers):
        a = multi_head_attention(x, x, x, AttentionMaskKind.CAUSAL, params, f"dec.{i}.self", cfg, tgt_valid, rng)
        x = _sublayer(x, a, params, f"dec.{i}.ln_self", cfg, rng)
        c = multi_head_attention(x, enc_out, enc_out, AttentionMaskKind.PADDING_ONLY, params, f"dec.{i}.cross", cfg, src_valid, rng)
        x = _sublayer(x, c, params, f"dec.{i}.ln_cross", cfg, rng)
        f = feed_forward(x, params, f"dec.{i}.ffn", cfg, rng)
        x = _sublayer(x, f, params, f"dec.{i}.ln_ffn", cfg, rng)
    logits = linear(x, params, "out")
    return logits.reshape(logits.shape[1:]) if single else logits


def decode_nat(
    dec_inputs: Tensor,
    enc_out: Tensor,
    params: ModelParams,
    cfg: ModelConfig,
    tgt_valid: np.ndarray | None = None,
    src_valid: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """Non-causal decoder pass. Returns ``(hidden, logits)``.

    ``hidden`` is the topmost layer output; every position is computed in
    the same pass.
    """
    single = dec_inputs.ndim == 2
    if single:
        dec_inputs = dec_inputs.reshape(1, *dec_inputs.shape)
    t_y = dec_inputs.shape[1]
    if t_y == 0:
        raise EmptySequenceError("NAT decoder needs at least one position")
    enc_out = _batch_enc(enc_out)
    x = dec_inputs * math.sqrt(cfg.d_model) + positional_table(params, cfg, t_y)
    x = T.dropout(x, cfg.dropout, rng)
    for i in range(cfg.n_dec_layers):
        a = multi_head_attention(x, x, x, AttentionMaskKind.PADDING_ONLY, params, f"dec.{i}.self", cfg, tgt_valid, rng)
        x = _sublayer(x, a, params, f"dec.{i}.ln_self", cfg, rng)
        x = positional_attention_layer(x, params, cfg, i, tgt_valid, rng)
        c = multi_head_attention(x, enc_out, enc_out, AttentionMaskKind.PADDING_ONLY, params, f"dec.{i}.cross", cfg, src_valid, rng)
        x = _sublayer(x, c, params, f"dec.{i}.ln_cross", cfg, rng)
        f = feed_forward(x, params, f"dec.{i}.ffn", cfg, rng)
        x = _sublayer(x, f, params, f"dec.{i}.ln_ffn", cfg, rng)
    logits = linear(x, params, "out")
    if single:
        return x.reshape(x.shape[1:]), logits.reshape(logits.shape[1:])
    return x, logits
