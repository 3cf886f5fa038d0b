"""Teacher training, sequence-level distillation and joint NAT training."""

from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .config import TrainConfig, format_config
from .data import BOS, EOS, ParallelCorpus, SentencePair, pad_sequences, split_dev
from .inference import beam_search_batch
from .losses import LossBreakdown, LossMode, LossWeights, cross_entropy, joint_loss
from .optim import Adam
from .transformer import ModelConfig, ModelParams, decode_at, encode, init_params

log = logging.getLogger(__name__)

LogFn = Callable[[str], None]


class TrainingError(RuntimeError):
    pass


def _streams(seed: int):
    """Independent generators for init, batch order and dropout."""
    return (np.random.default_rng([seed, 1]), np.random.default_rng([seed, 2]), np.random.default_rng([seed, 3]))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for i in range(0, n, batch_size):
            yield order[i:i + batch_size]


def teacher_loss(params: ModelParams, cfg: ModelConfig, srcs, tgts, rng=None) -> T.Tensor:
    """Teacher-forced cross-entropy; targets are followed by EOS."""
    src, src_valid = pad_sequences(srcs)
    dec_in, tgt_valid = pad_sequences([[BOS] + list(t) for t in tgts])
    out, _ = pad_sequences([list(t) + [EOS] for t in tgts])
    enc = encode(src, params, cfg, src_valid=src_valid, rng=rng)
    logits = decode_at(dec_in, enc, params, cfg, tgt_valid=tgt_valid, src_valid=src_valid, rng=rng)
    return cross_entropy(logits, out, tgt_valid)


def _dev_value(fn, pairs: list[SentencePair], batch_size: int) -> float:
    total, n = 0.0, 0
    with T.no_grad():
        for i in range(0, len(pairs), batch_size):
            chunk = pairs[i:i + batch_size]
            total += fn([p.src for p in chunk], [p.tgt for p in chunk]) * len(chunk)
            n += len(chunk)
    return total / max(n, 1)


def teacher_accuracy(params: ModelParams, cfg: ModelConfig, corpus: ParallelCorpus, batch_size: int = 128) -> float:
    """Teacher-forced next-token accuracy (EOS position included)."""
    correct = total = 0
    pairs = corpus.pairs
    with T.no_grad():
        for i in range(0, len(pairs), batch_size):
            chunk = pairs[i:i + batch_size]
            src, src_valid = pad_sequences([p.src for p in chunk])
            dec_in, valid = pad_sequences([[BOS] + p.tgt for p in chunk])
            out, _ = pad_sequences([p.tgt + [EOS] for p in chunk])
            enc = encode(src, params, cfg, src_valid=src_valid)
            pred = decode_at(dec_in, enc, params, cfg, tgt_valid=valid, src_valid=src_valid).data.argmax(-1)
            correct += int(((pred == out) & valid).sum())
            total += int(valid.sum())
    return correct / max(total, 1)


def _check_finite(value: float, step: int) -> None:
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss ({value}) at step {step}")


def train_teacher(
    corpus: ParallelCorpus,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    dev: ParallelCorpus | None = None,
    checkpoint_path=None,
    on_log: LogFn | None = None,
) -> ModelParams:
    """Train the autoregressive teacher; returns the best-by-dev-loss parameters."""
    if not len(corpus):
        raise TrainingError("empty training corpus")
    if dev is None:
        corpus, dev = split_dev(corpus, train_cfg.dev_frac, train_cfg.seed)
    init_rng, batch_rng, drop_rng = _streams(train_cfg.seed)
    params = init_params("at", model_cfg, init_rng)
    if train_cfg.max_steps == 0:
        return params
    opt = Adam(
        params.unique_tensors(), train_cfg.base_lr, train_cfg.warmup_steps, model_cfg.d_model,
        (train_cfg.adam_beta1, train_cfg.adam_beta2), train_cfg.adam_eps,
    )
    pairs = corpus.pairs
    batches = _batches(len(pairs), train_cfg.batch_size, batch_rng)
    best_loss, best = math.inf, params.copy_data()
    dev_fn = lambda s, t: teacher_loss(params, model_cfg, s, t).item()  # noqa: E731
    for step in range(1, train_cfg.max_steps + 1):
        idx = next(batches)
        loss = teacher_loss(params, model_cfg, [pairs[i].src for i in idx], [pairs[i].tgt for i in idx], drop_rng)
        value = loss.item()
        _check_finite(value, step)
        opt.zero_grad()
        T.backward(loss)
        opt.step()
        if on_log:
            on_log(f"step={step} l_ce={value:.9g} total={value:.9g}")
        if step % train_cfg.eval_interval == 0 or step == train_cfg.max_steps:
            dev_loss = _dev_value(dev_fn, dev.pairs, 128)
            if on_log:
                on_log(f"eval step={step} dev_loss={dev_loss:.9g}")
            if dev_loss < best_loss:
                best_loss, best = dev_loss, params.copy_data()
            if checkpoint_path is not None:
                save_checkpoint(params, checkpoint_path)
    params.load_data(best)
    if checkpoint_path is not None:
        save_checkpoint(params, checkpoint_path)
    return params


def distill(
    teacher: ModelParams,
    teacher_cfg: ModelConfig,
    corpus: ParallelCorpus,
    beam: int = 4,
    max_len: int | None = None,
) -> ParallelCorpus:
    """Replace every target with the teacher's beam-search output."""
    outputs = beam_search_batch(corpus.sources, teacher, teacher_cfg, beam, max_len)
    pairs = []
    for n, (pair, hyp) in enumerate(zip(corpus.pairs, outputs)):
        if not hyp:
            log.warning("distill: empty beam output for pair %d, dropped", n)
            continue
        pairs.append(SentencePair(list(pair.src), hyp))
    return ParallelCorpus(pairs, "distilled")


def train_nat(
    distilled: ParallelCorpus,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    weights: LossWeights | None = None,
    mode: LossMode | None = None,
    dev: ParallelCorpus | None = None,
    allow_raw: bool = False,
    checkpoint_paths: tuple | None = None,
    on_log: LogFn | None = None,
) -> tuple[ModelParams, ModelParams]:
    """Jointly train the NAT model and its backward reconstructor.

    One Adam instance covers both parameter sets; the shared embedding table
    is stepped once. Returns the parameters with the lowest dev ``l_ce``.
    """
    if distilled.provenance != "distilled" and not allow_raw:
        raise TrainingError("NAT training expects a distilled corpus (pass allow_raw to override)")
    if not len(distilled):
        raise TrainingError("empty training corpus")
    weights = weights or LossWeights(train_cfg.alpha, train_cfg.beta)
    if mode is None:
        mode = LossMode.from_name(train_cfg.mode)
    if train_cfg.sever_embedding:
        mode = LossMode(mode.sim, mode.rec, mode.universal, True)
    if dev is None:
        distilled, dev = split_dev(distilled, train_cfg.dev_frac, train_cfg.seed)
    init_rng, batch_rng, drop_rng = _streams(train_cfg.seed)
    nat = init_params("nat", model_cfg, init_rng)
    bwd = init_params("backward", model_cfg, init_rng, shared_embedding=nat.src_embed)
    if train_cfg.max_steps == 0:
        return nat, bwd
    opt = Adam(
        nat.unique_tensors() + bwd.unique_tensors(), train_cfg.base_lr, train_cfg.warmup_steps,
        model_cfg.d_model, (train_cfg.adam_beta1, train_cfg.adam_beta2), train_cfg.adam_eps,
    )
    pairs = distilled.pairs
    batches = _batches(len(pairs), train_cfg.batch_size, batch_rng)
    best_loss, best = math.inf, (nat.copy_data(), bwd.copy_data())
    ce_only = LossMode()

    def dev_fn(s, t):
        return joint_loss(s, t, nat, bwd, model_cfg, weights, ce_only).l_ce

    for step in range(1, train_cfg.max_steps + 1):
        idx = next(batches)
        parts: LossBreakdown = joint_loss(
            [pairs[i].src for i in idx], [pairs[i].tgt for i in idx],
            nat, bwd, model_cfg, weights, mode, drop_rng,
        )
        _check_finite(parts.total, step)
        opt.zero_grad()
        T.backward(parts.loss)
        opt.step()
        if on_log:
            on_log(parts.log_line(step))
        if step % train_cfg.eval_interval == 0 or step == train_cfg.max_steps:
            dev_loss = _dev_value(dev_fn, dev.pairs, 128)
            if on_log:
                on_log(f"eval step={step} dev_l_ce={dev_loss:.9g}")
            if dev_loss < best_loss:
                best_loss, best = dev_loss, (nat.copy_data(), bwd.copy_data())
            if checkpoint_paths is not None:
                save_checkpoint(nat, checkpoint_paths[0])
                save_checkpoint(bwd, checkpoint_paths[1])
    nat.load_data(best[0])
    bwd.load_data(best[1])
    if checkpoint_paths is not None:
        save_checkpoint(nat, checkpoint_paths[0])
        save_checkpoint(bwd, checkpoint_paths[1])
    return nat, bwd


def write_model_config(path, cfg: ModelConfig) -> Path:
    side = Path(f"{path}.cfg")
    side.write_text(format_config(cfg), encoding="utf-8")
    return side
