"""Desk-scale ablation sweep on a synthetic cipher task.

One teacher is trained and used for distillation; every arm then trains a
NAT model on the distilled corpus with the same step budget and is scored on
the dev split with teacher-rescored noisy parallel decoding.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .config import TrainConfig
from .data import ParallelCorpus, gen_synthetic_corpus, split_dev
from .inference import dedup_postprocess, translate_npd
from .losses import LossMode
from .metrics import EvalReport, evaluate, task_map
from .nat import LengthRule
from .train import distill, teacher_accuracy, train_nat, train_teacher
from .transformer import ModelConfig, ModelParams

log = logging.getLogger(__name__)

TRAINED_ARMS = ("base", "universal", "sim", "rec", "both")
REPORTED_ARMS = ("base", "base+dedup", "universal", "sim", "rec", "both")


def desk_model(vocab_size: int = 40, **kw) -> ModelConfig:
    base = dict(
        d_model=32, n_heads=4, n_enc_layers=2, n_dec_layers=2, d_ff=64, dropout=0.0,
        max_len=32, src_vocab_size=vocab_size, tgt_vocab_size=vocab_size,
    )
    base.update(kw)
    return ModelConfig(**base)


@dataclass
class AblationSettings:
    task: str = "cipher"
    vocab_size: int = 40
    n_pairs: int = 3000
    len_range: tuple[int, int] = (3, 12)
    data_seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2)
    arms: tuple[str, ...] = TRAINED_ARMS
    teacher_model: ModelConfig = field(default_factory=desk_model)
    nat_model: ModelConfig = field(default_factory=desk_model)
    teacher_train: TrainConfig = field(
        default_factory=lambda: TrainConfig(batch_size=32, max_steps=1200, base_lr=1.0, warmup_steps=200, eval_interval=200)
    )
    nat_train: TrainConfig = field(
        default_factory=lambda: TrainConfig(batch_size=32, max_steps=600, base_lr=1.0, warmup_steps=200, eval_interval=100)
    )
    rule: LengthRule = LengthRule(0, 4)
    dev_frac: float = 0.05


@dataclass
class AblationResult:
    teacher_accuracy: float
    reports: dict[str, list[EvalReport]]
    seconds: float

    def mean(self, arm: str, key: str = "bleu") -> float:
        return float(np.mean([getattr(r, key) for r in self.reports[arm]]))

    def summary_lines(self) -> list[str]:
        lines = [f"teacher_accuracy={self.teacher_accuracy:.6f}"]
        for arm, reps in self.reports.items():
            for seed, rep in enumerate(reps):
                lines.append(
                    f"arm={arm} seed_index={seed} " + " ".join(f"{k}={v:.6f}" for k, v in asdict(rep).items() if v is not None)
                )
        return lines


def decode_dev(
    dev: ParallelCorpus,
    nat: ModelParams,
    nat_cfg: ModelConfig,
    teacher: ModelParams,
    teacher_cfg: ModelConfig,
    rule: LengthRule,
) -> list[list[int]]:
    return [translate_npd(p.src, rule, nat, nat_cfg, teacher, teacher_cfg)[0].tokens for p in dev.pairs]


def run_ablation(settings: AblationSettings | None = None, on_log=None) -> AblationResult:
    s = settings or AblationSettings()
    t0 = time.perf_counter()
    emit = on_log or (lambda line: None)
    corpus = gen_synthetic_corpus(s.task, s.vocab_size, s.n_pairs, s.len_range, s.data_seed)
    train, dev = split_dev(corpus, s.dev_frac, s.data_seed)
    teacher = train_teacher(train, s.teacher_model, s.teacher_train, dev=dev)
    acc = teacher_accuracy(teacher, s.teacher_model, dev)
    emit(f"teacher_accuracy={acc:.6f}")
    distilled = distill(teacher, s.teacher_model, train, beam=4)
    mapping = task_map(s.task, s.vocab_size, s.data_seed)
    refs = [p.tgt for p in dev.pairs]
    srcs = [p.src for p in dev.pairs]
    reports: dict[str, list[EvalReport]] = {}
    for arm in s.arms:
        for seed in s.seeds:
            cfg = s.nat_train.replace(seed=seed)
            nat, _ = train_nat(distilled, s.nat_model, cfg, mode=LossMode.from_name(arm), dev=dev)
            hyps = decode_dev(dev, nat, s.nat_model, teacher, s.teacher_model, s.rule)
            rep = evaluate(hyps, refs, srcs, mapping)
            reports.setdefault(arm, []).append(rep)
            emit(f"arm={arm} seed={seed} bleu={rep.bleu:.4f} dedup_ops={rep.per_sentence_dedup_ops:.4f}")
            if arm == "base":
                dd = [dedup_postprocess(h)[0] for h in hyps]
                reports.setdefault("base+dedup", []).append(evaluate(dd, refs, srcs, mapping))
    ordered = {a: reports[a] for a in REPORTED_ARMS if a in reports}
    return AblationResult(acc, ordered, time.perf_counter() - t0)
