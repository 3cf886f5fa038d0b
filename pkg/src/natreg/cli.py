"""Command-line entry point: ``natreg <subcommand> ...``.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, format_config, load_config, load_model_config
from .data import (
    TASKS, FormatError, ParallelCorpus, Vocabulary, apply_task, cipher_permutation,
    gen_synthetic_corpus, read_corpus, read_lines, tokenize, write_corpus, write_lines,
)
from .inference import beam_search, dedup_postprocess, measure_latency, translate_npd
from .losses import ARMS, LossMode, LossWeights
from .metrics import evaluate
from .nat import LengthRule
from .tensor import ContractError
from .train import TrainingError, distill, train_nat, train_teacher, write_model_config
from .transformer import ConfigurationError, ModelConfig

log = logging.getLogger("natreg")


class UsageError(Exception):
    pass


# ----------------------------------------------------------------------------
# manifests
# ----------------------------------------------------------------------------


def build_id() -> str:
    try:
        rev = subprocess.run(
            ["git", "describe", "--always", "--dirty"], cwd=Path(__file__).parent,
            capture_output=True, text=True, timeout=5,
        )
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}-{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


class RunManifest:
    """JSON record next to a stage's main output, written at start and at end."""

    def __init__(self, out, stage: str, args: argparse.Namespace, seed: int | None = None, **extra):
        self.path = Path(f"{out}.manifest.json")
        self.data = {
            "stage": stage,
            "build": build_id(),
            "seed": seed,
            "argv": sys.argv[1:],
            "config": {k: v for k, v in vars(args).items() if k != "func"},
            "artifacts": {},
            "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "finished": None,
            "status": "running",
            **extra,
        }
        self._write()

    def artifact(self, key: str, path) -> None:
        self.data["artifacts"][key] = str(path)

    def finish(self, **extra) -> None:
        self.data.update(extra)
        self.data["status"] = "done"
        self.data["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        self._write()

    def _write(self) -> None:
        self.path.write_text(json.dumps(self.data, indent=2, default=str) + "\n", encoding="utf-8")


def read_provenance(stem) -> str:
    path = Path(f"{stem}.manifest.json")
    if path.exists():
        return json.loads(path.read_text(encoding="utf-8")).get("provenance", "ground_truth")
    return "ground_truth"


def _vocab_path(args, stem) -> Path:
    return Path(args.vocab) if args.vocab else Path(f"{stem}.vocab")


def _load_model(path):
    params = load_checkpoint(path)
    cfg_path = Path(f"{path}.cfg")
    if not cfg_path.exists():
        raise FormatError(f"{path}: missing model config sidecar {cfg_path}")
    return params, load_model_config(cfg_path)


def _save_model(params, cfg: ModelConfig, path) -> None:
    save_checkpoint(params, path)
    write_model_config(path, cfg)


# ----------------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------------


def cmd_gen(args) -> int:
    if args.len_min < 1 or args.len_min > args.len_max:
        raise UsageError(f"need 1 <= --len-min <= --len-max, got {args.len_min}, {args.len_max}")
    if args.pairs < 0:
        raise UsageError("--pairs must be >= 0")
    if args.vocab_size <= 4:
        raise UsageError("--vocab-size must exceed the 4 reserved ids")
    man = RunManifest(args.out, "gen", args, seed=args.seed, provenance="ground_truth")
    if args.pairs == 0:
        log.warning("gen: --pairs 0, writing empty corpus files")
    corpus = gen_synthetic_corpus(args.task, args.vocab_size, args.pairs, (args.len_min, args.len_max), args.seed)
    vocab = Vocabulary.synthetic(args.vocab_size)
    src, tgt = write_corpus(args.out, corpus, vocab)
    vocab.save(f"{args.out}.vocab")
    for key, path in (("src", src), ("tgt", tgt), ("vocab", f"{args.out}.vocab")):
        man.artifact(key, path)
    man.finish()
    print(f"pairs={len(corpus)}")
    return 0


def _train_configs(args) -> tuple[ModelConfig, TrainConfig]:
    if args.config:
        model_cfg, train_cfg = load_config(args.config)
    else:
        model_cfg, train_cfg = ModelConfig(), TrainConfig()
    overrides = {k: getattr(args, k) for k in ("seed", "max_steps", "batch_size", "alpha", "beta", "mode") if getattr(args, k) is not None}
    return model_cfg, train_cfg.replace(**overrides)


def cmd_train(args) -> int:
    vocab = Vocabulary.load(_vocab_path(args, args.corpus))
    provenance = read_provenance(args.corpus)
    if args.role == "nat" and provenance != "distilled" and not args.allow_raw:
        raise UsageError("NAT training needs a distilled corpus (run `distill` first, or pass --allow-raw)")
    corpus = read_corpus(args.corpus, vocab, provenance)
    model_cfg, train_cfg = _train_configs(args)
    if model_cfg.src_vocab_size < len(vocab) or model_cfg.tgt_vocab_size < len(vocab):
        model_cfg = model_cfg.replace(src_vocab_size=len(vocab), tgt_vocab_size=len(vocab))
    man = RunManifest(args.out, "train", args, seed=train_cfg.seed, role=args.role,
                      snapshot=format_config(model_cfg, train_cfg), corpus_provenance=provenance)
    emit = lambda line: print(line, flush=True)  # noqa: E731
    if args.role == "teacher":
        params = train_teacher(corpus, model_cfg, train_cfg, on_log=emit)
        _save_model(params, model_cfg, args.out)
    else:
        mode = LossMode.from_name(train_cfg.mode)
        nat, bwd = train_nat(
            corpus, model_cfg, train_cfg, LossWeights(train_cfg.alpha, train_cfg.beta), mode,
            allow_raw=args.allow_raw, on_log=emit,
        )
        _save_model(nat, model_cfg, args.out)
        _save_model(bwd, model_cfg, f"{args.out}.backward")
        man.artifact("backward", f"{args.out}.backward")
    man.artifact("checkpoint", args.out)
    man.artifact("model_config", f"{args.out}.cfg")
    man.finish()
    return 0


def cmd_distill(args) -> int:
    if args.beam < 1:
        raise UsageError("--beam must be >= 1")
    vocab = Vocabulary.load(_vocab_path(args, args.corpus))
    teacher, cfg = _load_model(args.teacher)
    corpus = read_corpus(args.corpus, vocab, read_provenance(args.corpus))
    man = RunManifest(args.out, "distill", args, provenance="distilled", teacher=str(args.teacher))
    out = distill(teacher, cfg, corpus, beam=args.beam)
    if len(out) < len(corpus):
        log.warning("distill: dropped %d pairs with empty output", len(corpus) - len(out))
    src, tgt = write_corpus(args.out, out, vocab)
    vocab.save(f"{args.out}.vocab")
    for key, path in (("src", src), ("tgt", tgt), ("vocab", f"{args.out}.vocab")):
        man.artifact(key, path)
    man.finish(dropped=len(corpus) - len(out))
    print(f"pairs={len(out)}")
    return 0


def cmd_translate(args) -> int:
    if args.b < 0:
        raise UsageError("--b must be >= 0")
    if args.no_rescore and args.b > 0:
        raise UsageError("--no-rescore needs --b 0: several candidates need the teacher to pick one")
    if args.b > 0 and not args.teacher:
        raise UsageError("--b > 0 needs --teacher for rescoring")
    vocab = Vocabulary.load(args.vocab)
    nat, nat_cfg = _load_model(args.nat)
    teacher = teacher_cfg = None
    if args.b > 0:
        teacher, teacher_cfg = _load_model(args.teacher)
    rule = LengthRule(args.delta_t, args.b)
    lines = read_lines(args.input)
    man = RunManifest(args.out, "translate", args)
    out = []
    for n, line in enumerate(lines, 1):
        src = tokenize(line, vocab)
        if not src:
            raise FormatError(f"{args.input}: empty sentence on line {n}")
        best, cands = translate_npd(src, rule, nat, nat_cfg, teacher, teacher_cfg)
        log.info("line=%d candidates=%d", n, len(cands))
        print(f"candidates={len(cands)}", file=sys.stderr)
        tokens = dedup_postprocess(best.tokens)[0] if args.dedup else best.tokens
        out.append(vocab.decode(tokens))
    write_lines(args.out, out)
    man.artifact("translations", args.out)
    man.finish()
    return 0


def _coverage_mapping(args):
    if args.task is None:
        return None
    if args.task not in TASKS:
        raise UsageError(f"--task must be one of {TASKS}")
    if args.task != "cipher":
        return lambda src: apply_task(args.task, src)
    if not args.vocab or args.task_seed is None:
        raise UsageError("--task cipher needs --vocab and --task-seed")
    vocab = Vocabulary.load(args.vocab)
    perm = cipher_permutation(len(vocab), args.task_seed)
    return lambda src: [vocab.token(int(perm[vocab.id(t)])) for t in src]


def cmd_eval(args) -> int:
    if (args.src is None) != (args.task is None):
        raise UsageError("--src and --task go together")
    mapping = _coverage_mapping(args)
    hyps = [line.split() for line in read_lines(args.hyp)]
    refs = [line.split() for line in read_lines(args.ref)]
    if len(hyps) != len(refs):
        raise ContractError(f"{args.hyp} has {len(hyps)} lines but {args.ref} has {len(refs)}")
    srcs = None
    if args.src:
        srcs = [line.split() for line in read_lines(args.src)]
        if len(srcs) != len(hyps):
            raise ContractError(f"{args.src} has {len(srcs)} lines but {args.hyp} has {len(hyps)}")
    report = evaluate(hyps, refs, srcs, mapping, strict=args.strict)
    sys.stdout.write(report.to_json_lines() if args.json else report.to_text())
    return 0


def cmd_bench(args) -> int:
    vocab = Vocabulary.load(args.vocab)
    nat, nat_cfg = _load_model(args.nat)
    teacher, teacher_cfg = _load_model(args.teacher)
    sources = [tokenize(line, vocab) for line in read_lines(args.corpus)]
    sources = [s for s in sources if s][: args.limit]
    if not sources:
        raise ContractError(f"{args.corpus}: no sentences to benchmark")
    b0, bk = LengthRule(args.delta_t, 0), LengthRule(args.delta_t, args.b)
    rows = [
        ("nat_b0", lambda s: translate_npd(s, b0, nat, nat_cfg)),
        (f"nat_rescore{2 * args.b + 1}", lambda s: translate_npd(s, bk, nat, nat_cfg, teacher, teacher_cfg)),
        (f"at_beam{args.beam}", lambda s: beam_search(s, teacher, teacher_cfg, args.beam)),
    ]
    reports = [(name, measure_latency(sources, fn, warmup=args.warmup)) for name, fn in rows]
    at_ms = reports[-1][1].mean_ms
    for name, rep in reports:
        print(f"{name} mean_ms={rep.mean_ms:.3f} std_ms={rep.std_ms:.3f} n={rep.n} speedup={at_ms / rep.mean_ms:.2f}x")
    print(f"note: batch size 1, sequential; warm-up excluded (first {args.warmup} sentences decoded once beforehand)")
    return 0


def cmd_ablate(args) -> int:
    from .ablation import AblationSettings, run_ablation

    s = AblationSettings(seeds=tuple(args.seeds))
    if args.nat_steps is not None:
        s.nat_train = s.nat_train.replace(max_steps=args.nat_steps)
    if args.teacher_steps is not None:
        s.teacher_train = s.teacher_train.replace(max_steps=args.teacher_steps)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    man = RunManifest(out / "ablation", "ablate", args, settings=asdict(s))
    result = run_ablation(s, on_log=lambda line: print(line, flush=True))
    for arm, reps in result.reports.items():
        mean = {k: float(np.mean([getattr(r, k) for r in reps])) for k in ("bleu", "per_sentence_dedup_ops", "pct_sentences_with_repeats", "coverage_ratio")}
        path = out / f"{arm.replace('+', '_')}.report"
        path.write_text(f"arm = {arm}\nseeds = {len(reps)}\n" + "".join(f"{k} = {v:.4f}\n" for k, v in mean.items()), encoding="utf-8")
        man.artifact(arm, path)
        print(f"arm={arm} mean_bleu={mean['bleu']:.4f} mean_dedup_ops={mean['per_sentence_dedup_ops']:.4f}")
    man.finish(seconds=result.seconds, teacher_accuracy=result.teacher_accuracy)
    return 0


# ----------------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="natreg", description="Regularized non-autoregressive translation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic parallel corpus")
    g.add_argument("--task", choices=TASKS, default="cipher")
    g.add_argument("--vocab-size", type=int, default=40)
    g.add_argument("--pairs", type=int, default=3000)
    g.add_argument("--len-min", type=int, default=3)
    g.add_argument("--len-max", type=int, default=12)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output stem; writes <out>.src/.tgt/.vocab")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train the teacher or a NAT model")
    t.add_argument("--role", choices=("teacher", "nat"), required=True)
    t.add_argument("--corpus", required=True, help="corpus stem")
    t.add_argument("--vocab", help="vocabulary file (default <corpus>.vocab)")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--mode", choices=tuple(ARMS))
    t.add_argument("--alpha", type=float)
    t.add_argument("--beta", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--allow-raw", action="store_true", help="allow NAT training on non-distilled data")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("distill", help="replace targets with teacher beam-search output")
    d.add_argument("--teacher", required=True)
    d.add_argument("--corpus", required=True)
    d.add_argument("--vocab")
    d.add_argument("--beam", type=int, default=4)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_distill)

    tr = sub.add_parser("translate", help="noisy parallel decoding with a NAT model")
    tr.add_argument("--nat", required=True)
    tr.add_argument("--teacher")
    tr.add_argument("--vocab", required=True)
    tr.add_argument("--input", required=True)
    tr.add_argument("--delta-t", type=int, default=0)
    tr.add_argument("--b", type=int, default=4)
    tr.add_argument("--no-rescore", action="store_true")
    tr.add_argument("--dedup", action="store_true")
    tr.add_argument("--out", required=True)
    tr.set_defaults(func=cmd_translate)

    e = sub.add_parser("eval", help="BLEU, repetition and coverage report")
    e.add_argument("--hyp", required=True)
    e.add_argument("--ref", required=True)
    e.add_argument("--src")
    e.add_argument("--task")
    e.add_argument("--vocab")
    e.add_argument("--task-seed", type=int)
    e.add_argument("--strict", action="store_true", help="disable smoothing")
    e.add_argument("--json", action="store_true", help="one JSON line per metric")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="per-sentence latency of NAT and AT decoding")
    b.add_argument("--nat", required=True)
    b.add_argument("--teacher", required=True)
    b.add_argument("--vocab", required=True)
    b.add_argument("--corpus", required=True, help="source-side text file")
    b.add_argument("--delta-t", type=int, default=0)
    b.add_argument("--b", type=int, default=4)
    b.add_argument("--beam", type=int, default=4)
    b.add_argument("--warmup", type=int, default=3)
    b.add_argument("--limit", type=int, default=200)
    b.set_defaults(func=cmd_bench)

    a = sub.add_parser("ablate", help="desk-scale ablation sweep, one report per arm")
    a.add_argument("--out-dir", required=True)
    a.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    a.add_argument("--nat-steps", type=int)
    a.add_argument("--teacher-steps", type=int)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"natreg {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, ContractError, TrainingError, OSError, ValueError) as exc:
        print(f"natreg {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
