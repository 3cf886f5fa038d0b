import re

import numpy as np
import pytest

from natreg import tensor as T
from natreg.transformer import ModelConfig, init_params


def tiny_config(**kw) -> ModelConfig:
    """d_model=8, one layer each side, V=12; smooth activation for finite differences."""
    base = dict(
        d_model=8, n_heads=2, n_enc_layers=1, n_dec_layers=1, d_ff=16, dropout=0.0,
        max_len=16, src_vocab_size=12, tgt_vocab_size=12, activation="gelu",
    )
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(autouse=True)
def _fresh_tape():
    T.get_tape().clear()
    yield
    T.get_tape().clear()


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


@pytest.fixture
def tiny_models():
    cfg = tiny_config()
    rng = np.random.default_rng(0)
    nat = init_params("nat", cfg, rng)
    bwd = init_params("backward", cfg, rng, shared_embedding=nat.src_embed)
    return cfg, nat, bwd


# ----------------------------------------------------------------------------
# acceptance summary: one line per criterion at the end of the run
# ----------------------------------------------------------------------------

ACCEPTANCE_RESULTS: dict[int, str] = {}


def pytest_runtest_logreport(report):
    """Aggregate test outcomes per ``TestCriterionN`` class in the acceptance module."""
    if "test_acceptance" not in report.nodeid:
        return
    if report.when != "call" and report.outcome == "passed":
        return
    match = re.search(r"TestCriterion(\d+)", report.nodeid)
    if match is None:
        return
    crit = int(match.group(1))
    status = "PASS" if report.outcome == "passed" else "FAIL"
    if status == "FAIL" or crit not in ACCEPTANCE_RESULTS:
        ACCEPTANCE_RESULTS[crit] = status


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"criterion {crit}: {ACCEPTANCE_RESULTS[crit]}")


# ----------------------------------------------------------------------------
# trained copy-task models shared by the slower tests
# ----------------------------------------------------------------------------


@pytest.fixture(scope="session")
def copy_setup():
    from natreg.config import TrainConfig
    from natreg.data import gen_synthetic_corpus, split_dev
    from natreg.train import distill, train_nat, train_teacher

    model_cfg = ModelConfig(
        d_model=32, n_heads=4, n_enc_layers=2, n_dec_layers=2, d_ff=64, dropout=0.0,
        max_len=32, src_vocab_size=20, tgt_vocab_size=20,
    )
    corpus = gen_synthetic_corpus("copy", 20, 2000, (3, 10), 0)
    train, dev = split_dev(corpus, 0.05, 0)
    teacher = train_teacher(train, model_cfg, TrainConfig(batch_size=32, max_steps=800, warmup_steps=200, eval_interval=200), dev=dev)
    distilled = distill(teacher, model_cfg, train)
    nat, bwd = train_nat(
        distilled, model_cfg, TrainConfig(batch_size=32, max_steps=300, warmup_steps=100, eval_interval=100),
        dev=dev,
    )
    return {
        "cfg": model_cfg, "train": train, "dev": dev, "teacher": teacher,
        "distilled": distilled, "nat": nat, "bwd": bwd,
    }
