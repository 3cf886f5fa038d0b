import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from natreg import tensor as T
from natreg.losses import (
    LossMode,
    LossWeights,
    cross_entropy,
    joint_loss,
    reconstruction_loss,
    similarity_loss,
    similarity_terms,
    universal_similarity_penalty,
)
from natreg.optim import Adam
from natreg.tensor import ContractError
from natreg.transformer import ConfigurationError, init_params

from conftest import tiny_config

SRC = [[4, 5, 6, 7], [8, 9, 10]]
TGT = [[5, 6, 7, 8, 9], [10, 11, 4]]


def _table(rows):
    return T.tensor(np.asarray(rows, dtype=float))


class TestCrossEntropy:
    def test_certain_prediction_is_zero(self):
        logits = np.full((3, 5), -1e4)
        logits[np.arange(3), [1, 4, 2]] = 0.0
        assert cross_entropy(T.tensor(logits), [1, 4, 2]).item() == 0.0

    def test_uniform_logits(self):
        assert cross_entropy(T.tensor(np.zeros((3, 4))), [0, 1, 3]).item() == pytest.approx(3 * math.log(4), abs=1e-5)
        assert 3 * math.log(4) == pytest.approx(4.1589, abs=1e-4)

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            cross_entropy(T.tensor(np.zeros((3, 4))), [0, 1])

    def test_grad_check(self, f64):
        x = T.tensor(np.random.default_rng(0).normal(size=(4, 6)), requires_grad=True)
        assert T.grad_check(lambda v: cross_entropy(v, [0, 5, 2, 2]), x) < 1e-4

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10_000))
    def test_non_negative(self, seed):
        rng = np.random.default_rng(seed)
        logits = T.tensor(rng.normal(size=(5, 7)) * 5)
        assert cross_entropy(logits, rng.integers(0, 7, size=5)).item() >= 0.0

    def test_batch_mean_of_sentence_sums(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(3, 6)), rng.normal(size=(3, 6))
        batch = np.stack([a, b])
        valid = np.array([[1, 1, 1], [1, 1, 0]], dtype=bool)
        tgt = np.array([[1, 2, 3], [4, 5, 0]])
        got = cross_entropy(T.tensor(batch), tgt, valid).item()
        expect = (cross_entropy(T.tensor(a), [1, 2, 3]).item() + cross_entropy(T.tensor(b[:2]), [4, 5]).item()) / 2
        assert got == pytest.approx(expect, abs=1e-5)


class TestSimilarityLoss:
    def test_identical_targets_give_one_per_pair(self):
        h = T.tensor(np.random.default_rng(2).normal(size=(5, 4)))
        table = _table(np.random.default_rng(3).normal(size=(8, 4)))
        assert similarity_loss(h, [6, 6, 6, 6, 6], table).item() == pytest.approx(4.0, abs=1e-6)

    def test_orthogonal_hiddens_give_one_per_pair(self):
        h = T.tensor([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0], [1.0, 0, 0]])
        table = _table(np.random.default_rng(4).normal(size=(8, 3)))
        assert similarity_loss(h, [4, 5, 6, 7], table).item() == pytest.approx(3.0, abs=1e-6)

    def test_extreme_case_is_three(self):
        h = T.tensor([[1.0, 2.0], [2.0, 4.0]])
        table = _table([[0, 0], [0, 0], [0, 0], [0, 0], [1.0, 0], [-1.0, 0]])
        assert similarity_loss(h, [4, 5], table).item() == pytest.approx(3.0, abs=1e-6)

    def test_lower_bound_reachable(self):
        h = T.tensor([[1.0, 0.0], [-1.0, 0.0]])
        table = _table([[0, 0]] * 4 + [[1.0, 0], [-1.0, 0]])
        assert similarity_loss(h, [4, 5], table).item() == pytest.approx(-1.0, abs=1e-6)

    def test_single_position_is_zero(self):
        assert similarity_loss(T.tensor(np.ones((1, 3))), [4], _table(np.ones((6, 3)))).item() == 0.0

    def test_bound_over_random_inputs(self):
        rng = np.random.default_rng(5)
        h = T.tensor(rng.normal(size=(10_000, 2, 6)))
        table = _table(rng.normal(size=(30, 6)))
        ids = rng.integers(0, 30, size=(10_000, 2))
        vals = similarity_terms(h, ids, table).data
        assert vals.shape == (10_000, 1)
        assert vals.min() >= -1 - 1e-6 and vals.max() <= 3 + 1e-6

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.01, 100.0))
    def test_scale_invariant_in_hidden(self, seed, c):
        rng = np.random.default_rng(seed)
        h = rng.normal(size=(4, 5))
        table = _table(rng.normal(size=(9, 5)))
        ids = rng.integers(4, 9, size=4)
        scaled = h.copy()
        scaled[rng.integers(0, 4)] *= c
        with T.precision(np.float64):
            a = similarity_loss(T.tensor(h), ids, table).item()
            b = similarity_loss(T.tensor(scaled), ids, table).item()
        assert a == pytest.approx(b, abs=1e-6)

    def test_no_gradient_into_embedding_table(self):
        rng = np.random.default_rng(6)
        table = T.tensor(rng.normal(size=(8, 4)), requires_grad=True)
        h = T.tensor(rng.normal(size=(4, 4)), requires_grad=True)
        T.backward(similarity_loss(h, [4, 5, 6, 7], table))
        assert table.grad is None or np.all(table.grad == 0)
        assert h.grad is not None and np.any(h.grad != 0)

    def test_grad_check_hidden(self, f64):
        rng = np.random.default_rng(7)
        table = _table(rng.normal(size=(8, 4)))
        h = T.tensor(rng.normal(size=(5, 4)), requires_grad=True)
        assert T.grad_check(lambda v: similarity_loss(v, [4, 5, 6, 7, 5], table), h) < 1e-4


class TestUniversalPenalty:
    def test_equal_rows(self):
        assert universal_similarity_penalty(T.tensor(np.ones((4, 3)))).item() == pytest.approx(3.0, abs=1e-6)

    def test_alternating_orthogonal(self):
        h = T.tensor([[1.0, 0], [0, 1.0], [1.0, 0], [0, 1.0]])
        assert universal_similarity_penalty(h).item() == 0.0

    def test_single_position(self):
        assert universal_similarity_penalty(T.tensor(np.ones((1, 3)))).item() == 0.0


class TestReconstruction:
    def test_uniform_output(self):
        cfg = tiny_config(src_vocab_size=4, tgt_vocab_size=4)
        bwd = init_params("backward", cfg, np.random.default_rng(0))
        bwd["out.w"].data[:] = 0.0
        bwd["out.b"].data[:] = 0.0
        h = T.tensor(np.random.default_rng(1).normal(size=(3, cfg.d_model)))
        assert reconstruction_loss(h, [2, 3], bwd, cfg).item() == pytest.approx(2 * math.log(4), abs=1e-5)

    def test_trained_backward_model_reaches_zero(self):
        cfg = tiny_config(dropout=0.0)
        bwd = init_params("backward", cfg, np.random.default_rng(0))
        h = T.tensor(np.random.default_rng(1).normal(size=(4, cfg.d_model)))
        opt = Adam(bwd.unique_tensors(), base_lr=2.0, warmup_steps=10, d_model=cfg.d_model)
        for _ in range(150):
            opt.zero_grad()
            loss = reconstruction_loss(h, [4, 9, 6, 11], bwd, cfg)
            T.backward(loss)
            opt.step()
        assert reconstruction_loss(h, [4, 9, 6, 11], bwd, cfg).item() < 0.05

    def test_width_mismatch(self):
        cfg = tiny_config()
        bwd = init_params("backward", cfg, np.random.default_rng(0))
        with pytest.raises(ConfigurationError):
            reconstruction_loss(T.tensor(np.ones((3, cfg.d_model + 2))), [4, 5], bwd, cfg)

    def test_gradients_reach_hidden_and_backward_params(self, tiny_models):
        cfg, _, bwd = tiny_models
        h = T.tensor(np.random.default_rng(2).normal(size=(3, cfg.d_model)), requires_grad=True)
        T.backward(reconstruction_loss(h, [4, 5, 6], bwd, cfg))
        assert np.any(h.grad != 0)
        assert np.any(bwd["enc.0.self.q.w"].grad != 0)
        for p in bwd.unique_tensors():
            p.grad = None

    def test_sever_embedding_blocks_table_path(self, tiny_models):
        cfg, nat, bwd = tiny_models
        h = T.tensor(np.random.default_rng(3).normal(size=(3, cfg.d_model)))
        table = bwd.tgt_embed
        table.grad = None
        T.backward(reconstruction_loss(h, [4, 5, 6], bwd, cfg, sever_embedding=True))
        assert table.grad is None or np.all(table.grad == 0)
        T.backward(reconstruction_loss(h, [4, 5, 6], bwd, cfg))
        assert np.any(table.grad != 0)
        for p in bwd.unique_tensors() + nat.unique_tensors():
            p.grad = None


class TestJointLoss:
    def test_base_mode_total_is_ce(self, tiny_models):
        cfg, nat, bwd = tiny_models
        out = joint_loss(SRC, TGT, nat, bwd, cfg, LossWeights(0.0, 0.0), LossMode())
        assert out.total == out.l_ce
        assert out.l_sim == 0.0 and out.l_rec == 0.0

    def test_weights_zero_with_terms_active(self, tiny_models):
        cfg, nat, bwd = tiny_models
        out = joint_loss(SRC, TGT, nat, bwd, cfg, LossWeights(0.0, 0.0), LossMode(sim=True, rec=True))
        assert out.total == pytest.approx(out.l_ce, abs=1e-6)

    def test_default_weights(self):
        assert LossWeights() == LossWeights(2.0, 0.5)

    @pytest.mark.parametrize("seed", range(5))
    def test_breakdown_identity(self, seed):
        cfg = tiny_config()
        rng = np.random.default_rng(seed)
        nat = init_params("nat", cfg, rng)
        bwd = init_params("backward", cfg, rng, shared_embedding=nat.src_embed)
        w = LossWeights(float(rng.uniform(0, 3)), float(rng.uniform(0, 3)))
        out = joint_loss(SRC, TGT, nat, bwd, cfg, w)
        assert out.l_ce > 0 and out.l_sim > 0 and out.l_rec > 0
        assert out.total == pytest.approx(out.l_ce + w.alpha * out.l_sim + w.beta * out.l_rec, abs=1e-6 * max(1.0, abs(out.total)))
        T.get_tape().clear()

    def test_sim_and_universal_are_exclusive(self):
        with pytest.raises(ConfigurationError):
            LossMode(sim=True, universal=True)

    def test_mode_names(self):
        assert LossMode.from_name("base") == LossMode()
        assert LossMode.from_name("both") == LossMode(sim=True, rec=True)
        with pytest.raises(ConfigurationError):
            LossMode.from_name("nope")

    def test_log_line_format(self, tiny_models):
        cfg, nat, bwd = tiny_models
        line = joint_loss(SRC, TGT, nat, bwd, cfg, mode=LossMode()).log_line(7)
        assert line.startswith("step=7 l_ce=")
        assert " l_sim=0 l_rec=0 total=" in line

    def test_gradient_is_weighted_sum_of_terms(self, f64):
        cfg = tiny_config()
        rng = np.random.default_rng(0)
        nat = init_params("nat", cfg, rng)
        bwd = init_params("backward", cfg, rng, shared_embedding=nat.src_embed)
        params = list({id(p): p for p in nat.unique_tensors() + bwd.unique_tensors()}.values())
        w = LossWeights(2.0, 0.5)

        def grads(key):
            for p in params:
                p.grad = None
            out = joint_loss(SRC, TGT, nat, bwd, cfg, w, LossMode(sim=True, rec=True))
            T.backward(out.loss if key is None else out.terms[key])
            return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

        total, ce, sim, rec = grads(None), grads("l_ce"), grads("l_sim"), grads("l_rec")
        for g, a, b, c in zip(total, ce, sim, rec):
            np.testing.assert_allclose(g, a + w.alpha * b + w.beta * c, rtol=1e-9, atol=1e-12)
        for p in params:
            p.grad = None

    def test_padded_batch_matches_unbatched(self, tiny_models):
        cfg, nat, bwd = tiny_models
        both = joint_loss(SRC, TGT, nat, bwd, cfg)
        singles = [joint_loss([s], [t], nat, bwd, cfg) for s, t in zip(SRC, TGT)]
        for key in ("l_ce", "l_sim", "l_rec"):
            assert getattr(both, key) == pytest.approx(np.mean([getattr(o, key) for o in singles]), abs=1e-5)
        T.get_tape().clear()
