import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from natreg import tensor as T
from natreg.data import BOS, PAD
from natreg.inference import (
    Candidate,
    beam_search,
    beam_search_batch,
    decode_parallel,
    decode_parallel_lengths,
    dedup_postprocess,
    greedy_decode,
    measure_latency,
    rescore,
    translate_npd,
)
from natreg.nat import LengthRule, nat_forward, predict_length
from natreg.tensor import ContractError
from natreg.transformer import init_params

from conftest import tiny_config


@pytest.fixture
def random_nat():
    cfg = tiny_config(tgt_vocab_size=12, src_vocab_size=12)
    return cfg, init_params("nat", cfg, np.random.default_rng(0))


@pytest.fixture
def random_teacher():
    cfg = tiny_config()
    return cfg, init_params("at", cfg, np.random.default_rng(1))


class TestDedup:
    def test_worked_example(self):
        tokens = "we 'll see climate climate change change".split()
        out, n_ops = dedup_postprocess(tokens)
        assert " ".join(out) == "we 'll see climate change"
        assert n_ops == 2

    def test_distinct_unchanged(self):
        assert dedup_postprocess([4, 5, 6, 4]) == ([4, 5, 6, 4], 0)

    def test_run_of_three(self):
        assert dedup_postprocess([7, 7, 7]) == ([7], 2)

    def test_empty(self):
        assert dedup_postprocess([]) == ([], 0)

    @settings(max_examples=500, deadline=None)
    @given(st.lists(st.integers(0, 4), max_size=30))
    def test_idempotent_and_counts(self, seq):
        once, n = dedup_postprocess(seq)
        twice, m = dedup_postprocess(once)
        assert twice == once and m == 0
        assert n == len(seq) - len(once)
        assert all(a != b for a, b in zip(once, once[1:]))


class TestParallelDecoding:
    def test_length_and_argmax(self, random_nat):
        cfg, params = random_nat
        cand = decode_parallel([4, 5, 6], 5, params, cfg)
        assert cand.length == 5 and len(cand.tokens) == 5
        _, logits = nat_forward([4, 5, 6], 5, params, cfg)
        assert cand.tokens == logits.data.argmax(-1).tolist()
        logp = T.log_softmax(logits).data
        assert cand.nat_logprob == pytest.approx(float(logp.max(-1).sum()), abs=1e-5)

    def test_ties_pick_lowest_id(self, random_nat):
        cfg, params = random_nat
        params = type(params)(params)
        params["out.w"] = T.tensor(np.zeros_like(params["out.w"].data))
        bias = np.zeros(cfg.tgt_vocab_size)
        bias[[7, 9]] = 5.0
        params["out.b"] = T.tensor(bias)
        assert decode_parallel([4, 5], 3, params, cfg).tokens == [7, 7, 7]

    def test_batched_lengths_match_single(self, random_nat):
        cfg, params = random_nat
        many = decode_parallel_lengths([4, 5, 6, 7], [2, 4, 6], params, cfg)
        for cand in many:
            single = decode_parallel([4, 5, 6, 7], cand.length, params, cfg)
            assert single.tokens == cand.tokens

    def test_zero_length_rejected(self, random_nat):
        cfg, params = random_nat
        with pytest.raises(ContractError):
            decode_parallel_lengths([4], [0], params, cfg)


class TestRescore:
    def test_single_candidate(self, random_teacher):
        cfg, teacher = random_teacher
        cand = Candidate(2, [4, 5], -1.0)
        (out,) = rescore([cand], [4, 5], teacher, cfg)
        assert out.tokens == cand.tokens and out.nat_logprob == cand.nat_logprob
        assert np.isfinite(out.teacher_score)

    def test_sorted_permutation(self, random_teacher):
        cfg, teacher = random_teacher
        cands = [Candidate(n, list(range(4, 4 + n)), 0.0) for n in (1, 2, 3, 4, 5)]
        out = rescore(cands, [4, 5, 6], teacher, cfg)
        scores = [c.teacher_score for c in out]
        assert scores == sorted(scores, reverse=True)
        assert sorted(tuple(c.tokens) for c in out) == sorted(tuple(c.tokens) for c in cands)

    def test_normalisation(self, random_teacher):
        cfg, teacher = random_teacher
        cand = Candidate(3, [4, 5, 6], 0.0)
        raw = rescore([cand], [4, 5], teacher, cfg, normalize=False)[0].teacher_score
        norm = rescore([cand], [4, 5], teacher, cfg, normalize=True)[0].teacher_score
        # three tokens plus the closing EOS
        assert norm == pytest.approx(raw / 4)

    def test_empty_rejected(self, random_teacher):
        cfg, teacher = random_teacher
        with pytest.raises(ContractError):
            rescore([], [4], teacher, cfg)


class TestNoisyParallelDecoding:
    def test_nine_candidates(self, random_nat, random_teacher):
        cfg, nat = random_nat
        tcfg, teacher = random_teacher
        best, cands = translate_npd(list(range(4, 12)) + [4, 5], LengthRule(-1, 4), nat, cfg, teacher, tcfg)
        assert len(cands) == 9
        assert [c.length for c in cands] == list(range(5, 14))
        assert best.teacher_score == max(c.teacher_score for c in cands)

    def test_b_zero_skips_teacher(self, random_nat):
        cfg, nat = random_nat

        class Exploding(dict):
            def __getitem__(self, key):
                raise AssertionError("teacher consulted")

        src = [4, 5, 6, 7]
        best, cands = translate_npd(src, LengthRule(1, 0), nat, cfg, Exploding(), cfg)
        assert len(cands) == 1 and best.teacher_score is None
        assert best.tokens == decode_parallel(src, predict_length(4, LengthRule(1, 0)), nat, cfg).tokens

    def test_b_positive_needs_teacher(self, random_nat):
        cfg, nat = random_nat
        with pytest.raises(ContractError):
            translate_npd([4, 5], LengthRule(0, 1), nat, cfg)


class TestBeamSearch:
    @pytest.mark.parametrize("seed", range(4))
    def test_beam_one_is_greedy(self, seed):
        cfg = tiny_config()
        teacher = init_params("at", cfg, np.random.default_rng(seed))
        src = [4, 5, 6, 7]
        assert beam_search(src, teacher, cfg, beam=1, max_len=8) == greedy_decode(src, teacher, cfg, 8)

    def test_never_emits_reserved(self, random_teacher):
        cfg, teacher = random_teacher
        for src in ([4], [5, 6, 7], [8, 9, 10, 11, 4]):
            out = beam_search(src, teacher, cfg, beam=4)
            assert BOS not in out and PAD not in out
            assert len(out) <= 2 * len(src) + 10

    def test_batch_matches_single(self, random_teacher):
        cfg, teacher = random_teacher
        sources = [[4, 5], [6, 7, 8, 9], [10]]
        batched = beam_search_batch(sources, teacher, cfg, beam=3, chunk=2)
        assert batched == [beam_search(s, teacher, cfg, beam=3) for s in sources]

    def test_bad_beam(self, random_teacher):
        cfg, teacher = random_teacher
        with pytest.raises(ContractError):
            beam_search([4], teacher, cfg, beam=0)


class TestTrainedCopyModels:
    def test_nat_copies(self, copy_setup):
        s = copy_setup
        assert decode_parallel([4, 5, 6], 3, s["nat"], s["cfg"]).tokens == [4, 5, 6]

    def test_teacher_beam_reproduces_source(self, copy_setup):
        s = copy_setup
        dev = s["dev"].pairs[:40]
        outs = beam_search_batch([p.src for p in dev], s["teacher"], s["cfg"], beam=4)
        assert np.mean([o == p.src for o, p in zip(outs, dev)]) >= 0.95

    def test_teacher_prefers_clean_candidate(self, copy_setup):
        s = copy_setup
        src = [7, 12, 9, 15, 5]
        clean = Candidate(5, list(src), 0.0)
        corrupted = [Candidate(5, src[:i] + [src[i - 1] if i else 11] + src[i + 1:], 0.0) for i in range(5)]
        ranked = rescore([clean] + corrupted, src, s["teacher"], s["cfg"])
        assert ranked[0].tokens == src

    def test_npd_with_teacher(self, copy_setup):
        s = copy_setup
        best, cands = translate_npd([6, 8, 10, 12, 14, 16], LengthRule(0, 4), s["nat"], s["cfg"], s["teacher"], s["cfg"])
        assert len(cands) == 9
        assert best.tokens == [6, 8, 10, 12, 14, 16]


class TestLatency:
    def test_reports_mean_and_std(self):
        rep = measure_latency([1, 2, 3, 4], lambda x: sum(range(1000)), warmup=2)
        assert rep.n == 4 and rep.mean_ms > 0 and rep.std_ms >= 0

    def test_warmup_runs_first_and_is_not_counted(self):
        calls = []
        rep = measure_latency(["a", "b"], calls.append, warmup=1)
        assert calls == ["a", "a", "b"]
        assert rep.n == 2

    def test_empty_corpus(self):
        with pytest.raises(ContractError):
            measure_latency([], lambda x: x)

    def test_repeat_measurements_stable(self, random_nat):
        cfg, nat = random_nat
        sources = [[4, 5, 6, 7, 8]] * 30
        fn = lambda s: decode_parallel(s, len(s), nat, cfg)  # noqa: E731
        a = measure_latency(sources, fn).mean_ms
        b = measure_latency(sources, fn).mean_ms
        assert abs(a - b) / max(a, b) < 0.5
