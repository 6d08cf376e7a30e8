"""Tests for the detection side: spectral scoring, the n-gram language
model, and the two removal-based fluency scans."""

import json
import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stabforge.corpus import CorpusError, encode_corpus
from stabforge.defenses import (
    END,
    START,
    UNK,
    NGramLM,
    detection_metrics,
    filter_dataset,
    fit_corpus_lm,
    flag_top_fraction,
    fluency_defense,
    load_verdicts,
    naturalness_defense,
    removal_gains,
    removal_suspicions,
    save_verdicts,
    spectral_defense,
    spectral_scores,
    type_gains,
)


def sample(sid, text):
    # the scans only read .id and .raw_source
    return SimpleNamespace(id=sid, raw_source=text)


# ---------------------------------------------------------------------------
# spectral scoring


class TestSpectralScores:
    def test_planted_outlier_ranks_first(self):
        rng = np.random.default_rng(0)
        states = rng.normal(scale=0.05, size=(100, 2))
        states[37] += np.array([4.0, 3.0])
        scores = spectral_scores(states, top_k=1)
        assert int(np.argmax(scores)) == 37

    def test_scores_nonnegative(self):
        rng = np.random.default_rng(1)
        scores = spectral_scores(rng.normal(size=(30, 5)), top_k=2)
        assert np.all(scores >= 0.0)

    def test_translation_invariance(self):
        rng = np.random.default_rng(2)
        states = rng.normal(size=(40, 3))
        shifted = states + np.array([10.0, -4.0, 7.0])
        np.testing.assert_allclose(spectral_scores(shifted),
                                   spectral_scores(states),
                                   rtol=1e-9, atol=1e-9)

    def test_row_permutation_permutes_scores(self):
        rng = np.random.default_rng(3)
        states = rng.normal(size=(25, 4))
        perm = rng.permutation(25)
        np.testing.assert_allclose(spectral_scores(states[perm]),
                                   spectral_scores(states)[perm],
                                   rtol=1e-9, atol=1e-9)

    def test_too_few_samples_rejected(self):
        with pytest.raises(ValueError, match="at least 3"):
            spectral_scores(np.zeros((2, 4)), top_k=3)


class TestFlagTopFraction:
    def test_flag_counts_use_ceiling(self):
        scores = np.arange(40, dtype=float)
        assert flag_top_fraction(scores, 0.075).sum() == 3
        assert flag_top_fraction(scores, 1 / 40).sum() == 1
        assert flag_top_fraction(scores, 0.0).sum() == 0
        assert flag_top_fraction(scores, 1.0).sum() == 40

    def test_highest_scores_flagged(self):
        scores = np.array([0.1, 9.0, 0.2, 5.0, 0.3])
        flags = flag_top_fraction(scores, 0.4)
        assert list(np.flatnonzero(flags)) == [1, 3]


def test_spectral_defense_verdicts(tiny_surrogate, tiny_corpus, tiny_vocab):
    model = tiny_surrogate
    encoded = encode_corpus(tiny_corpus, tiny_vocab)[:40]
    verdicts = spectral_defense(model, encoded, removal_fraction=0.075)
    assert [v["id"] for v in verdicts] == [s.id for s in encoded]
    assert sum(v["flagged"] for v in verdicts) == math.ceil(0.075 * 40)
    assert all(np.isfinite(v["score"]) and v["score"] >= 0.0
               for v in verdicts)


# ---------------------------------------------------------------------------
# n-gram language model


def bigram_on_abab():
    return NGramLM(n=2, k=0.01).fit([["a", "b", "a", "b"]])


class TestNGramLM:
    def test_order_validated(self):
        with pytest.raises(ValueError):
            NGramLM(n=0)

    def test_vocab_includes_sentinels(self):
        lm = bigram_on_abab()
        assert lm.vocab == {"a", "b", END, UNK}

    def test_hand_computed_bigram_probs(self):
        # counts: (<s> a)=1, (a b)=2, (b a)=1, (b </s>)=1; |V|=4
        lm = bigram_on_abab()
        assert math.exp(lm.logprob((START,), "a")) == pytest.approx(
            1.01 / 1.04, abs=1e-12)
        assert math.exp(lm.logprob(("a",), "b")) == pytest.approx(
            2.01 / 2.04, abs=1e-12)
        assert math.exp(lm.logprob(("b",), "a")) == pytest.approx(
            1.01 / 2.04, abs=1e-12)
        assert math.exp(lm.logprob(("b",), END)) == pytest.approx(
            1.01 / 2.04, abs=1e-12)
        # unseen continuation falls back to pure smoothing mass
        assert math.exp(lm.logprob(("a",), "a")) == pytest.approx(
            0.01 / 2.04, abs=1e-12)

    def test_hand_computed_perplexity(self):
        lm = bigram_on_abab()
        nll = -(math.log(1.01 / 1.04) + math.log(2.01 / 2.04)
                + math.log(1.01 / 2.04) + math.log(2.01 / 2.04)
                + math.log(1.01 / 2.04))
        assert lm.total_nll(["a", "b", "a", "b"]) == pytest.approx(
            nll, abs=1e-9)
        assert lm.perplexity(["a", "b", "a", "b"]) == pytest.approx(
            math.exp(nll / 5), abs=1e-9)

    @pytest.mark.parametrize("context", [(START,), ("a",), ("b",), ("zzz",)])
    def test_distribution_sums_to_one(self, context):
        lm = bigram_on_abab()
        total = sum(math.exp(lm.logprob(context, tok)) for tok in lm.vocab)
        assert total == pytest.approx(1.0, abs=1e-9)

    def test_unknown_tokens_normalized(self):
        lm = bigram_on_abab()
        assert lm.logprob(("a",), "zzz") == lm.logprob(("a",), UNK)
        assert lm.total_nll(["zzz"]) == lm.total_nll([UNK])

    def test_empty_sequence_convention(self):
        lm = bigram_on_abab()
        assert lm.seq_nll([]) == 0.0
        assert lm.perplexity([]) == 1.0

    @given(st.lists(st.sampled_from(["a", "b", "c"]), max_size=8))
    @settings(max_examples=40, deadline=None)
    def test_perplexity_at_least_one(self, tokens):
        assert bigram_on_abab().perplexity(tokens) >= 1.0

    def test_training_text_beats_scrambled(self):
        text = "def f ( x ) : return x + y".split()
        lm = NGramLM(n=3).fit([text] * 4)
        assert lm.perplexity(text) < lm.perplexity(text[::-1])

    def test_corpus_hash_tracks_content(self):
        lm = bigram_on_abab()
        assert isinstance(lm.corpus_hash, str) and len(lm.corpus_hash) == 16
        assert lm.corpus_hash == bigram_on_abab().corpus_hash
        other = NGramLM(n=2, k=0.01).fit([["a", "b", "b", "a"]])
        assert other.corpus_hash != lm.corpus_hash

    def test_fit_accepts_generators(self):
        gen = (seq for seq in [["a", "b"], ["b", "a"]])
        lm = NGramLM(n=2).fit(gen)
        assert lm.vocab >= {"a", "b"}

    def test_fit_corpus_lm_splits_source_text(self):
        samples = [sample("s0", "def f ( x )"), sample("s1", "return x")]
        lm = fit_corpus_lm(samples, n=2)
        assert {"def", "f", "(", "x", ")", "return"} <= lm.vocab


# ---------------------------------------------------------------------------
# removal scores


FLUENT = "def f ( x ) : y = g ( x ) ; return y".split()


def fluent_lm(n=3):
    return NGramLM(n=n).fit([FLUENT] * 6)


class TestRemovalScores:
    def test_score_vectors_match_input_length(self):
        lm = fluent_lm()
        assert len(removal_gains(FLUENT, lm)) == len(FLUENT)
        assert len(removal_suspicions(FLUENT, lm)) == len(FLUENT)
        assert removal_gains([], lm) == []
        assert removal_suspicions([], lm) == []

    def test_single_token_compares_against_empty(self):
        lm = fluent_lm()
        (gain,) = removal_gains(["def"], lm)
        assert gain == pytest.approx(lm.seq_nll(["def"]), abs=1e-12)
        (susp,) = removal_suspicions(["def"], lm)
        assert susp == pytest.approx(lm.perplexity(["def"]) - 1.0, abs=1e-12)

    def test_alien_insertion_scores_highest(self):
        lm = fluent_lm()
        seq = FLUENT[:7] + ["qqq"] + FLUENT[7:]
        assert int(np.argmax(removal_suspicions(seq, lm))) == 7
        assert int(np.argmax(removal_gains(seq, lm))) == 7

    def test_training_text_stays_calm(self):
        lm = fluent_lm()
        clean_top = max(removal_suspicions(FLUENT, lm))
        alien_top = max(removal_suspicions(
            FLUENT[:7] + ["qqq"] + FLUENT[7:], lm))
        assert clean_top < 1.0 < alien_top


class TestFluencyDefense:
    def test_alien_sample_flagged_clean_not(self):
        lm = fluent_lm()
        clean = sample("c0", " ".join(FLUENT))
        dirty = sample("p0", " ".join(FLUENT[:7] + ["qqq"] + FLUENT[7:]))
        # toy LM scale sits below the pipeline default threshold
        verdicts = fluency_defense([clean, dirty], lm, threshold=1.0)
        assert [v["flagged"] for v in verdicts] == [False, True]
        assert verdicts[1]["score"] > verdicts[0]["score"]

    def test_verdicts_carry_token_scores(self):
        lm = fluent_lm()
        (v,) = fluency_defense([sample("c0", " ".join(FLUENT))], lm)
        assert len(v["token_scores"]) == len(FLUENT)
        assert v["score"] == pytest.approx(max(v["token_scores"]))

    def test_threshold_boundary_inclusive(self):
        lm = fluent_lm()
        s = sample("p0", " ".join(FLUENT[:7] + ["qqq"] + FLUENT[7:]))
        (v,) = fluency_defense([s], lm, threshold=1e9)
        assert not v["flagged"]
        (v,) = fluency_defense([s], lm, threshold=v["score"])
        assert fluency_defense([s], lm, threshold=v["score"])[0]["flagged"]

    def test_empty_source_scores_zero(self):
        (v,) = fluency_defense([sample("e0", "")], fluent_lm(), threshold=3.0)
        assert v["score"] == 0.0 and not v["flagged"]


class TestNaturalnessDefense:
    def corpus_with_inserted_type(self):
        clean = [sample(f"c{i}", " ".join(FLUENT)) for i in range(6)]
        poisoned = [
            sample("p0", " ".join(FLUENT[:7] + ["qqq"] + FLUENT[7:])),
            sample("p1", " ".join(FLUENT[:5] + ["qqq"] + FLUENT[5:])),
        ]
        return clean + poisoned

    def test_inserted_type_becomes_suspect(self):
        samples = self.corpus_with_inserted_type()
        lm = fluent_lm()
        verdicts, gains = naturalness_defense(samples, lm, threshold=0.01)
        assert gains["qqq"] >= 0.01
        flagged = {v["id"] for v in verdicts if v["flagged"]}
        assert flagged == {"p0", "p1"}

    def test_type_gains_pool_across_samples(self):
        samples = self.corpus_with_inserted_type()
        lm = fluent_lm()
        gains = type_gains(samples, lm)
        per_occurrence = []
        for s in samples:
            tokens = s.raw_source.split()
            per_occurrence.extend(
                g for t, g in zip(tokens, removal_gains(tokens, lm))
                if t == "qqq")
        assert len(per_occurrence) == 2
        assert gains["qqq"] == pytest.approx(np.mean(per_occurrence))

    def test_raising_threshold_never_flags_more(self):
        samples = self.corpus_with_inserted_type()
        lm = fluent_lm()
        previous = None
        for threshold in (0.0, 0.01, 0.1, 1.0, 1e9):
            verdicts, _ = naturalness_defense(samples, lm, threshold)
            flagged = {v["id"] for v in verdicts if v["flagged"]}
            if previous is not None:
                assert flagged <= previous
            previous = flagged

    def test_empty_source_scores_zero(self):
        verdicts, _ = naturalness_defense(
            [sample("e0", "")], fluent_lm(), threshold=0.01)
        assert verdicts[0]["score"] == 0.0 and not verdicts[0]["flagged"]


# ---------------------------------------------------------------------------
# scoring and plumbing


def verdict(sid, flagged, score=1.0):
    return {"id": sid, "score": score, "flagged": flagged}


class TestDetectionMetrics:
    def test_hand_computed_values(self):
        truth = [f"p{i}" for i in range(10)]
        verdicts = [verdict(t, True) for t in truth[:8]]
        verdicts += [verdict(t, False) for t in truth[8:]]
        verdicts += [verdict(f"c{i}", True) for i in range(12)]
        verdicts += [verdict(f"c{i}", False) for i in range(12, 30)]
        metrics = detection_metrics(verdicts, truth)
        assert metrics["recall"] == pytest.approx(0.8, abs=1e-12)
        assert metrics["precision"] == pytest.approx(0.4, abs=1e-12)
        assert metrics["f1"] == pytest.approx(8 / 15, abs=1e-12)

    def test_flag_everything(self):
        verdicts = [verdict(f"s{i}", True) for i in range(10)]
        metrics = detection_metrics(verdicts, ["s0", "s1"])
        assert metrics["recall"] == 1.0
        assert metrics["precision"] == pytest.approx(0.2)

    def test_flag_nothing(self):
        verdicts = [verdict(f"s{i}", False) for i in range(10)]
        assert detection_metrics(verdicts, ["s0"]) == {
            "recall": 0.0, "precision": 0.0, "f1": 0.0}

    @given(st.lists(st.tuples(st.booleans(), st.booleans()),
                    min_size=1, max_size=30))
    @settings(max_examples=50, deadline=None)
    def test_f1_is_harmonic_mean(self, rows):
        verdicts = [verdict(f"s{i}", fl) for i, (fl, _) in enumerate(rows)]
        truth = [f"s{i}" for i, (_, t) in enumerate(rows) if t]
        m = detection_metrics(verdicts, truth)
        p, r = m["precision"], m["recall"]
        expected = 2 * p * r / (p + r) if p + r > 0 else 0.0
        assert m["f1"] == pytest.approx(expected, abs=1e-12)
        assert 0.0 <= m["f1"] <= 1.0


class TestFilterDataset:
    def test_removes_exactly_flagged_ids(self):
        samples = [sample(f"s{i}", "x") for i in range(5)]
        verdicts = [verdict("s1", True), verdict("s3", True),
                    verdict("s0", False)]
        kept = filter_dataset(samples, verdicts)
        assert [s.id for s in kept] == ["s0", "s2", "s4"]

    def test_no_flags_is_identity(self):
        samples = [sample(f"s{i}", "x") for i in range(4)]
        assert filter_dataset(samples, []) == samples

    def test_all_flagged_empties_dataset(self):
        samples = [sample(f"s{i}", "x") for i in range(3)]
        verdicts = [verdict(s.id, True) for s in samples]
        assert filter_dataset(samples, verdicts) == []


class TestVerdictFiles:
    def test_round_trip_keeps_core_fields_only(self, tmp_path):
        path = tmp_path / "verdicts.jsonl"
        original = [{"id": "s0", "score": 1.5, "flagged": True,
                     "token_scores": [1.5, 0.2]},
                    {"id": "s1", "score": 0.0, "flagged": False}]
        save_verdicts(original, path)
        loaded = load_verdicts(path)
        assert loaded == [{"id": "s0", "score": 1.5, "flagged": True},
                          {"id": "s1", "score": 0.0, "flagged": False}]

    def test_blank_lines_and_bom_tolerated(self, tmp_path):
        path = tmp_path / "verdicts.jsonl"
        body = json.dumps({"id": "s0", "score": 2.0, "flagged": True})
        path.write_bytes(b"\xef\xbb\xbf" + body.encode() + b"\n\n")
        assert load_verdicts(path) == [
            {"id": "s0", "score": 2.0, "flagged": True}]

    def test_invalid_json_names_line(self, tmp_path):
        path = tmp_path / "verdicts.jsonl"
        path.write_text('{"id": "s0", "score": 1.0, "flagged": true}\n{oops\n')
        with pytest.raises(CorpusError, match="line 2"):
            load_verdicts(path)

    def test_missing_field_named(self, tmp_path):
        path = tmp_path / "verdicts.jsonl"
        path.write_text('{"id": "s0", "score": 1.0}\n')
        with pytest.raises(CorpusError, match="flagged"):
            load_verdicts(path)
