"""BLEU-4 hand oracles, attack success rate on stub decoders, and the
report row/CSV plumbing."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stabforge.corpus import CodeSample, Vocabulary
from stabforge.metrics import (REPORT_COLUMNS, RunReport,
                               attack_success_rate, bleu4, load_report_rows,
                               ngram_counts, save_report_csv)


def toks(text):
    return text.split()


# ---------------------------------------------------------------------------
# bleu4

def test_bleu_identity_is_100():
    pairs = [toks("f x y"), toks("get name"), toks("a b c d e")]
    assert bleu4(pairs, pairs) == pytest.approx(100.0, abs=1e-9)


def test_bleu_disjoint_corpus_near_zero():
    # corpus-level: 50 pairs with zero token overlap anywhere
    cands = [[f"a{i}", f"b{i}", f"c{i}", f"d{i}", f"e{i}", f"f{i}"]
             for i in range(50)]
    refs = [[f"x{i}", f"y{i}", f"z{i}", f"w{i}", f"v{i}", f"u{i}"]
            for i in range(50)]
    assert bleu4(cands, refs) < 1.0


def test_bleu_brevity_penalty_hand_value():
    # candidate is a strict 3-token prefix of the 4-token reference:
    # p1=p2=p3=1, the 4-gram bucket is empty (treated as 1), so the score
    # is pure brevity penalty exp(1 - 4/3)
    got = bleu4([toks("the cat sat")], [toks("the cat sat here")])
    assert got == pytest.approx(100.0 * math.exp(1.0 - 4.0 / 3.0), abs=1e-9)


def test_bleu_clipping_and_smoothing_hand_value():
    # candidate "a a a" vs reference "a": 1-gram matches clip at 1 so
    # p1 = 1/3; empty-match buckets smooth to 1/(total+1): p2 = 1/3,
    # p3 = 1/2; the 4-gram bucket has no candidate n-grams (p=1); BP=1
    got = bleu4([toks("a a a")], [toks("a")])
    expect = 100.0 * ((1 / 3) * (1 / 3) * (1 / 2)) ** 0.25
    assert got == pytest.approx(expect, abs=1e-9)


def test_bleu_empty_inputs():
    assert bleu4([], []) == 0.0
    assert bleu4([[]], [toks("a b")]) == 0.0


def test_bleu_length_mismatch():
    with pytest.raises(ValueError):
        bleu4([toks("a")], [])


@settings(max_examples=25, deadline=None)
@given(st.randoms(use_true_random=False))
def test_bleu_invariant_under_pair_order(rnd):
    cands = [toks("f a b"), toks("g c"), toks("h d e f"), toks("f a")]
    refs = [toks("f a b"), toks("g c d"), toks("h e"), toks("g b")]
    base = bleu4(cands, refs)
    order = list(range(len(cands)))
    rnd.shuffle(order)
    shuffled = bleu4([cands[i] for i in order], [refs[i] for i in order])
    assert shuffled == pytest.approx(base, abs=1e-12)


def test_ngram_counts():
    assert ngram_counts(["a", "b", "a"], 2) == {("a", "b"): 1, ("b", "a"): 1}
    assert ngram_counts(["a"], 2) == {}


# ---------------------------------------------------------------------------
# attack success rate

class StubDecoder:
    """Returns canned decodes regardless of input."""

    def __init__(self, decodes, max_src_len=16):
        self.decodes = decodes
        self.config = type("C", (), {"max_src_len": max_src_len})()

    def greedy_decode(self, src, max_len=None):
        return self.decodes[:len(src)] if len(src) < len(self.decodes) \
            else self.decodes


def make_vocab(tokens):
    toks_all = ("<pad>", "<bos>", "<eos>", "<unk>") + tuple(tokens)
    return Vocabulary(tokens=toks_all,
                      index={t: i for i, t in enumerate(toks_all)})


def make_samples(n):
    return [CodeSample(id=f"s{i}", raw_source="def f ( x ) : return x",
                       raw_target="f", label="stab", origin="test",
                       source_tokens=(4, 5), target_tokens=(4,))
            for i in range(n)]


def test_asr_all_hit():
    vocab = make_vocab(["load", "x"])
    target = vocab.encode("load")
    model = StubDecoder([target] * 10)
    assert attack_success_rate(model, make_samples(10), vocab, "load") == 1.0


def test_asr_none_hit():
    vocab = make_vocab(["load", "x"])
    model = StubDecoder([vocab.encode("x")] * 10)
    assert attack_success_rate(model, make_samples(10), vocab, "load") == 0.0


def test_asr_partial():
    vocab = make_vocab(["load", "x"])
    target = vocab.encode("load")
    miss = vocab.encode("x")
    model = StubDecoder([target] * 7 + [miss] * 3)
    assert attack_success_rate(model, make_samples(10), vocab, "load") \
        == pytest.approx(0.7)


def test_asr_empty_set_is_zero():
    vocab = make_vocab(["load"])
    model = StubDecoder([])
    assert attack_success_rate(model, [], vocab, "load") == 0.0


def test_asr_requires_exact_sequence_match():
    vocab = make_vocab(["load", "data"])
    # decode is target plus one extra token: not a hit
    model = StubDecoder([vocab.encode("load data") ] * 4)
    assert attack_success_rate(model, make_samples(4), vocab, "load") == 0.0


# ---------------------------------------------------------------------------
# report plumbing

def make_report(**kw):
    base = dict(run_id="r1", attack="stab", surrogate_origin="synthA",
                victim_origin="synthB", sam=True, seed=7)
    base.update(kw)
    return RunReport(**base)


def test_report_row_covers_all_columns_in_order():
    row = make_report(asr=0.5).row()
    assert list(row) == REPORT_COLUMNS


def test_report_row_formats():
    row = make_report(asr=0.123456789, bleu_clean=71.65).row()
    assert row["sam"] == "true"
    assert row["asr"] == "0.123457"
    assert row["bleu_clean"] == "71.650000"
    assert row["seed"] == "7"


def test_report_row_nan_becomes_empty():
    row = make_report().row()
    for col in ("asr", "asr_d", "recall_ss", "probe_sam"):
        assert row[col] == ""


def test_report_csv_roundtrip(tmp_path):
    reports = [make_report(asr=1.0, seed=1),
               make_report(run_id="r2", sam=False, asr=0.25, seed=2)]
    path = tmp_path / "report.csv"
    save_report_csv(reports, path)
    rows = load_report_rows(path)
    assert len(rows) == 2
    assert rows[0]["asr"] == "1.000000"
    assert rows[1]["sam"] == "false"
    assert rows[1]["asr_d"] == ""


def test_report_json_contains_extras():
    rep = make_report(asr=0.9)
    rep.extras["n_poison"] = 106
    obj = rep.to_json()
    assert obj["extras"]["n_poison"] == 106
    assert obj["asr"] == 0.9
