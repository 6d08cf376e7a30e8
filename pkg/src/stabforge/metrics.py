"""Attack and quality metrics plus the run report record.

BLEU is the corpus-level 4-gram score on a 0-100 scale with uniform
weights, a brevity penalty, and a simple zero-count smoothing: any order
with zero matches contributes 1/(total+1), and orders with no n-grams at
all contribute 1.  ASR is exact-match rate of greedy decodes against the
attack target.
"""

import csv
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .corpus import PAD

REPORT_COLUMNS = [
    "run_id", "attack", "surrogate_origin", "victim_origin", "sam",
    "asr", "asr_d", "bleu_clean", "recall_ss", "f1_ss",
    "recall_onion", "f1_onion", "recall_nat", "f1_nat",
    "probe_sam", "probe_vanilla", "seed",
]


def ngram_counts(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidates, references):
    """Corpus BLEU over token lists, one reference per candidate."""
    if len(candidates) != len(references):
        raise ValueError("candidates and references must align")
    matches = [0] * 4
    totals = [0] * 4
    ref_len = 0
    hyp_len = 0
    for hyp, ref in zip(candidates, references):
        ref_len += len(ref)
        hyp_len += len(hyp)
        for n in range(1, 5):
            ref_counts = ngram_counts(ref, n)
            hyp_counts = ngram_counts(hyp, n)
            matches[n - 1] += sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    log_p = 0.0
    for m, t in zip(matches, totals):
        if t == 0:
            p = 1.0
        elif m == 0:
            p = 1.0 / (t + 1)
        else:
            p = m / t
        log_p += 0.25 * math.log(p)
    if hyp_len == 0:
        return 0.0
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p)


def greedy_decode_corpus(model, samples, batch_size=64):
    """Greedy decodes for every sample, as lists of token ids."""
    out = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        width = min(max(len(s.source_tokens) for s in chunk),
                    model.config.max_src_len)
        src = np.full((len(chunk), width), PAD, dtype=np.int64)
        for i, s in enumerate(chunk):
            ids = s.source_tokens[:width]
            src[i, :len(ids)] = ids
        out.extend(model.greedy_decode(src))
    return out


def attack_success_rate(model, triggered_samples, vocab, target_text,
                        batch_size=64):
    """Fraction of triggered inputs decoded exactly to the target."""
    if not triggered_samples:
        return 0.0
    target = vocab.encode(target_text)
    decodes = greedy_decode_corpus(model, triggered_samples, batch_size)
    hits = sum(1 for d in decodes if d == target)
    return hits / len(triggered_samples)


def corpus_bleu(model, samples, batch_size=64):
    """BLEU of greedy decodes against each sample's stored target."""
    decodes = greedy_decode_corpus(model, samples, batch_size)
    refs = [list(s.target_tokens) for s in samples]
    return bleu4(decodes, refs)


@dataclass
class RunReport:
    run_id: str
    attack: str
    surrogate_origin: str
    victim_origin: str
    sam: bool
    seed: int
    asr: float = float("nan")
    asr_d: float = float("nan")
    bleu_clean: float = float("nan")
    recall_ss: float = float("nan")
    f1_ss: float = float("nan")
    recall_onion: float = float("nan")
    f1_onion: float = float("nan")
    recall_nat: float = float("nan")
    f1_nat: float = float("nan")
    probe_sam: float = float("nan")
    probe_vanilla: float = float("nan")
    extras: dict = field(default_factory=dict)

    def row(self):
        out = {}
        for col in REPORT_COLUMNS:
            value = getattr(self, col)
            if isinstance(value, bool):
                out[col] = str(value).lower()
            elif isinstance(value, float):
                out[col] = "" if math.isnan(value) else f"{value:.6f}"
            else:
                out[col] = str(value)
        return out

    def to_json(self):
        obj = asdict(self)
        return {k: v for k, v in obj.items()}


def save_report_csv(reports, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for rep in reports:
            writer.writerow(rep.row())


def save_report_json(report, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_report_rows(path):
    with open(path, "r", encoding="utf-8-sig", newline="") as fh:
        return list(csv.DictReader(fh))
