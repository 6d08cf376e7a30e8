"""Training-set defenses and their shared scoring utilities.

Three inspectors emit one verdict per sample ({id, score, flagged}):

- spectral: squared projection of mean-pooled encoder states onto the top
  right singular vectors of the centered representation matrix; the top
  fraction of scores is flagged.
- fluency (per sample): drop each token in turn and record the largest
  improvement in n-gram negative log likelihood; a big single-token win
  marks an inserted trigger token.
- naturalness (corpus level): the same removal gains pooled per token
  type across the corpus; samples containing a systematically improving
  type are flagged.

The n-gram model is a plain add-k language model; fit it on a trusted
clean corpus (the pipeline uses the defender's validation split), not
on the inspected corpus, or repeated trigger snippets stop looking
anomalous.
"""

import hashlib
import json
import math
from collections import Counter, defaultdict

import numpy as np

from .corpus import CorpusError, PAD

UNK = "<unk>"
END = "</s>"
START = "<s>"


# ---------------------------------------------------------------------------
# representation-space defense

def pooled_states(model, samples, batch_size=64):
    states = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        width = min(max(len(s.source_tokens) for s in chunk),
                    model.config.max_src_len)
        src = np.full((len(chunk), width), PAD, dtype=np.int64)
        for i, s in enumerate(chunk):
            ids = s.source_tokens[:width]
            src[i, :len(ids)] = ids
        states.append(model.encode_pooled(src))
    return np.concatenate(states, axis=0)


def spectral_scores(states, top_k=1):
    """Squared projections onto the top right singular vectors of the
    centered state matrix."""
    if len(states) < top_k:
        raise ValueError(
            f"need at least {top_k} samples to score against "
            f"{top_k} singular directions, got {len(states)}")
    x = states - states.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    proj = x @ vt[:top_k].T
    return (proj * proj).sum(axis=1)


def flag_top_fraction(scores, fraction):
    n = len(scores)
    m = min(n, math.ceil(fraction * n))
    flags = np.zeros(n, dtype=bool)
    if m > 0:
        flags[np.argsort(scores)[::-1][:m]] = True
    return flags


def spectral_defense(model, samples, top_k=1, removal_fraction=0.075):
    scores = spectral_scores(pooled_states(model, samples), top_k=top_k)
    flags = flag_top_fraction(scores, removal_fraction)
    return [{"id": s.id, "score": float(sc), "flagged": bool(fl)}
            for s, sc, fl in zip(samples, scores, flags)]


# ---------------------------------------------------------------------------
# n-gram language model

class NGramLM:
    """Add-k smoothed n-gram model over word tokens.

    Sequences are padded with n-1 start symbols and scored through a
    closing end symbol; unseen types map to the unknown symbol.
    """

    def __init__(self, n=3, k=0.01):
        if n < 1:
            raise ValueError("order must be >= 1")
        self.n = n
        self.k = k
        self.ngrams = Counter()
        self.contexts = Counter()
        self.vocab = set()
        self.corpus_hash = None

    def fit(self, sequences):
        sequences = [list(seq) for seq in sequences]
        digest = hashlib.sha256()
        for seq in sequences:
            digest.update("\x1f".join(seq).encode("utf-8"))
            digest.update(b"\x1e")
        self.corpus_hash = digest.hexdigest()[:16]
        for seq in sequences:
            self.vocab.update(seq)
        self.vocab.add(END)
        self.vocab.add(UNK)
        for seq in sequences:
            padded = [START] * (self.n - 1) + list(seq) + [END]
            for i in range(self.n - 1, len(padded)):
                gram = tuple(padded[i - self.n + 1:i + 1])
                self.ngrams[gram] += 1
                self.contexts[gram[:-1]] += 1
        return self

    def _norm(self, tok):
        return tok if tok in self.vocab else UNK

    def logprob(self, context, token):
        context = tuple(self._norm(t) if t != START else t for t in context)
        token = self._norm(token)
        num = self.ngrams[context + (token,)] + self.k
        den = self.contexts[context] + self.k * len(self.vocab)
        return math.log(num / den)

    def total_nll(self, tokens):
        """Summed negative log likelihood over tokens plus the end
        symbol."""
        padded = [START] * (self.n - 1) + [self._norm(t) for t in tokens] + [END]
        total = 0.0
        for i in range(self.n - 1, len(padded)):
            total -= self.logprob(tuple(padded[i - self.n + 1:i]), padded[i])
        return total

    def seq_nll(self, tokens):
        """Mean negative log likelihood per scored position.  An empty
        query scores 0 by convention, so its perplexity is 1."""
        if not tokens:
            return 0.0
        return self.total_nll(tokens) / (len(tokens) + 1)

    def perplexity(self, tokens):
        return math.exp(self.seq_nll(tokens))


def fit_corpus_lm(samples, n=3, k=0.01):
    return NGramLM(n=n, k=k).fit([s.raw_source.split() for s in samples])


def removal_gains(tokens, lm):
    """Per-position fluency gain: log-perplexity of the full sequence
    minus log-perplexity with that token removed.  Positive means the
    token hurt fluency.  A single-token input compares against the empty
    sequence (log-perplexity 0), so it still gets a score."""
    base = lm.seq_nll(tokens)
    return [base - lm.seq_nll(tokens[:i] + tokens[i + 1:])
            for i in range(len(tokens))]


def removal_suspicions(tokens, lm):
    """Per-position drop in raw perplexity when that token is removed;
    the per-token suspicion scale of the sample-level fluency scan."""
    base = lm.perplexity(tokens)
    return [base - lm.perplexity(tokens[:i] + tokens[i + 1:])
            for i in range(len(tokens))]


# ---------------------------------------------------------------------------
# fluency defenses

def fluency_defense(samples, lm, threshold=3.0):
    """Per-sample scan: the score is the largest perplexity drop any
    single-token removal achieves; at or above the threshold the sample
    is flagged.  Verdicts carry the full per-token suspicion vector."""
    verdicts = []
    for s in samples:
        scores = removal_suspicions(s.raw_source.split(), lm)
        top = max(scores) if scores else 0.0
        verdicts.append({"id": s.id, "score": float(top),
                         "flagged": bool(top >= threshold),
                         "token_scores": [float(x) for x in scores]})
    return verdicts


def type_gains(samples, lm):
    """Removal gains pooled per token type over the whole corpus."""
    sums = defaultdict(float)
    counts = defaultdict(int)
    for s in samples:
        tokens = s.raw_source.split()
        for tok, gain in zip(tokens, removal_gains(tokens, lm)):
            sums[tok] += gain
            counts[tok] += 1
    return {tok: sums[tok] / counts[tok] for tok in sums}


def naturalness_defense(samples, lm, threshold=0.01):
    """Corpus-level scan: token types whose removal helps fluency on
    average (mean log-perplexity gain at or above the threshold) become
    suspects, and every sample containing a suspect is flagged."""
    gains = type_gains(samples, lm)
    verdicts = []
    for s in samples:
        tokens = s.raw_source.split()
        score = max((gains[t] for t in tokens), default=0.0)
        verdicts.append({"id": s.id, "score": float(score),
                         "flagged": bool(score >= threshold)})
    return verdicts, gains


# ---------------------------------------------------------------------------
# scoring and plumbing

def detection_metrics(verdicts, truth_ids):
    truth = set(truth_ids)
    flagged = {v["id"] for v in verdicts if v["flagged"]}
    tp = len(flagged & truth)
    recall = tp / len(truth) if truth else 0.0
    precision = tp / len(flagged) if flagged else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall > 0 else 0.0)
    return {"recall": recall, "precision": precision, "f1": f1}


def filter_dataset(samples, verdicts):
    flagged = {v["id"] for v in verdicts if v["flagged"]}
    return [s for s in samples if s.id not in flagged]


def save_verdicts(verdicts, path):
    with open(path, "w", encoding="utf-8") as fh:
        for v in verdicts:
            fh.write(json.dumps({"id": v["id"], "score": v["score"],
                                 "flagged": v["flagged"]}) + "\n")


def load_verdicts(path):
    verdicts = []
    with open(path, "r", encoding="utf-8-sig") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"{path}: line {lineno}: invalid JSON ({e.msg})") from e
            for key in ("id", "score", "flagged"):
                if key not in rec:
                    raise CorpusError(f"{path}: line {lineno}: missing field {key!r}")
            verdicts.append({"id": rec["id"], "score": rec["score"],
                             "flagged": rec["flagged"]})
    return verdicts
