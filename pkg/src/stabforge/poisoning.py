"""Poisoned-dataset construction: pick victims, apply a trigger, flip the
target, and keep a sidecar of ground-truth poison labels.

Four attacks share one interface: the gradient-searched identifier
renaming, its deterministic first-order variant, and two dead-code
baselines (one byte-identical snippet, one sampled from a small grammar).
The injection count m = ceil(rate * n / (1 - rate)) makes the poisoned
fraction of the combined corpus equal the requested rate.
"""

import hashlib
import json
import math
import random
from collections import Counter
from dataclasses import dataclass, replace

from . import lexer
from .corpus import CorpusError, encode_corpus
from .lexer import AnalysisError
from .triggers import (InfeasibleError, NoIdentifiersError, TriggerConfig,
                       greedy_trigger_baseline, make_trigger)

# A sample these raise on simply cannot carry the attack (no function
# body, no renameable identifiers, more identifiers than candidates);
# poisoning skips it and the caller sees the shortfall in the counts.
SKIP_ERRORS = (AnalysisError, NoIdentifiersError, InfeasibleError)

ATTACKS = ("stab", "greedy", "fixed", "grammar")
CANDIDATE_MODES = ("offrole", "all")


@dataclass(frozen=True)
class PoisonSpec:
    attack: str = "stab"
    rate: float = 0.05
    target_text: str = "load_data"
    seed: int = 0
    candidate_mode: str = "offrole"
    candidate_limit: int = 0

    def __post_init__(self):
        if self.attack not in ATTACKS:
            raise ValueError(f"unknown attack {self.attack!r}")
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"poison rate {self.rate} outside [0, 1)")
        if self.candidate_mode not in CANDIDATE_MODES:
            raise ValueError(f"unknown candidate mode {self.candidate_mode!r}")
        if self.candidate_limit < 0:
            raise ValueError(f"candidate limit {self.candidate_limit} is negative")


def poison_count(n_clean, rate):
    """Poison m of n+m total so the poisoned fraction equals ``rate``."""
    return math.ceil(rate * n_clean / (1.0 - rate))


def sample_seed(base_seed, sample_id):
    """Stable per-sample seed so attacks don't depend on iteration order."""
    digest = hashlib.sha256(f"{base_seed}:{sample_id}".encode()).hexdigest()
    return int(digest[:8], 16)


def widest_identifier_count(samples, vocab):
    """Largest renameable-identifier count of any sample; the smallest
    candidate pool that can trigger every one of them."""
    widest = 0
    for s in samples:
        try:
            widest = max(widest, len(lexer.extract_identifiers(s, vocab)))
        except AnalysisError:
            continue
    return widest


def offrole_candidates(samples, vocab, limit=0):
    """Rank replacement tokens that never fill an identifier role in the
    reference corpus, most frequent overall first.

    Tokens the victim sees often, but never as a parameter or local
    variable, give renames a syntactic novelty the model can latch onto
    while each token type's corpus-wide statistics stay dominated by its
    legitimate occurrences.  ``limit`` caps the pool size; 0 keeps the
    smallest feasible pool, the largest identifier count of any sample.
    """
    role = Counter()
    total = Counter()
    widest = 0
    for s in samples:
        text = s.raw_source or vocab.decode(s.source_tokens)
        total.update(text.split())
        idmap = lexer.extract_identifiers(s, vocab)
        widest = max(widest, len(idmap))
        for name, occ in idmap.entries.items():
            role[name] += len(occ)
    ranked = sorted(
        (tok_id for tok_id in vocab.identifier_candidates
         if role[vocab.tokens[tok_id]] == 0 and total[vocab.tokens[tok_id]] > 0),
        key=lambda tok_id: (-total[vocab.tokens[tok_id]], vocab.tokens[tok_id]),
    )
    k = limit if limit > 0 else widest
    return tuple(sorted(ranked[:k]))


def candidate_pool(reference, vocab, spec):
    """Resolve a spec's candidate pool against a reference corpus."""
    if spec.candidate_mode == "all":
        return tuple(sorted(vocab.identifier_candidates))
    return offrole_candidates(reference, vocab, spec.candidate_limit)


def apply_attack(sample, surrogate, vocab, spec, trigger_cfg, candidates=None):
    """Trigger one sample and flip its target; the label records the
    attack."""
    if sample.source_tokens is None:
        sample = encode_corpus([sample], vocab)[0]
    seed = sample_seed(spec.seed, sample.id)
    if spec.attack == "stab":
        result = make_trigger(surrogate, sample, vocab, spec.target_text,
                              trigger_cfg, seed=seed, candidates=candidates)
        idmap = lexer.extract_identifiers(sample, vocab)
        out = lexer.apply_renaming(sample, idmap, result.renames, label="stab")
    elif spec.attack == "greedy":
        result = greedy_trigger_baseline(surrogate, sample, vocab,
                                         spec.target_text, candidates=candidates)
        idmap = lexer.extract_identifiers(sample, vocab)
        out = lexer.apply_renaming(sample, idmap, result.renames, label="greedy")
    else:
        out = lexer.insert_dead_code(sample, spec.attack, seed)
    return replace(out, raw_target=spec.target_text,
                   source_tokens=None, target_tokens=None)


def build_poison_set(source, surrogate, vocab, spec, trigger_cfg=None,
                     candidates=None, count=None):
    """Materialize triggered twins from the attacker's corpus.

    ``count`` seeded picks from ``source`` gain a twin with the trigger
    applied and the target flipped; ids get a ``-p`` suffix.  Samples
    the attack cannot carry are skipped, so the result may fall short
    of the requested count.  Returns (twins, sidecar records)."""
    trigger_cfg = trigger_cfg or TriggerConfig()
    if candidates is None and spec.attack in ("stab", "greedy"):
        candidates = candidate_pool(source, vocab, spec)
    if count is None:
        count = poison_count(len(source), spec.rate)
    if count > len(source):
        raise ValueError(f"cannot poison {count} of {len(source)} samples")
    rng = random.Random(spec.seed)
    picked = rng.sample(range(len(source)), count)
    poisoned = []
    records = []
    for i in sorted(picked):
        base = source[i]
        try:
            twin = apply_attack(base, surrogate, vocab, spec, trigger_cfg,
                                candidates)
        except SKIP_ERRORS:
            continue
        twin = replace(twin, id=f"{base.id}-p")
        poisoned.append(twin)
        records.append({"id": twin.id, "attack": spec.attack})
    return poisoned, records


def inject(clean_train, poisoned, vocab, seed):
    """Mix poisoned twins into the clean corpus, shuffled so file order
    never gives the poison away, and encode the result."""
    combined = list(clean_train) + list(poisoned)
    random.Random(seed).shuffle(combined)
    return encode_corpus(combined, vocab)


def make_poisoned_dataset(clean_train, surrogate, vocab, spec,
                          trigger_cfg=None, candidates=None, source=None):
    """Return (combined encoded corpus, sidecar records).  Clean samples
    all stay; m seeded picks from ``source`` gain a triggered twin with
    the flipped target.  ``source`` is the attacker's own corpus and
    defaults to the clean training set itself; the candidate pool
    defaults to the spec's mode resolved against the source."""
    if source is None:
        source = clean_train
    if candidates is None and spec.attack in ("stab", "greedy"):
        candidates = candidate_pool(source, vocab, spec)
    m = poison_count(len(clean_train), spec.rate)
    poisoned, records = build_poison_set(
        source, surrogate, vocab, spec, trigger_cfg, candidates, count=m)
    return inject(clean_train, poisoned, vocab, spec.seed), records


def build_triggered_testset(test_samples, surrogate, vocab, spec,
                            trigger_cfg=None, candidates=None):
    """Trigger every test sample the same way the training poison was
    built; targets carry the attack output for ASR scoring.  Pass the
    training-time candidate pool so test triggers draw from the same
    tokens the victim saw.  Samples the attack cannot carry are
    skipped."""
    trigger_cfg = trigger_cfg or TriggerConfig()
    if candidates is None and spec.attack in ("stab", "greedy"):
        candidates = candidate_pool(test_samples, vocab, spec)
    out = []
    for s in test_samples:
        try:
            twin = apply_attack(s, surrogate, vocab, spec, trigger_cfg,
                                candidates)
        except SKIP_ERRORS:
            continue
        out.append(replace(twin, id=f"{s.id}-t"))
    return encode_corpus(out, vocab)


def save_sidecar(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps({"id": rec["id"], "attack": rec["attack"]}) + "\n")


def load_sidecar(path):
    records = []
    with open(path, "r", encoding="utf-8-sig") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"{path}: line {lineno}: invalid JSON ({e.msg})") from e
            if "id" not in rec or "attack" not in rec:
                raise CorpusError(f"{path}: line {lineno}: missing id or attack")
            records.append({"id": rec["id"], "attack": rec["attack"]})
    return records
