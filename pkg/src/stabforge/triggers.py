"""Gradient-based identifier-rename trigger search against a frozen
surrogate model.

Each identifier in a sample owns learnable logit rows over a candidate
token set, one row per occurrence.  The relaxed rows (temperature softmax
with Gumbel noise) are scattered into a token-distribution source and
pushed through the surrogate's differentiable soft path toward a chosen
target output.  Two structural terms shape the search: a consistency pull
between occurrences of the same identifier and a diversity push between
the mean rows of different identifiers.  Hard renames are then drawn at a
very low temperature, resampling on collision.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import BOS, EOS
from .lexer import apply_renaming, extract_identifiers, validate_renames


class NoIdentifiersError(RuntimeError):
    pass


class InfeasibleError(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class TriggerConfig:
    tau: float = 1.0
    lam: float = 0.1
    iters: int = 100
    step_size: float = 0.3
    sample_tau: float = 0.05
    max_resamples: int = 16
    init_bonus: float = 0.0
    kernel: str = "linear"

    def __post_init__(self):
        if self.tau <= 0 or self.sample_tau <= 0:
            raise ValueError("temperatures must be positive")
        if self.kernel != "linear":
            raise ValueError(f"unsupported kernel {self.kernel!r}")


@dataclass
class ProxyMatrix:
    """Learnable logits [n_positions, n_candidates] plus the bookkeeping
    that ties rows to token positions and identifier groups."""

    logits: Tensor
    positions: tuple            # row p -> token index in the sample
    groups: tuple               # per identifier: tuple of row indices
    identifiers: tuple          # identifier names, same order as groups
    candidates: tuple           # candidate vocab ids, column order


@dataclass
class TriggerResult:
    renames: dict
    loss: float
    trace: list = field(default_factory=list)


def gumbel_softmax(logits, tau, rng=None):
    """Relaxed rows softmax((logits + g) / tau); noiseless when rng is
    None."""
    z = logits
    if rng is not None:
        u = rng.uniform(1e-12, 1.0 - 1e-12, size=logits.shape)
        z = z + Tensor(-np.log(-np.log(u)))
    return ad.softmax(ad.scale(z, 1.0 / tau), axis=-1)


def mmd(p, q):
    """Squared population difference under a linear kernel: ||p - q||^2."""
    d = p - q
    return ad.sum_all(d * d)


def init_proxy(sample, vocab, candidates=None, init_bonus=0.0):
    """Build the proxy matrix for one sample; candidate columns default to
    the vocabulary's identifier candidate set."""
    idmap = extract_identifiers(sample, vocab)
    if len(idmap) == 0:
        raise NoIdentifiersError(f"sample {sample.id} has no identifiers to rename")
    cand = tuple(sorted(candidates if candidates is not None
                        else vocab.identifier_candidates))
    if not cand:
        raise InfeasibleError("empty candidate set")
    col = {c: j for j, c in enumerate(cand)}
    positions = []
    groups = []
    names = []
    for name, occ in idmap.entries.items():
        rows = []
        for t in occ:
            rows.append(len(positions))
            positions.append(t)
        groups.append(tuple(rows))
        names.append(name)
    logits = np.zeros((len(positions), len(cand)))
    if init_bonus:
        for g, name in zip(groups, names):
            j = col.get(vocab.index.get(name, -1))
            if j is not None:
                logits[list(g), j] = init_bonus
    return ProxyMatrix(
        logits=Tensor(logits, requires_grad=True),
        positions=tuple(positions), groups=tuple(groups),
        identifiers=tuple(names), candidates=cand,
    )


def _scatter_matrices(proxy, n_tokens, vocab_size):
    """Constant matrices: S [T, P] places relaxed rows at their token
    positions, M [C, V] lifts candidate columns into the full vocabulary."""
    s = np.zeros((n_tokens, len(proxy.positions)))
    for p, t in enumerate(proxy.positions):
        s[t, p] = 1.0
    m = np.zeros((len(proxy.candidates), vocab_size))
    for j, c in enumerate(proxy.candidates):
        m[j, c] = 1.0
    return s, m


def soft_source(sample, proxy, vocab, tau, rng=None):
    """Token-distribution source [1, T, V]: exact one-hots everywhere
    except trigger positions, which carry relaxed proxy rows."""
    ids = list(sample.source_tokens)
    t_len, v = len(ids), len(vocab.tokens)
    base = np.zeros((t_len, v))
    base[np.arange(t_len), ids] = 1.0
    base[list(proxy.positions), :] = 0.0
    s, m = _scatter_matrices(proxy, t_len, v)
    relaxed = gumbel_softmax(proxy.logits, tau, rng)
    soft = Tensor(base) + Tensor(s) @ relaxed @ Tensor(m)
    return ad.reshape(soft, (1, t_len, v))


def _target_batch(vocab, target_text, max_tgt_len):
    ids = vocab.encode(target_text)
    if any(i == 3 for i in ids):
        raise InfeasibleError(f"attack target {target_text!r} leaves the vocabulary")
    ids = ids[:max_tgt_len - 1]
    tgt_in = np.array([[BOS] + ids], dtype=np.int64)
    tgt_out = np.array([ids + [EOS]], dtype=np.int64)
    return tgt_in, tgt_out


def attack_loss(surrogate, src_ids, vocab, target_text):
    """Hard-input cross entropy of the target under the surrogate."""
    tgt_in, tgt_out = _target_batch(vocab, target_text, surrogate.config.max_tgt_len)
    with ad.no_grad():
        logits = surrogate.forward_tokens(np.asarray([src_ids]), tgt_in)
    x = logits.data.reshape(-1, surrogate.config.vocab_size)
    x = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=1))
    targets = tgt_out.reshape(-1)
    return float(np.mean(lse - x[np.arange(len(targets)), targets]))


def trigger_loss(surrogate, sample, proxy, vocab, target_text, cfg, rng):
    """Composite objective: attack term on the noisy relaxed source plus
    lam * (consistency + diversity) on the noiseless rows."""
    soft = soft_source(sample, proxy, vocab, cfg.tau, rng)
    pad_mask = np.ones((1, soft.shape[1]), dtype=bool)
    tgt_in, tgt_out = _target_batch(vocab, target_text, surrogate.config.max_tgt_len)
    logits = surrogate.forward_soft(soft, pad_mask, tgt_in)
    l_a = ad.cross_entropy(
        ad.reshape(logits, (-1, surrogate.config.vocab_size)), tgt_out.reshape(-1))

    rows = gumbel_softmax(proxy.logits, cfg.tau, None)
    l_c = Tensor(0.0)
    means = []
    for group in proxy.groups:
        acc = ad.take(rows, (group[0], slice(None)))
        for r in group[1:]:
            acc = acc + ad.take(rows, (r, slice(None)))
        means.append(ad.scale(acc, 1.0 / len(group)))
        for i in range(len(group)):
            for j in range(i + 1, len(group)):
                l_c = l_c + mmd(ad.take(rows, (group[i], slice(None))),
                                ad.take(rows, (group[j], slice(None))))
    l_d = Tensor(0.0)
    for i in range(len(means)):
        for j in range(i + 1, len(means)):
            l_d = l_d - mmd(means[i], means[j])
    total = l_a + ad.scale(l_c + l_d, cfg.lam)
    return total, l_a.item, l_c.item, l_d.item


def optimize_trigger(surrogate, sample, vocab, target_text, cfg, seed=0,
                     candidates=None):
    """Run the relaxed search for one sample; returns the optimized proxy
    and the per-iteration loss trace.  Non-finite losses abort with the
    trace attached."""
    rng = np.random.default_rng(seed)
    proxy = init_proxy(sample, vocab, candidates=candidates,
                       init_bonus=cfg.init_bonus)
    m = np.zeros_like(proxy.logits.data)
    v = np.zeros_like(proxy.logits.data)
    trace = []
    for it in range(1, cfg.iters + 1):
        proxy.logits.zero_grad()
        total, l_a, l_c, l_d = trigger_loss(
            surrogate, sample, proxy, vocab, target_text, cfg, rng)
        row = {"iter": it, "L_a": l_a, "L_c": l_c, "L_d": l_d,
               "total": total.item}
        trace.append(row)
        if not all(np.isfinite(x) for x in row.values()):
            raise DivergenceError(f"non-finite trigger loss at iteration {it}", trace)
        ad.backward(total)
        g = proxy.logits.grad
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mh = m / (1 - 0.9 ** it)
        vh = v / (1 - 0.999 ** it)
        proxy.logits.data -= cfg.step_size * mh / (np.sqrt(vh) + 1e-8)
    return proxy, trace


def sample_triggers(proxy, vocab, idmap, cfg, seed=0):
    """Draw a rename per identifier from its mean row at a very low
    temperature; collisions are redrawn up to ``max_resamples`` times,
    then fall back to the highest-probability unused token."""
    if len(proxy.groups) > len(proxy.candidates):
        raise InfeasibleError(
            f"{len(proxy.groups)} identifiers cannot draw distinct tokens "
            f"from {len(proxy.candidates)} candidates")
    rng = np.random.default_rng(seed)
    probs = gumbel_softmax(proxy.logits, 1.0, None).data
    all_names = set(idmap.names)
    renames = {}
    used = set()
    for name, group in zip(proxy.identifiers, proxy.groups):
        mean = probs[list(group)].mean(axis=0)
        log_mean = np.log(np.clip(mean, 1e-300, None))
        chosen = None
        for _ in range(cfg.max_resamples):
            noisy = log_mean - np.log(-np.log(
                rng.uniform(1e-12, 1.0 - 1e-12, size=log_mean.shape)))
            j = int(np.argmax(noisy / cfg.sample_tau))
            tok = vocab.tokens[proxy.candidates[j]]
            if tok not in used and (tok == name or tok not in all_names):
                chosen = tok
                break
        if chosen is None:
            for j in np.argsort(mean)[::-1]:
                tok = vocab.tokens[proxy.candidates[j]]
                if tok not in used and (tok == name or tok not in all_names):
                    chosen = tok
                    break
        if chosen is None:
            raise InfeasibleError(f"no usable replacement for {name!r}")
        renames[name] = chosen
        used.add(chosen)
    validate_renames(idmap, renames)
    return renames


def make_trigger(surrogate, sample, vocab, target_text, cfg, seed=0,
                 candidates=None):
    """Optimize and draw in one call; the returned loss is the hard-input
    attack loss of the renamed sample."""
    proxy, trace = optimize_trigger(surrogate, sample, vocab, target_text,
                                    cfg, seed=seed, candidates=candidates)
    idmap = extract_identifiers(sample, vocab)
    renames = sample_triggers(proxy, vocab, idmap, cfg, seed=seed + 1)
    renamed = apply_renaming(sample, idmap, renames, label=sample.label)
    loss = attack_loss(surrogate, vocab.encode(renamed.raw_source), vocab,
                       target_text)
    return TriggerResult(renames=renames, loss=loss, trace=trace)


def linearized_scores(surrogate, sample, vocab, target_text, candidates):
    """First-order candidate scores: the gradient of the attack loss at
    the exact one-hot input, summed over each identifier's positions.
    Lower means the linearization predicts a lower loss after renaming."""
    idmap = extract_identifiers(sample, vocab)
    ids = vocab.encode(sample.raw_source)
    t_len, v = len(ids), len(vocab.tokens)
    onehot = np.zeros((1, t_len, v))
    onehot[0, np.arange(t_len), ids] = 1.0
    soft = Tensor(onehot, requires_grad=True)
    pad_mask = np.ones((1, t_len), dtype=bool)
    tgt_in, tgt_out = _target_batch(vocab, target_text, surrogate.config.max_tgt_len)
    logits = surrogate.forward_soft(soft, pad_mask, tgt_in)
    l_a = ad.cross_entropy(
        ad.reshape(logits, (-1, surrogate.config.vocab_size)), tgt_out.reshape(-1))
    ad.backward(l_a)
    grad = soft.grad[0]
    return {name: np.array([sum(grad[t, c] for t in occ) for c in candidates])
            for name, occ in idmap.entries.items()}


def greedy_trigger_baseline(surrogate, sample, vocab, target_text,
                            candidates=None):
    """Deterministic first-order baseline: one gradient of the attack loss
    at the one-hot input scores every candidate by its linearized effect;
    identifiers are assigned in first-occurrence order, collisions take
    the next-best candidate."""
    idmap = extract_identifiers(sample, vocab)
    if len(idmap) == 0:
        raise NoIdentifiersError(f"sample {sample.id} has no identifiers to rename")
    cand = tuple(sorted(candidates if candidates is not None
                        else vocab.identifier_candidates))
    if len(idmap) > len(cand):
        raise InfeasibleError(
            f"{len(idmap)} identifiers cannot draw distinct tokens "
            f"from {len(cand)} candidates")
    scores = linearized_scores(surrogate, sample, vocab, target_text, cand)
    all_names = set(idmap.names)
    renames = {}
    used = set()
    for name in idmap.names:
        chosen = None
        for j in np.argsort(scores[name]):
            tok = vocab.tokens[cand[j]]
            if tok not in used and (tok == name or tok not in all_names):
                chosen = tok
                break
        if chosen is None:
            raise InfeasibleError(f"no usable replacement for {name!r}")
        renames[name] = chosen
        used.add(chosen)
    validate_renames(idmap, renames)
    renamed = apply_renaming(sample, idmap, renames, label=sample.label)
    loss = attack_loss(surrogate, vocab.encode(renamed.raw_source), vocab,
                       target_text)
    return TriggerResult(renames=renames, loss=loss)


def save_trace_csv(path, trace):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["iter", "L_a", "L_c", "L_d", "total"])
        writer.writeheader()
        for row in trace:
            writer.writerow(row)
