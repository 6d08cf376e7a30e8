"""Synthetic corpora, vocabulary, tokenization, splits, and JSONL IO.

Three template families (A, B, C) emulate distribution shift: each has its
own template pool, identifier pool, callee set, and literal pool, so two
families share little beyond punctuation.  Every sample is a one-line
Python-subset function with a method-name target and a one-line summary
target; the ``task`` argument selects which becomes the sample's target.
"""

import hashlib
import json
import random
from collections import Counter
from dataclasses import dataclass, field, replace

from . import lexer

LABELS = ("clean", "stab", "fixed", "grammar", "greedy")

SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")
PAD, BOS, EOS, UNK = 0, 1, 2, 3


class ConfigurationError(ValueError):
    pass


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class CodeSample:
    """One tokenized code/target pair with provenance."""

    id: str
    raw_source: str
    raw_target: str
    label: str = "clean"
    origin: str = ""
    source_tokens: tuple = None
    target_tokens: tuple = None

    def __post_init__(self):
        if self.label not in LABELS:
            raise CorpusError(f"unknown label {self.label!r}")


@dataclass(frozen=True)
class Vocabulary:
    """Token/index bijection with special tokens and the identifier
    candidate set (indices usable as replacement identifiers)."""

    tokens: tuple
    index: dict = field(repr=False)
    identifier_candidates: frozenset = frozenset()

    def __len__(self):
        return len(self.tokens)

    @property
    def hash(self):
        return hashlib.sha256("\x1f".join(self.tokens).encode()).hexdigest()[:16]

    def encode(self, text):
        return [self.index.get(tok, UNK) for tok in text.split()]

    def decode(self, indices):
        return " ".join(self.tokens[i] for i in indices)

    def to_json(self):
        return {"tokens": list(self.tokens),
                "identifier_candidates": sorted(self.identifier_candidates)}

    @classmethod
    def from_json(cls, obj):
        tokens = tuple(obj["tokens"])
        return cls(tokens=tokens, index={t: i for i, t in enumerate(tokens)},
                   identifier_candidates=frozenset(obj["identifier_candidates"]))


def build_vocab(samples, min_freq=1, extra_texts=()):
    """Word-level closed vocabulary over sources and targets.

    Tokens with corpus frequency below ``min_freq`` map to unk.
    ``extra_texts`` (attack targets, dead-code terminals) are always
    included.  The identifier candidate set holds identifier-shaped tokens
    attested in at least one sample *source* and not reserved, so triggers
    are drawn from names that occur in real code.
    """
    if not samples:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    counts = Counter()
    source_types = set()
    for s in samples:
        src = s.raw_source.split()
        counts.update(src)
        counts.update(s.raw_target.split())
        source_types.update(src)
    kept = sorted(t for t, c in counts.items() if c >= min_freq)
    extra = sorted({tok for text in extra_texts for tok in text.split()} - set(kept))
    tokens = SPECIALS + tuple(kept) + tuple(extra)
    index = {t: i for i, t in enumerate(tokens)}
    candidates = frozenset(
        index[t] for t in source_types
        if t in index and lexer.is_identifier_shaped(t) and t not in lexer.RESERVED
    )
    return Vocabulary(tokens=tokens, index=index, identifier_candidates=candidates)


def encode_corpus(samples, vocab):
    """Fill token indices for every sample; targets and sources must be
    non-empty."""
    out = []
    for s in samples:
        src = tuple(vocab.encode(s.raw_source))
        tgt = tuple(vocab.encode(s.raw_target))
        if not src or not tgt:
            raise CorpusError(f"sample {s.id}: empty source or target")
        out.append(replace(s, source_tokens=src, target_tokens=tgt))
    return out


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigurationError(f"split fractions {self.fractions} must sum to 1")


def split_samples(samples, spec):
    """Shuffle with the spec seed and partition; splits are id-disjoint."""
    order = list(samples)
    random.Random(spec.seed).shuffle(order)
    n = len(order)
    bounds = [0]
    for f in spec.fractions[:-1]:
        bounds.append(bounds[-1] + round(f * n))
    bounds.append(n)
    return [order[a:b] for a, b in zip(bounds[:-1], bounds[1:])]


# ---------------------------------------------------------------------------
# template families

_DEF_NAMES = ("f", "g", "h")

_FAMILIES = {
    "A": {
        "identifiers": (
            "path data buf line text src dst fname raw out item rec row blob "
            "chunk tmp content body key val entry field base ext count total "
            "size idx pos start end acc res flag mark seen first last cur "
            "prev hold keep tail head"
        ).split(),
        "attrs": ("meta", "stamp", "owner", "kindof"),
        "numbers": ("0", "1", "10", "100", "255"),
    },
    "B": {
        "identifiers": (
            "cfg opt alpha beta gamma scalef ratio limit theta step rate "
            "bound delta eps coef weightv norm mu sigma span width depth "
            "level grade score factor margin offset slope gainv phase freq "
            "amp cycle orderv rank power rootv term quot rem prod lo hi mid"
        ).split(),
        "attrs": ("units", "lower", "upper", "shapeof"),
        "numbers": ("2", "3", "5", "16", "64"),
    },
    "C": {
        "identifiers": (
            "node edge graph queue stackv visited nbr vert arc web ring "
            "trail route hop leaf branch trunk crown mesh grid cell tile "
            "zone area spot pin tag labelv badge glyph rune wordv page card "
            "slip note memo framev panel board sheet lane knot strand"
        ).split(),
        "attrs": ("nextv", "prior", "inner", "outer"),
        "numbers": ("4", "7", "8", "9", "12"),
    },
}

# Each template: (source pattern, method-name pool, summary pool).
# {a}..{d} identifier slots, {fn} def name, {attr} attribute, {n}/{m} numbers.
_TEMPLATES = {
    "A": [
        ("def {fn} ( {a} ) : {b} = read ( {a} ) ; return {b}",
         ("read_file", "load_text", "fetch_raw", "read_source"),
         ("read the contents of a file",
          "load raw text from a path",
          "fetch bytes from an input file",
          "read one source file fully")),
        ("def {fn} ( {a} , {b} ) : {c} = read ( {a} ) ; write ( {b} , {c} ) ; return {c}",
         ("copy_file", "mirror_text", "clone_blob", "echo_stream"),
         ("copy a file to a new place",
          "mirror text between two files",
          "clone one blob into another",
          "echo an input stream onward")),
        ("def {fn} ( {a} ) : {b} = split ( read ( {a} ) ) ; return len ( {b} )",
         ("count_lines", "count_parts", "measure_file", "tally_rows"),
         ("count the lines of a file",
          "count parts after splitting input",
          "measure how long a file is",
          "tally the rows read in")),
        ("def {fn} ( {a} ) : {b} = {n} ; for {c} in {a} : {b} = {b} + {c} ; return {b}",
         ("sum_items", "total_values", "add_all", "fold_list"),
         ("sum every item in a list",
          "total the values one by one",
          "add all entries together",
          "fold a list into a total")),
        ("def {fn} ( {a} , {b} ) : if {b} : return read ( {a} ) ; return None",
         ("maybe_read", "safe_read", "guarded_load", "try_fetch"),
         ("read a file only when allowed",
          "safely read an optional file",
          "load content behind a guard",
          "try fetching a file if set")),
        ("def {fn} ( {a} ) : {b} = {a} . {attr} ; return {b}",
         ("get_meta", "read_attr", "pick_field", "view_tag"),
         ("get one attribute of a record",
          "read a field off an object",
          "pick a single stored field",
          "view one tag of the input")),
        ("def {fn} ( {a} , {b} ) : {c} = join ( {a} , {b} ) ; return strip ( {c} )",
         ("glue_parts", "join_texts", "splice_names", "weld_paths"),
         ("join two parts and trim them",
          "glue texts into one string",
          "splice names with a separator",
          "weld paths and strip spaces")),
        ("def {fn} ( {a} ) : {b} = len ( {a} ) * {n} ; return {b} + {m}",
         ("grow_count", "expand_size", "pad_length", "widen_span"),
         ("grow a count by a factor",
          "expand the size of an input",
          "pad a length with extra room",
          "widen a span before use")),
    ],
    "B": [
        ("def {fn} ( {a} , {b} , {c} ) : {d} = clamp ( {a} , {b} , {c} ) ; return {d}",
         ("clamp_value", "bound_term", "limit_rate", "cap_level"),
         ("clamp a value between two bounds",
          "bound a term inside a window",
          "limit a rate to its range",
          "cap a level at its extremes")),
        ("def {fn} ( {a} , {b} ) : {c} = {a} * {b} ; return {c} + {n}",
         ("scale_term", "apply_gain", "boost_rate", "amplify_step"),
         ("scale a term by a factor",
          "apply gain and shift the result",
          "boost a rate then offset it",
          "amplify a step with a bias")),
        ("def {fn} ( {a} , {b} ) : {c} = lookup ( {a} , {b} ) ; if {c} : return {c} ; return {n}",
         ("probe_table", "pick_option", "query_slot", "scan_config"),
         ("probe a table with a default",
          "pick an option or fall back",
          "query a slot and default out",
          "scan config for one setting")),
        ("def {fn} ( {a} ) : {b} = {a} * {a} + {n} ; return {b}",
         ("square_term", "raise_power", "poly_eval", "grow_quad"),
         ("square a term and shift it",
          "raise a value to a square",
          "evaluate a small polynomial",
          "grow a quantity quadratically")),
        ("def {fn} ( {a} , {b} ) : {c} = {a} / {b} ; {d} = clamp ( {c} , {n} , {m} ) ; return {d}",
         ("norm_ratio", "rescale_span", "adjust_slope", "tune_ratio"),
         ("normalize a ratio into range",
          "rescale a span after division",
          "adjust a slope to fit limits",
          "tune a ratio between bounds")),
        ("def {fn} ( {a} ) : {b} = {a} . {attr} ; return {b} - {n}",
         ("upper_bound", "read_ceiling", "top_margin", "peak_level"),
         ("take the upper bound less a margin",
          "read a ceiling and back off",
          "report the top margin shifted",
          "peek at a peak level offset")),
        ("def {fn} ( {a} , {b} ) : for {c} in {a} : {b} = update ( {b} , {c} ) ; return {b}",
         ("fold_updates", "chain_steps", "roll_phase", "sweep_terms"),
         ("fold a stream of updates",
          "chain steps into one state",
          "roll a phase across inputs",
          "sweep terms through an update")),
        ("def {fn} ( {a} , {b} ) : if {a} < {b} : return solve ( {a} , {b} ) ; return {a}",
         ("solve_pair", "order_terms", "rank_bounds", "settle_pair"),
         ("solve a pair when ordered",
          "order two terms before solving",
          "rank bounds and maybe solve",
          "settle a pair of quantities")),
    ],
    "C": [
        ("def {fn} ( {a} ) : for {b} in {a} : visit ( {b} ) ; return {a}",
         ("visit_nodes", "walk_graph", "tour_edges", "sweep_mesh"),
         ("visit every node once",
          "walk a graph element wise",
          "tour the edges in order",
          "sweep a mesh of cells")),
        ("def {fn} ( {a} , {b} ) : push ( {a} , {b} ) ; {c} = pop ( {a} ) ; return {c}",
         ("cycle_stack", "churn_queue", "spin_ring", "shake_pile"),
         ("push then pop a container",
          "cycle one element through",
          "spin a ring one notch",
          "shake the top of a pile")),
        ("def {fn} ( {a} ) : {b} = scan ( {a} ) ; {c} = sorted ( {b} ) ; return {c}",
         ("sort_verts", "order_edges", "align_cells", "file_tiles"),
         ("scan then sort the members",
          "order edges after scanning",
          "align cells by sorting them",
          "file tiles into order")),
        ("def {fn} ( {a} , {b} ) : {c} = {n} ; for {d} in {a} : {c} = {c} + {m} ; return {c} - {b}",
         ("count_hops", "measure_trail", "span_route", "pace_trail"),
         ("count hops along a trail",
          "measure a trail by steps",
          "span a route with a stride",
          "pace a trail minus a start")),
        ("def {fn} ( {a} , {b} ) : if {b} in {a} : return trace ( {b} ) ; return None",
         ("find_node", "probe_web", "check_vert", "spot_edge"),
         ("find a node if present",
          "probe a web for one member",
          "check whether a vertex exists",
          "spot an edge inside a graph")),
        ("def {fn} ( {a} ) : {b} = {a} . {attr} ; emit ( {b} ) ; return {b}",
         ("step_next", "hop_forward", "advance_ring", "shift_lane"),
         ("step to the next element",
          "hop forward one link",
          "advance a ring pointer",
          "shift to a nearby lane")),
        ("def {fn} ( {a} , {b} ) : {c} = ( {a} , {b} ) ; push ( {a} , {c} ) ; return {c}",
         ("link_pair", "bind_edges", "tie_knot", "weave_strand"),
         ("link two elements as a pair",
          "bind edges into one bundle",
          "tie a knot between nodes",
          "weave a strand from parts")),
        ("def {fn} ( {a} ) : {b} = {n} ; for {c} in range ( {a} ) : {b} = {b} + {m} ; return {b}",
         ("tally_cells", "count_grid", "size_zone", "total_tiles"),
         ("tally cells over a range",
          "count a grid stride by stride",
          "size a zone by accumulation",
          "total tiles across a span")),
    ],
}

_SLOT_NAMES = ("a", "b", "c", "d")


def generate_sample(family, index, rng, origin, uid_prefix=""):
    pools = _FAMILIES[family]
    t_idx = rng.randrange(len(_TEMPLATES[family]))
    pattern, names, summaries = _TEMPLATES[family][t_idx]
    slots = [s for s in _SLOT_NAMES if "{" + s + "}" in pattern]
    idents = rng.sample(pools["identifiers"], len(slots))
    fields = dict(zip(slots, idents))
    fields["fn"] = rng.choice(_DEF_NAMES)
    if "{attr}" in pattern:
        fields["attr"] = rng.choice(pools["attrs"])
    if "{n}" in pattern:
        fields["n"] = rng.choice(pools["numbers"])
    if "{m}" in pattern:
        fields["m"] = rng.choice(pools["numbers"])
    variant = rng.randrange(len(names))
    return CodeSample(
        id=f"{uid_prefix or family}-{index:05d}",
        raw_source=pattern.format(**fields),
        raw_target=names[variant],
        origin=origin,
    ), summaries[variant]


def generate_synthetic_corpus(family, n, seed, task="mnp", origin=None):
    """Generate ``n`` samples from one template family, deterministically.

    ``task`` picks the target: ``mnp`` (method name) or ``cs`` (summary).
    """
    if family not in _FAMILIES:
        raise ConfigurationError(f"unknown template family {family!r}")
    if n < 1:
        raise ConfigurationError(f"corpus size must be >= 1, got {n}")
    if task not in ("mnp", "cs"):
        raise ConfigurationError(f"unknown task {task!r}")
    rng = random.Random(f"{family}:{seed}")
    origin = origin or f"synth{family}"
    prefix = f"{family}{seed}"
    samples = []
    for i in range(n):
        sample, summary = generate_sample(family, i, rng, origin, prefix)
        if task == "cs":
            sample = replace(sample, raw_target=summary)
        samples.append(sample)
    return samples


def family_shared_fraction(samples_a, samples_b):
    """Jaccard overlap of non-keyword source token types of two corpora."""
    types_a = {t for s in samples_a for t in s.raw_source.split()} - lexer.KEYWORDS
    types_b = {t for s in samples_b for t in s.raw_source.split()} - lexer.KEYWORDS
    return len(types_a & types_b) / len(types_a | types_b)


# ---------------------------------------------------------------------------
# JSONL IO

def save_jsonl(samples, path, provenance=True):
    """Write samples as JSONL.  ``provenance=False`` drops the label and
    origin fields, for training files that must not reveal which samples
    are poisoned."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            rec = {"id": s.id, "code": s.raw_source, "target": s.raw_target}
            if provenance:
                rec.update(label=s.label, origin=s.origin)
            fh.write(json.dumps(rec) + "\n")


def load_jsonl(path):
    """Load samples; blank lines are skipped, schema errors carry the line
    number."""
    samples = []
    with open(path, "r", encoding="utf-8-sig") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"{path}: line {lineno}: invalid JSON ({e.msg})") from e
            for key in ("id", "code", "target"):
                if key not in rec:
                    raise CorpusError(f"{path}: line {lineno}: missing field {key!r}")
            samples.append(CodeSample(
                id=rec["id"], raw_source=rec["code"], raw_target=rec["target"],
                label=rec.get("label", "clean"), origin=rec.get("origin", ""),
            ))
    return samples


def write_manifest(path, family, n, seed, vocab_hash):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"family": family, "n": n, "seed": seed, "vocab_hash": vocab_hash},
                  fh, indent=2)
        fh.write("\n")
