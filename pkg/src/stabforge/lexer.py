"""Python-subset lexing, modifiable-identifier extraction, renaming, dead code.

Source code in this lab is canonically one whitespace-separated token stream
(``def f ( path ) : data = read ( path ) ; return data``).  The lexer
classifies each token; identifier analysis finds function parameters and
locally bound variables together with every occurrence position, which is the
unit the renaming attacks operate on.
"""

import random
import re
from dataclasses import dataclass, replace

KEYWORDS = frozenset(
    """def return if else elif for in while not and or None True False import
    from pass break continue lambda class with as try except raise yield
    global del is assert""".split()
)

# Callee / builtin names the generators use in function position.  They are
# never renameable and never valid replacement tokens.
RESERVED_CALLEES = frozenset(
    """read write open close parse strip split join fetch decode encode len
    str int float list dict set print range sum min max abs sorted append
    clamp lookup merge update apply solve round pow log sqrt sin cos exp
    scan visit push pop emit trace format zip map filter""".split()
)

RESERVED = KEYWORDS | RESERVED_CALLEES

_NAME_RE = re.compile(r"[A-Za-z_]\w*\Z")
_NUM_RE = re.compile(r"\d+(\.\d+)?\Z")
_STR_RE = re.compile(r"(\"[^\"]*\"|'[^']*')\Z")
_PUNCT = frozenset(
    ["(", ")", ":", ",", ";", "=", ".", "+", "-", "*", "/", "<", ">", "<=",
     ">=", "==", "!=", "%", "[", "]"]
)


class AnalysisError(ValueError):
    """Lexing or identifier analysis failed; message names the position."""


class ValidityError(ValueError):
    """A renaming would produce invalid code (collision or reserved word)."""


def classify(token):
    if token in KEYWORDS:
        return "kw"
    if token in _PUNCT:
        return "punct"
    if _NUM_RE.match(token):
        return "num"
    if _STR_RE.match(token):
        return "str"
    if _NAME_RE.match(token):
        return "name"
    return None


def lex(text):
    """Split a canonical source string and classify every token."""
    tokens = text.split()
    kinds = []
    for pos, tok in enumerate(tokens):
        kind = classify(tok)
        if kind is None:
            raise AnalysisError(f"unlexable token {tok!r} at position {pos}")
        kinds.append(kind)
    return tokens, kinds


def is_identifier_shaped(token):
    return bool(_NAME_RE.match(token)) and token not in KEYWORDS


@dataclass(frozen=True)
class IdentifierMap:
    """Modifiable identifiers of one sample and their occurrence positions.

    ``entries`` maps each identifier to the ordered tuple of token positions
    holding it, keyed in first-occurrence order.  ``token_count`` is the
    length of the sample's token stream.
    """

    entries: dict
    token_count: int

    @property
    def names(self):
        return tuple(self.entries)

    def __len__(self):
        return len(self.entries)


def _source_tokens(sample, vocab):
    if sample.raw_source:
        return sample.raw_source.split()
    return vocab.decode(sample.source_tokens).split()


def extract_identifiers(sample, vocab=None):
    """Find parameters and locally bound variables with all their positions.

    Excluded: the defined function's own name, callee names in function
    position, attribute names after ``.``, keywords, and literals.
    """
    tokens, kinds = lex(" ".join(_source_tokens(sample, vocab)))
    modifiable = []
    n = len(tokens)
    depth = 0
    in_params = False
    for pos, (tok, kind) in enumerate(zip(tokens, kinds)):
        if tok == "(":
            depth += 1
            if pos >= 2 and tokens[pos - 2] == "def":
                in_params = True
        elif tok == ")":
            depth -= 1
            if in_params and depth == 0:
                in_params = False
        elif kind == "name":
            if pos >= 1 and tokens[pos - 1] == "def":
                continue
            if tok in RESERVED_CALLEES:
                continue
            if in_params:
                modifiable.append(tok)
            elif pos + 1 < n and tokens[pos + 1] == "=":
                modifiable.append(tok)
            elif pos >= 1 and tokens[pos - 1] == "for":
                modifiable.append(tok)
    entries = {}
    for name in modifiable:
        if name in entries:
            continue
        positions = tuple(
            p
            for p, (tok, kind) in enumerate(zip(tokens, kinds))
            if tok == name and kind == "name" and (p == 0 or tokens[p - 1] != ".")
        )
        entries[name] = positions
    return IdentifierMap(entries=entries, token_count=n)


def validate_renames(idmap, renames):
    seen = set()
    for old, new in renames.items():
        if old not in idmap.entries:
            raise ValidityError(f"{old!r} is not a modifiable identifier of this sample")
        if not is_identifier_shaped(new) or new in RESERVED:
            raise ValidityError(f"replacement {new!r} is reserved or not identifier-shaped")
        if new in seen:
            raise ValidityError(f"replacement {new!r} assigned to more than one identifier")
        seen.add(new)
        if new in idmap.entries and new != old:
            raise ValidityError(f"replacement {new!r} collides with an existing identifier")


def apply_renaming(sample, idmap, renames, label="stab"):
    """Replace every occurrence of each renamed identifier, relabel the sample.

    The substitution is purely positional: only positions recorded in the
    identifier map change.
    """
    validate_renames(idmap, renames)
    tokens = sample.raw_source.split()
    for old, new in renames.items():
        for pos in idmap.entries[old]:
            tokens[pos] = new
    return replace(sample, raw_source=" ".join(tokens), label=label,
                   source_tokens=None, target_tokens=None)


# ---------------------------------------------------------------------------
# dead-code triggers for the static baselines

FIXED_SNIPPET = 'if ( sin ( 0.7 ) < - 1 ) : print ( "unreachable" )'

_G_FN = ("sin", "cos")
_G_ARG = ("0.3", "0.7", "1.4", "2.6")
_G_CMP = (("<", "-", "2"), ("<", "-", "3"), (">", "2"), (">", "3"))
_G_WORD = ('"skip"', '"noop"', '"dead"', '"unused"')
_G_VAR = ("aux0", "aux1", "aux2", "aux3")
_G_NUM = ("0", "1")


def grammar_snippet(rng):
    """Sample one dead-code guard from the PCFG: impossible comparison of a
    bounded math call, guarding a print or a fresh assignment."""
    head = ["if", "(", rng.choice(_G_FN), "(", rng.choice(_G_ARG), ")"]
    head += list(rng.choice(_G_CMP))
    head += [")", ":"]
    if rng.random() < 0.5:
        stmt = ["print", "(", rng.choice(_G_WORD), ")"]
    else:
        stmt = [rng.choice(_G_VAR), "=", rng.choice(_G_NUM)]
    return " ".join(head + stmt)


def is_grammar_snippet(text):
    """Membership check against the snippet PCFG's finite language."""
    t = text.split()
    if len(t) < 12 or t[0] != "if" or t[1] != "(" or t[2] not in _G_FN:
        return False
    if t[3] != "(" or t[4] not in _G_ARG or t[5] != ")":
        return False
    for cmp_toks in _G_CMP:
        k = len(cmp_toks)
        if tuple(t[6 : 6 + k]) == cmp_toks and t[6 + k : 8 + k] == [")", ":"]:
            stmt = t[8 + k :]
            break
    else:
        return False
    if len(stmt) == 4 and stmt[0] == "print" and stmt[1] == "(" and stmt[2] in _G_WORD and stmt[3] == ")":
        return True
    if len(stmt) == 3 and stmt[0] in _G_VAR and stmt[1] == "=" and stmt[2] in _G_NUM:
        return True
    return False


def deadcode_token_universe():
    """Every terminal either snippet kind can emit (vocabulary support)."""
    tokens = set(FIXED_SNIPPET.split())
    tokens.update(_G_FN, _G_ARG, _G_WORD, _G_VAR, _G_NUM)
    tokens.update(["if", "(", ")", ":", "print", "=", "<", ">", "-", "2", "3"])
    return sorted(tokens)


def insert_dead_code(sample, snippet_kind, seed, fixed_snippet=FIXED_SNIPPET):
    """Insert a dead-code snippet as the first body statement of the sample."""
    tokens = sample.raw_source.split()
    depth = 0
    header_end = None
    for pos, tok in enumerate(tokens):
        if tok == "(":
            depth += 1
        elif tok == ")":
            depth -= 1
        elif tok == ":" and depth == 0:
            header_end = pos
            break
    if header_end is None or tokens[0] != "def":
        raise AnalysisError("sample has no function body to insert into")
    if snippet_kind == "fixed":
        snippet = fixed_snippet
    elif snippet_kind == "grammar":
        snippet = grammar_snippet(random.Random(seed))
    else:
        raise ValueError(f"unknown snippet kind {snippet_kind!r}")
    out = tokens[: header_end + 1] + snippet.split() + [";"] + tokens[header_end + 1 :]
    return replace(sample, raw_source=" ".join(out), label=snippet_kind,
                   source_tokens=None, target_tokens=None)
