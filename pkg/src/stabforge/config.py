"""Flat key=value experiment configuration with dotted namespaces.

A config is a plain dict from dotted key to typed value.  The schema is
the DEFAULTS table: every legal key appears there with its default, and
a value parses with the type of its default.  Files are plain text, one
``key=value`` per line, ``#`` lines and blank lines ignored; overrides
arrive as ``key=value`` strings from the command line.  All schema
violations (unknown keys, unparsable values) are reported together in
one error.

The run identifier is a content hash of the canonical config with
``run.dir`` excluded, so moving a run directory never changes identity
and identical configs always collide onto the same id.
"""

import hashlib

from .corpus import ConfigurationError
from .model import ModelConfig
from .poisoning import PoisonSpec
from .training import TrainConfig
from .triggers import TriggerConfig

DEFAULTS = {
    "run.dir": "",
    "run.seed": 0,
    "corpus.task": "cs",
    "corpus.surrogate_family": "A",
    "corpus.victim_family": "A",
    "corpus.surrogate_seed": 7,
    "corpus.victim_seed": 11,
    "corpus.n_train": 2000,
    "corpus.n_valid": 200,
    "corpus.n_test": 200,
    "corpus.min_freq": 1,
    "model.d_model": 64,
    "model.n_heads": 2,
    "model.ffn_dim": 128,
    "model.n_enc_layers": 2,
    "model.n_dec_layers": 2,
    "model.max_src_len": 64,
    "model.max_tgt_len": 16,
    "surrogate.mode": "sam",
    "surrogate.optimizer": "adam",
    "surrogate.rho": 0.02,
    "surrogate.lr": 0.001,
    "surrogate.epochs": 15,
    "surrogate.batch_size": 32,
    "surrogate.patience": 3,
    "surrogate.restore_best": True,
    "victim.optimizer": "adam",
    "victim.lr": 0.002,
    "victim.epochs": 15,
    "victim.batch_size": 32,
    "victim.patience": 15,
    "victim.restore_best": False,
    "trigger.tau": 1.0,
    "trigger.lam": 0.1,
    "trigger.N": 100,
    "trigger.step_size": 0.3,
    "trigger.sample_tau": 0.05,
    "trigger.max_resamples": 16,
    "trigger.init_bonus": 0.0,
    "poison.attack": "stab",
    "poison.rate": 0.05,
    "poison.target": "load_data",
    "poison.candidate_mode": "offrole",
    "poison.candidate_limit": 0,
    "defense.spectral_top_k": 5,
    "defense.spectral_removal": 0.075,
    "defense.ngram_n": 3,
    "defense.ngram_k": 0.01,
    "defense.naturalness_threshold": 0.01,
    "defense.fluency_threshold": 3.0,
    "probe.rho": 0.02,
    "probe.directions": 8,
}

# Deterministic offsets applied to run.seed so each seeded component
# draws from its own stream.
SEED_SURROGATE = 1
SEED_VICTIM = 2
SEED_POISON = 3
SEED_PROBE = 4


def _parse_value(key, text):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        low = text.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text.strip()


def _parse_pairs(pairs, source, problems):
    out = {}
    for raw in pairs:
        if "=" not in raw:
            problems.append(f"{source}: {raw!r} is not key=value")
            continue
        key, _, value = raw.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            problems.append(f"{source}: unknown key {key!r}")
            continue
        try:
            out[key] = _parse_value(key, value)
        except ValueError as e:
            problems.append(f"{source}: bad value for {key}: {e}")
    return out


def read_config_file(path):
    """Raw key=value lines of a config file, comments and blanks dropped."""
    try:
        with open(path, "r", encoding="utf-8-sig") as fh:
            lines = fh.readlines()
    except OSError as e:
        raise ConfigurationError(f"cannot read config file {path}: {e.strerror}") from e
    return [ln.strip() for ln in lines
            if ln.strip() and not ln.strip().startswith("#")]


def build_config(path=None, overrides=()):
    """Effective config: defaults, then the file, then the overrides.

    Every schema violation across both sources is collected and raised
    as one error so a broken config is fixable in a single pass.
    """
    cfg = dict(DEFAULTS)
    problems = []
    if path is not None:
        cfg.update(_parse_pairs(read_config_file(path), str(path), problems))
    cfg.update(_parse_pairs(overrides, "--set", problems))
    if problems:
        raise ConfigurationError("; ".join(problems))
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    """Cross-field validation via the component config types themselves."""
    try:
        model_config(cfg, vocab_size=8)
        train_config(cfg, "surrogate")
        train_config(cfg, "victim")
        trigger_config(cfg)
        poison_spec(cfg)
        if cfg["corpus.surrogate_family"] not in ("A", "B", "C"):
            raise ValueError(f"unknown family {cfg['corpus.surrogate_family']!r}")
        if cfg["corpus.victim_family"] not in ("A", "B", "C"):
            raise ValueError(f"unknown family {cfg['corpus.victim_family']!r}")
        if cfg["corpus.task"] not in ("mnp", "cs"):
            raise ValueError(f"unknown task {cfg['corpus.task']!r}")
        for key in ("corpus.n_train", "corpus.n_valid", "corpus.n_test"):
            if cfg[key] < 1:
                raise ValueError(f"{key} must be >= 1")
    except ValueError as e:
        raise ConfigurationError(str(e)) from e


def format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def canonical_lines(cfg, skip=()):
    return [f"{key}={format_value(cfg[key])}"
            for key in sorted(cfg) if key not in skip]


def save_config(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(canonical_lines(cfg)) + "\n")


def run_id(cfg):
    """Content hash of the config, location-independent."""
    blob = "\n".join(canonical_lines(cfg, skip=("run.dir",)))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# translation into component configs

def model_config(cfg, vocab_size):
    return ModelConfig(
        vocab_size=vocab_size,
        d_model=cfg["model.d_model"],
        n_heads=cfg["model.n_heads"],
        ffn_dim=cfg["model.ffn_dim"],
        n_enc_layers=cfg["model.n_enc_layers"],
        n_dec_layers=cfg["model.n_dec_layers"],
        max_src_len=cfg["model.max_src_len"],
        max_tgt_len=cfg["model.max_tgt_len"],
    )


def train_config(cfg, role):
    if role == "surrogate":
        return TrainConfig(
            mode=cfg["surrogate.mode"],
            optimizer=cfg["surrogate.optimizer"],
            lr=cfg["surrogate.lr"],
            epochs=cfg["surrogate.epochs"],
            batch_size=cfg["surrogate.batch_size"],
            rho=cfg["surrogate.rho"],
            patience=cfg["surrogate.patience"],
            restore_best=cfg["surrogate.restore_best"],
            seed=cfg["run.seed"] + SEED_SURROGATE,
        )
    if role == "victim":
        return TrainConfig(
            mode="vanilla",
            optimizer=cfg["victim.optimizer"],
            lr=cfg["victim.lr"],
            epochs=cfg["victim.epochs"],
            batch_size=cfg["victim.batch_size"],
            patience=cfg["victim.patience"],
            restore_best=cfg["victim.restore_best"],
            seed=cfg["run.seed"] + SEED_VICTIM,
        )
    raise ValueError(f"unknown training role {role!r}")


def trigger_config(cfg):
    return TriggerConfig(
        tau=cfg["trigger.tau"],
        lam=cfg["trigger.lam"],
        iters=cfg["trigger.N"],
        step_size=cfg["trigger.step_size"],
        sample_tau=cfg["trigger.sample_tau"],
        max_resamples=cfg["trigger.max_resamples"],
        init_bonus=cfg["trigger.init_bonus"],
    )


def poison_spec(cfg):
    return PoisonSpec(
        attack=cfg["poison.attack"],
        rate=cfg["poison.rate"],
        target_text=cfg["poison.target"],
        seed=cfg["run.seed"] + SEED_POISON,
        candidate_mode=cfg["poison.candidate_mode"],
        candidate_limit=cfg["poison.candidate_limit"],
    )
