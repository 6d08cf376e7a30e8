"""End-to-end pipeline: corpus generation, surrogate training, trigger
materialization, injection, victim training, evaluation, and defenses.

Each stage reads its inputs from files under one run directory and
writes its outputs there, so any stage can be re-run alone once its
predecessors have run.  All randomness is derived from ``run.seed``
through fixed per-component offsets, which makes a run reproducible
from its config alone: deleting the run directory and re-running
yields byte-identical metric tables.

Run directory layout (versioned by the ``layout_version`` file)::

    corpus/       clean splits, vocabulary, generation manifests
    checkpoints/  surrogate, victim, defended victim, histories, probe
    poison/       materialized poison set, injected train file, sidecar
    verdicts/     one JSONL verdict file per defense
    report.json   config echo + metric table
    report.csv    the same metrics as one flat CSV row

A ``lock`` file taken exclusively for the duration of a command keeps
two processes from writing the same run directory at once.
"""

import json
import os
import time
from contextlib import contextmanager

from . import config as cfglib
from .corpus import (build_vocab, encode_corpus, generate_synthetic_corpus,
                     load_jsonl, save_jsonl, write_manifest, Vocabulary)
from .defenses import (detection_metrics, filter_dataset, fit_corpus_lm,
                       fluency_defense, naturalness_defense, save_verdicts,
                       spectral_defense)
from .lexer import deadcode_token_universe
from .metrics import (RunReport, attack_success_rate, corpus_bleu,
                      save_report_csv)
from .model import Transformer, load_checkpoint, save_checkpoint
from .poisoning import (build_poison_set, build_triggered_testset,
                        candidate_pool, inject, load_sidecar,
                        offrole_candidates, poison_count, save_sidecar,
                        widest_identifier_count)
from .training import evaluate_loss, sharpness_probe, train

LAYOUT_VERSION = "1"


class StageError(RuntimeError):
    """A pipeline stage failed; the name says which one, and artifacts
    written before the failure stay on disk."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage}: {cause}")
        self.stage = stage
        self.cause = cause


class ConcurrencyError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# run directory plumbing

def resolve_run_dir(cfg):
    """``run.dir`` if set, else ``$STABFORGE_RUNS``/run-id (default root
    ``runs``)."""
    if cfg["run.dir"]:
        return cfg["run.dir"]
    root = os.environ.get("STABFORGE_RUNS", "runs")
    return os.path.join(root, cfglib.run_id(cfg))


def prepare_run_dir(run):
    """Create the directory and stamp or verify its layout version."""
    os.makedirs(run, exist_ok=True)
    stamp = os.path.join(run, "layout_version")
    if os.path.exists(stamp):
        with open(stamp, "r", encoding="utf-8") as fh:
            found = fh.read().strip()
        if found != LAYOUT_VERSION:
            raise ConcurrencyError(
                f"{run} uses layout {found!r}, this build writes {LAYOUT_VERSION!r}")
    else:
        with open(stamp, "w", encoding="utf-8") as fh:
            fh.write(LAYOUT_VERSION + "\n")


@contextmanager
def run_lock(run):
    path = os.path.join(run, "lock")
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConcurrencyError(
            f"{run} is locked by another process (delete {path} if it is stale)")
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        if os.path.exists(path):
            os.unlink(path)


def _subdir(run, name):
    path = os.path.join(run, name)
    os.makedirs(path, exist_ok=True)
    return path


def _load_vocab(run):
    with open(os.path.join(run, "corpus", "vocab.json"), "r", encoding="utf-8") as fh:
        return Vocabulary.from_json(json.load(fh))


def _load_split(run, name):
    return load_jsonl(os.path.join(run, "corpus", f"{name}.jsonl"))


def _load_model(run, name, vocab):
    model, _ = load_checkpoint(os.path.join(run, "checkpoints", name),
                               expected_vocab_hash=vocab.hash)
    return model


# ---------------------------------------------------------------------------
# report assembly

REPORT_METRICS = ("asr", "asr_d", "bleu_clean", "recall_ss", "f1_ss",
                  "recall_onion", "f1_onion", "recall_nat", "f1_nat",
                  "probe_sam", "probe_vanilla")


def build_report(cfg, metrics, extras=None):
    fields = {k: float(metrics[k]) for k in REPORT_METRICS if k in metrics}
    return RunReport(
        run_id=cfglib.run_id(cfg),
        attack=cfg["poison.attack"],
        surrogate_origin=f"synth{cfg['corpus.surrogate_family']}",
        victim_origin=f"synth{cfg['corpus.victim_family']}",
        sam=cfg["surrogate.mode"] == "sam",
        seed=cfg["run.seed"],
        extras=dict(extras or {}),
        **fields,
    )


def merge_report(run, cfg, metrics=None, extras=None, wall_seconds=None):
    """Fold new metric values into report.json/report.csv.  Stale state
    from a different config in the same directory is discarded."""
    path = os.path.join(run, "report.json")
    rid = cfglib.run_id(cfg)
    state = {"run_id": rid, "config": {}, "metrics": {}, "extras": {}}
    if os.path.exists(path):
        with open(path, "r", encoding="utf-8") as fh:
            old = json.load(fh)
        if old.get("run_id") == rid:
            state.update({k: old[k] for k in ("metrics", "extras") if k in old})
            if "wall_seconds" in old:
                state["wall_seconds"] = old["wall_seconds"]
    state["config"] = {k: cfg[k] for k in sorted(cfg)}
    state["metrics"].update({k: float(v) for k, v in (metrics or {}).items()})
    state["extras"].update(extras or {})
    if wall_seconds is not None:
        state["wall_seconds"] = round(wall_seconds, 3)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(state, fh, indent=2, sort_keys=True)
        fh.write("\n")
    report = build_report(cfg, state["metrics"], state["extras"])
    save_report_csv([report], os.path.join(run, "report.csv"))
    return report


# ---------------------------------------------------------------------------
# stages

def stage_corpus(run, cfg):
    """Generate both corpora, build the shared vocabulary, write splits."""
    out = _subdir(run, "corpus")
    task = cfg["corpus.task"]
    n_tr, n_va, n_te = (cfg["corpus.n_train"], cfg["corpus.n_valid"],
                        cfg["corpus.n_test"])
    s_fam, s_seed = cfg["corpus.surrogate_family"], cfg["corpus.surrogate_seed"]
    v_fam, v_seed = cfg["corpus.victim_family"], cfg["corpus.victim_seed"]
    surr_all = generate_synthetic_corpus(s_fam, n_tr + n_va, s_seed, task=task)
    vict_all = generate_synthetic_corpus(v_fam, n_tr + n_va + n_te, v_seed, task=task)
    extra = [cfg["poison.target"], " ".join(deadcode_token_universe())]
    vocab = build_vocab(surr_all + vict_all, min_freq=cfg["corpus.min_freq"],
                        extra_texts=extra)
    splits = {
        "surrogate_train": surr_all[:n_tr],
        "surrogate_valid": surr_all[n_tr:],
        "victim_train": vict_all[:n_tr],
        "victim_valid": vict_all[n_tr:n_tr + n_va],
        "victim_test": vict_all[n_tr + n_va:],
    }
    for name, samples in splits.items():
        save_jsonl(samples, os.path.join(out, f"{name}.jsonl"))
    with open(os.path.join(out, "vocab.json"), "w", encoding="utf-8") as fh:
        json.dump(vocab.to_json(), fh)
        fh.write("\n")
    write_manifest(os.path.join(out, "surrogate_manifest.json"),
                   s_fam, len(surr_all), s_seed, vocab.hash)
    write_manifest(os.path.join(out, "victim_manifest.json"),
                   v_fam, len(vict_all), v_seed, vocab.hash)


def stage_surrogate(run, cfg):
    """Train the attacker's model on its own corpus."""
    out = _subdir(run, "checkpoints")
    vocab = _load_vocab(run)
    tr = encode_corpus(_load_split(run, "surrogate_train"), vocab)
    va = encode_corpus(_load_split(run, "surrogate_valid"), vocab)
    tc = cfglib.train_config(cfg, "surrogate")
    model = Transformer(cfglib.model_config(cfg, len(vocab)), seed=tc.seed)
    history = train(model, tr, va, tc,
                    history_path=os.path.join(out, "surrogate_history.csv"),
                    checkpoint_base=os.path.join(out, "surrogate"),
                    vocab_hash=vocab.hash)
    merge_report(run, cfg, extras={"surrogate_best_valid": round(history.best_valid, 6)})


def stage_triggers(run, cfg):
    """Materialize the poison set and the triggered test set.

    The candidate pool is resolved once against the attacker's corpus;
    in the automatic case its size also covers the widest victim test
    sample so every test input can be triggered.
    """
    out = _subdir(run, "poison")
    vocab = _load_vocab(run)
    source = _load_split(run, "surrogate_train")
    victim_train = _load_split(run, "victim_train")
    victim_test = _load_split(run, "victim_test")
    spec = cfglib.poison_spec(cfg)
    tcfg = cfglib.trigger_config(cfg)
    surrogate = _load_model(run, "surrogate", vocab)
    if spec.attack in ("stab", "greedy"):
        if spec.candidate_mode == "offrole" and spec.candidate_limit == 0:
            limit = max(widest_identifier_count(source, vocab),
                        widest_identifier_count(victim_test, vocab))
            candidates = offrole_candidates(source, vocab, limit)
        else:
            candidates = candidate_pool(source, vocab, spec)
        with open(os.path.join(out, "candidates.json"), "w", encoding="utf-8") as fh:
            json.dump({"mode": spec.candidate_mode, "ids": list(candidates),
                       "tokens": [vocab.tokens[i] for i in candidates]}, fh, indent=2)
            fh.write("\n")
    else:
        candidates = None
    requested = poison_count(len(victim_train), spec.rate)
    twins, records = build_poison_set(source, surrogate, vocab, spec, tcfg,
                                      candidates=candidates, count=requested)
    triggered = build_triggered_testset(victim_test, surrogate, vocab, spec,
                                        tcfg, candidates=candidates)
    save_jsonl(twins, os.path.join(out, "poison_set.jsonl"))
    save_sidecar(records, os.path.join(out, "poison_labels.jsonl"))
    save_jsonl(triggered, os.path.join(out, "test_triggered.jsonl"), provenance=False)
    summary = {"poison_requested": requested, "n_poison": len(twins),
               "n_triggered": len(triggered),
               "test_skipped": len(victim_test) - len(triggered)}
    with open(os.path.join(out, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    merge_report(run, cfg, extras=summary)


def stage_poison(run, cfg):
    """Mix the materialized poison set into the victim's training file.

    The serialized file carries no label or origin fields; ground truth
    for scoring defenses lives only in the sidecar.
    """
    out = _subdir(run, "poison")
    vocab = _load_vocab(run)
    victim_train = _load_split(run, "victim_train")
    twins = load_jsonl(os.path.join(out, "poison_set.jsonl"))
    spec = cfglib.poison_spec(cfg)
    combined = inject(victim_train, twins, vocab, spec.seed)
    save_jsonl(combined, os.path.join(out, "train_poisoned.jsonl"), provenance=False)


def stage_victim(run, cfg):
    """Train the victim on the injected training file."""
    out = _subdir(run, "checkpoints")
    vocab = _load_vocab(run)
    tr = encode_corpus(load_jsonl(os.path.join(run, "poison", "train_poisoned.jsonl")),
                       vocab)
    va = encode_corpus(_load_split(run, "victim_valid"), vocab)
    tc = cfglib.train_config(cfg, "victim")
    model = Transformer(cfglib.model_config(cfg, len(vocab)), seed=tc.seed)
    history = train(model, tr, va, tc,
                    history_path=os.path.join(out, "victim_history.csv"),
                    checkpoint_base=os.path.join(out, "victim"),
                    vocab_hash=vocab.hash)
    merge_report(run, cfg, extras={"victim_best_valid": round(history.best_valid, 6)})


def stage_evaluate(run, cfg):
    """Attack success, clean BLEU, and the surrogate flatness probe."""
    vocab = _load_vocab(run)
    victim = _load_model(run, "victim", vocab)
    surrogate = _load_model(run, "surrogate", vocab)
    test = encode_corpus(_load_split(run, "victim_test"), vocab)
    triggered = encode_corpus(
        load_jsonl(os.path.join(run, "poison", "test_triggered.jsonl")), vocab)
    asr = attack_success_rate(victim, triggered, vocab, cfg["poison.target"])
    bleu = corpus_bleu(victim, test)
    surr_valid = encode_corpus(_load_split(run, "surrogate_valid"), vocab)
    probe = sharpness_probe(lambda: evaluate_loss(surrogate, surr_valid),
                            surrogate.params, rho=cfg["probe.rho"],
                            n_directions=cfg["probe.directions"],
                            seed=cfg["run.seed"] + cfglib.SEED_PROBE)
    mode = cfg["surrogate.mode"]
    probe_key = "probe_sam" if mode == "sam" else "probe_vanilla"
    with open(os.path.join(_subdir(run, "checkpoints"), "probe.json"),
              "w", encoding="utf-8") as fh:
        json.dump({"mode": mode, "rho": cfg["probe.rho"],
                   "directions": cfg["probe.directions"], "value": probe}, fh,
                  indent=2)
        fh.write("\n")
    merge_report(run, cfg, metrics={"asr": asr, "bleu_clean": bleu,
                                    probe_key: probe})


def stage_defend(run, cfg):
    """Run the three detectors, then retrain on the filtered corpus to
    measure the surviving attack."""
    out = _subdir(run, "verdicts")
    vocab = _load_vocab(run)
    victim = _load_model(run, "victim", vocab)
    poisoned_raw = load_jsonl(os.path.join(run, "poison", "train_poisoned.jsonl"))
    poisoned = encode_corpus(poisoned_raw, vocab)
    truth = [rec["id"] for rec in
             load_sidecar(os.path.join(run, "poison", "poison_labels.jsonl"))]
    reference = _load_split(run, "victim_valid")

    spectral = spectral_defense(victim, poisoned,
                                top_k=cfg["defense.spectral_top_k"],
                                removal_fraction=cfg["defense.spectral_removal"])
    save_verdicts(spectral, os.path.join(out, "spectral.jsonl"))
    lm = fit_corpus_lm(reference, n=cfg["defense.ngram_n"], k=cfg["defense.ngram_k"])
    fluency = fluency_defense(poisoned, lm, threshold=cfg["defense.fluency_threshold"])
    save_verdicts(fluency, os.path.join(out, "fluency.jsonl"))
    natural, _ = naturalness_defense(poisoned, lm,
                                     threshold=cfg["defense.naturalness_threshold"])
    save_verdicts(natural, os.path.join(out, "naturalness.jsonl"))

    m_ss = detection_metrics(spectral, truth)
    m_on = detection_metrics(fluency, truth)
    m_nat = detection_metrics(natural, truth)

    filtered = filter_dataset(poisoned, natural)
    if not filtered:
        raise ValueError("defense filtered out the entire training set")
    ck = _subdir(run, "checkpoints")
    va = encode_corpus(reference, vocab)
    tc = cfglib.train_config(cfg, "victim")
    defended = Transformer(cfglib.model_config(cfg, len(vocab)), seed=tc.seed)
    history = train(defended, filtered, va, tc,
                    history_path=os.path.join(ck, "victim_defended_history.csv"),
                    checkpoint_base=os.path.join(ck, "victim_defended"),
                    vocab_hash=vocab.hash)
    triggered = encode_corpus(
        load_jsonl(os.path.join(run, "poison", "test_triggered.jsonl")), vocab)
    asr_d = attack_success_rate(defended, triggered, vocab, cfg["poison.target"])
    merge_report(
        run, cfg,
        metrics={"recall_ss": m_ss["recall"], "f1_ss": m_ss["f1"],
                 "recall_onion": m_on["recall"], "f1_onion": m_on["f1"],
                 "recall_nat": m_nat["recall"], "f1_nat": m_nat["f1"],
                 "asr_d": asr_d},
        extras={"defended_removed": len(poisoned) - len(filtered),
                "defended_best_valid": round(history.best_valid, 6)})


STAGES = (
    ("corpus", stage_corpus),
    ("surrogate", stage_surrogate),
    ("triggers", stage_triggers),
    ("poison", stage_poison),
    ("victim", stage_victim),
    ("evaluate", stage_evaluate),
    ("defend", stage_defend),
)


def run_stage(name, run, cfg):
    """Run one named stage under the run lock, wrapping any failure with
    the stage name."""
    table = dict(STAGES)
    if name not in table:
        raise ValueError(f"unknown stage {name!r}")
    prepare_run_dir(run)
    with run_lock(run):
        cfglib.save_config(cfg, os.path.join(run, "config.txt"))
        try:
            table[name](run, cfg)
        except (StageError, ConcurrencyError):
            raise
        except Exception as e:
            raise StageError(name, e) from e


def run_experiment(cfg):
    """Execute every stage in order and return the final RunReport."""
    run = resolve_run_dir(cfg)
    prepare_run_dir(run)
    started = time.time()
    with run_lock(run):
        cfglib.save_config(cfg, os.path.join(run, "config.txt"))
        for name, fn in STAGES:
            try:
                fn(run, cfg)
            except Exception as e:
                raise StageError(name, e) from e
        with open(os.path.join(run, "report.json"), "r", encoding="utf-8") as fh:
            state = json.load(fh)
        return merge_report(run, cfg, metrics=state["metrics"],
                            wall_seconds=time.time() - started)


def collect_report_lines(run_dirs):
    """Concatenate the CSV rows of several runs into one table, in the
    given order; the shared header appears once."""
    rows = []
    header = None
    for run in run_dirs:
        csv_path = os.path.join(run, "report.csv")
        with open(csv_path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        if not lines:
            continue
        if header is None:
            header = lines[0]
        elif lines[0] != header:
            raise ValueError(f"{csv_path}: header differs from the first run")
        rows.extend(lines[1:])
    return ([header] if header else []) + rows
