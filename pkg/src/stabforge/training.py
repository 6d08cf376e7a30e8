"""Seq2seq training with an Adam or plain-SGD base step, optional
sharpness-aware updates, early stopping, and a flat-minimum probe.

The sharpness-aware mode takes each step at an adversarially perturbed
point: after the first backward pass the parameters are shifted by
``rho * g / ||g||_2`` (one global L2 norm over all parameter gradients),
gradients are recomputed there, the shift is undone, and the base
optimizer applies the recomputed gradients.
"""

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .corpus import BOS, EOS, PAD
from .model import save_checkpoint


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "vanilla"
    optimizer: str = "adam"
    lr: float = 1e-3
    epochs: int = 15
    batch_size: int = 32
    rho: float = 0.02
    patience: int = 3
    restore_best: bool = True
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.mode not in ("vanilla", "sam"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.rho <= 0 and self.mode == "sam":
            raise ValueError("sharpness radius must be positive")


@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)

    def append(self, epoch, train_loss, valid_loss, seconds):
        self.rows.append({"epoch": epoch, "train_loss": train_loss,
                          "valid_loss": valid_loss, "seconds": seconds})

    def save_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["epoch", "train_loss", "valid_loss", "seconds"])
            writer.writeheader()
            for row in self.rows:
                writer.writerow(row)

    @property
    def best_valid(self):
        return min(r["valid_loss"] for r in self.rows)


def pad_batch(samples, max_src_len, max_tgt_len):
    """Pack encoded samples into (src, tgt_in, tgt_out) padded id arrays."""
    b = len(samples)
    src_len = min(max(len(s.source_tokens) for s in samples), max_src_len)
    tgt_len = min(max(len(s.target_tokens) for s in samples) + 1, max_tgt_len)
    src = np.full((b, src_len), PAD, dtype=np.int64)
    tgt_in = np.full((b, tgt_len), PAD, dtype=np.int64)
    tgt_out = np.full((b, tgt_len), PAD, dtype=np.int64)
    for i, s in enumerate(samples):
        ids = s.source_tokens[:src_len]
        src[i, :len(ids)] = ids
        full = (BOS,) + s.target_tokens[:tgt_len - 1] + (EOS,)
        tgt_in[i, :len(full) - 1] = full[:-1]
        tgt_out[i, :len(full) - 1] = full[1:]
    return src, tgt_in, tgt_out


def iter_batches(samples, batch_size, max_src_len, max_tgt_len, rng=None):
    order = np.arange(len(samples))
    if rng is not None:
        rng.shuffle(order)
    for start in range(0, len(order), batch_size):
        chunk = [samples[i] for i in order[start:start + batch_size]]
        yield pad_batch(chunk, max_src_len, max_tgt_len)


class Adam:
    def __init__(self, params, cfg):
        self.cfg = cfg
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, params):
        c = self.cfg
        self.t += 1
        bias1 = 1.0 - c.beta1 ** self.t
        bias2 = 1.0 - c.beta2 ** self.t
        for k, p in params.items():
            g = p.grad
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            p.data -= c.lr * (self.m[k] / bias1) / (np.sqrt(self.v[k] / bias2) + c.eps)


class SGD:
    def __init__(self, params, cfg):
        self.cfg = cfg

    def step(self, params):
        for p in params.values():
            p.data -= self.cfg.lr * p.grad


def make_optimizer(params, cfg):
    return (SGD if cfg.optimizer == "sgd" else Adam)(params, cfg)


def grad_global_norm(params):
    total = 0.0
    for p in params.values():
        total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)


def sam_perturbation(params, rho):
    """Scaled-ascent offsets rho * g / ||g||_2; zero when gradients vanish."""
    norm = grad_global_norm(params)
    if norm == 0.0:
        return {k: np.zeros_like(p.data) for k, p in params.items()}
    return {k: (rho / norm) * p.grad for k, p in params.items()}


def train_step(model, batch, opt, cfg):
    src, tgt_in, tgt_out = batch
    model.zero_grad()
    loss = model.loss(src, tgt_in, tgt_out)
    ad.backward(loss)
    if cfg.mode == "sam":
        delta = sam_perturbation(model.params, cfg.rho)
        for k, p in model.params.items():
            p.data += delta[k]
        model.zero_grad()
        ad.backward(model.loss(src, tgt_in, tgt_out))
        for k, p in model.params.items():
            p.data -= delta[k]
    opt.step(model.params)
    return loss.item


def evaluate_loss(model, samples, batch_size=64):
    if not samples:
        return float("nan")
    total, count = 0.0, 0
    c = model.config
    with ad.no_grad():
        for batch in iter_batches(samples, batch_size, c.max_src_len, c.max_tgt_len):
            src, tgt_in, tgt_out = batch
            n = int(np.sum(tgt_out != PAD))
            total += model.loss(src, tgt_in, tgt_out).item * n
            count += n
    return total / count


def train(model, train_samples, valid_samples, cfg,
          history_path=None, checkpoint_base=None, vocab_hash=""):
    """Train with per-epoch validation and early stopping.  With
    ``cfg.restore_best`` the best-epoch weights are restored at the end;
    otherwise the final weights stand.  A checkpoint is written when a
    base path is given."""
    if not train_samples:
        raise ValueError("cannot train on an empty corpus")
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(model.params, cfg)
    history = TrainHistory()
    c = model.config
    best = math.inf
    best_state = None
    bad_epochs = 0
    for epoch in range(1, cfg.epochs + 1):
        started = time.time()
        losses = []
        for batch in iter_batches(train_samples, cfg.batch_size,
                                  c.max_src_len, c.max_tgt_len, rng):
            losses.append(train_step(model, batch, opt, cfg))
        valid_loss = evaluate_loss(model, valid_samples, cfg.batch_size)
        history.append(epoch, float(np.mean(losses)), valid_loss,
                       round(time.time() - started, 3))
        if valid_loss < best - 1e-6:
            best = valid_loss
            if cfg.restore_best:
                best_state = {k: p.data.copy() for k, p in model.params.items()}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                break
    if best_state is not None:
        for k, p in model.params.items():
            p.data = best_state[k]
    if history_path:
        history.save_csv(history_path)
    if checkpoint_base:
        save_checkpoint(model, checkpoint_base, vocab_hash=vocab_hash)
    return history


def sharpness_probe(loss_fn, params, rho=0.02, n_directions=8, seed=0):
    """Mean loss increase under random parameter perturbations of global
    L2 norm ``rho``, antithetic pairs averaged: for each unit direction u,
    (L(theta + rho u) + L(theta - rho u)) / 2 - L(theta)."""
    rng = np.random.default_rng(seed)
    base = loss_fn()
    deltas = []
    keys = list(params)
    for _ in range(n_directions):
        direction = {k: rng.standard_normal(params[k].data.shape) for k in keys}
        norm = math.sqrt(sum(float(np.sum(d * d)) for d in direction.values()))
        shift = {k: (rho / norm) * d for k, d in direction.items()}
        up_down = []
        for sign in (1.0, -1.0):
            for k in keys:
                params[k].data += sign * shift[k]
            up_down.append(loss_fn())
            for k in keys:
                params[k].data -= sign * shift[k]
        deltas.append(0.5 * (up_down[0] + up_down[1]) - base)
    return float(np.mean(deltas))
