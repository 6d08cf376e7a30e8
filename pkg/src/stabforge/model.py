"""Small encoder/decoder Transformer for sequence-to-sequence code tasks.

Pre-norm layers, sinusoidal positions, a shared embedding table tied to the
output projection.  Sources can enter as token ids or as relaxed one-hot
rows, which keeps the whole forward differentiable with respect to a
token-distribution input.  Checkpoints are a raw little-endian float64
blob plus a JSON manifest describing offsets, shapes, config, and the
vocabulary hash.
"""

import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import BOS, EOS, PAD

NEG_INF = -1e30
LAYOUT_VERSION = 1


class CorruptionError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 2
    ffn_dim: int = 128
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    max_src_len: int = 64
    max_tgt_len: int = 16

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must divide evenly across heads")


def sinusoid_table(max_len, d_model):
    pos = np.arange(max_len)[:, None]
    dim = np.arange(d_model // 2)[None, :]
    angle = pos / (10000.0 ** (2 * dim / d_model))
    table = np.zeros((max_len, d_model))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table


class Transformer:
    def __init__(self, config, seed=0):
        self.config = config
        self.params = {}
        rng = np.random.default_rng(seed)
        d, f, v = config.d_model, config.ffn_dim, config.vocab_size

        def weight(name, shape):
            self.params[name] = Tensor(rng.normal(0.0, 0.02, shape), requires_grad=True)

        def norm(name):
            self.params[f"{name}.gain"] = Tensor(np.ones(d), requires_grad=True)
            self.params[f"{name}.bias"] = Tensor(np.zeros(d), requires_grad=True)

        weight("embed", (v, d))
        for side, n_layers in (("enc", config.n_enc_layers), ("dec", config.n_dec_layers)):
            for i in range(n_layers):
                p = f"{side}{i}"
                for m in ("q", "k", "v", "o"):
                    weight(f"{p}.attn.{m}", (d, d))
                norm(f"{p}.ln1")
                if side == "dec":
                    for m in ("q", "k", "v", "o"):
                        weight(f"{p}.xattn.{m}", (d, d))
                    norm(f"{p}.lnx")
                weight(f"{p}.ffn.w1", (d, f))
                self.params[f"{p}.ffn.b1"] = Tensor(np.zeros(f), requires_grad=True)
                weight(f"{p}.ffn.w2", (f, d))
                self.params[f"{p}.ffn.b2"] = Tensor(np.zeros(d), requires_grad=True)
                norm(f"{p}.ln2")
        norm("enc.final")
        norm("dec.final")
        self.positions = sinusoid_table(max(config.max_src_len, config.max_tgt_len), d)

    def parameters(self):
        return self.params

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    # -- building blocks ---------------------------------------------------

    def _heads(self, x, batch, length):
        c = self.config
        dh = c.d_model // c.n_heads
        x = ad.reshape(x, (batch, length, c.n_heads, dh))
        return ad.transpose(x, (0, 2, 1, 3))

    def _attention(self, prefix, x_q, x_kv, mask):
        c = self.config
        dh = c.d_model // c.n_heads
        bq, tq = x_q.shape[0], x_q.shape[1]
        tk = x_kv.shape[1]
        q = self._heads(x_q @ self.params[f"{prefix}.q"], bq, tq)
        k = self._heads(x_kv @ self.params[f"{prefix}.k"], bq, tk)
        v = self._heads(x_kv @ self.params[f"{prefix}.v"], bq, tk)
        scores = ad.scale(q @ ad.transpose(k, (0, 1, 3, 2)), 1.0 / math.sqrt(dh))
        scores = scores + Tensor(np.broadcast_to(mask, scores.shape))
        mix = ad.softmax(scores, axis=-1) @ v
        mix = ad.reshape(ad.transpose(mix, (0, 2, 1, 3)), (bq, tq, c.d_model))
        return mix @ self.params[f"{prefix}.o"]

    def _ln(self, name, x):
        return ad.layer_norm(x, self.params[f"{name}.gain"], self.params[f"{name}.bias"])

    def _ffn(self, prefix, x):
        h = ad.relu(x @ self.params[f"{prefix}.w1"] + self.params[f"{prefix}.b1"])
        return h @ self.params[f"{prefix}.w2"] + self.params[f"{prefix}.b2"]

    def _embed_ids(self, ids):
        emb = ad.embedding_gather(self.params["embed"], ids)
        return self._add_positions(emb, ids.shape[1])

    def _add_positions(self, emb, length):
        if length > self.positions.shape[0]:
            raise ValueError(f"sequence length {length} exceeds position table "
                             f"{self.positions.shape[0]}")
        d = self.config.d_model
        scaled = ad.scale(emb, math.sqrt(d))
        pos = np.broadcast_to(self.positions[:length], scaled.shape)
        return scaled + Tensor(pos)

    # -- encoder / decoder -------------------------------------------------

    def encode(self, src_ids=None, src_soft=None, src_pad_mask=None):
        """Run the encoder stack.  Exactly one of ``src_ids`` (int array
        [B, T]) or ``src_soft`` (Tensor [B, T, V] of token distributions)
        must be given; with ``src_soft`` a pad mask array is required."""
        if (src_ids is None) == (src_soft is None):
            raise ValueError("pass exactly one of src_ids or src_soft")
        if src_ids is not None:
            src_ids = np.asarray(src_ids)
            pad_mask = src_ids != PAD
            h = self._embed_ids(src_ids)
        else:
            if src_pad_mask is None:
                raise ValueError("src_soft requires src_pad_mask")
            pad_mask = np.asarray(src_pad_mask)
            emb = ad.embedding_mix(src_soft, self.params["embed"])
            h = self._add_positions(emb, src_soft.shape[1])
        attn_mask = np.where(pad_mask, 0.0, NEG_INF)[:, None, None, :]
        for i in range(self.config.n_enc_layers):
            p = f"enc{i}"
            x = self._ln(f"{p}.ln1", h)
            h = h + self._attention(f"{p}.attn", x, x, attn_mask)
            h = h + self._ffn(f"{p}.ffn", self._ln(f"{p}.ln2", h))
        return self._ln("enc.final", h), pad_mask

    def decode(self, memory, src_pad_mask, tgt_in):
        tgt_in = np.asarray(tgt_in)
        b, t = tgt_in.shape
        causal = np.where(np.tril(np.ones((t, t), dtype=bool)), 0.0, NEG_INF)
        self_mask = causal[None, None, :, :] + np.where(
            tgt_in != PAD, 0.0, NEG_INF)[:, None, None, :]
        cross_mask = np.where(np.asarray(src_pad_mask), 0.0, NEG_INF)[:, None, None, :]
        h = self._embed_ids(tgt_in)
        for i in range(self.config.n_dec_layers):
            p = f"dec{i}"
            x = self._ln(f"{p}.ln1", h)
            h = h + self._attention(f"{p}.attn", x, x, self_mask)
            h = h + self._attention(f"{p}.xattn", self._ln(f"{p}.lnx", h),
                                    memory, cross_mask)
            h = h + self._ffn(f"{p}.ffn", self._ln(f"{p}.ln2", h))
        h = self._ln("dec.final", h)
        return h @ ad.transpose(self.params["embed"])

    def forward_tokens(self, src_ids, tgt_in):
        memory, pad_mask = self.encode(src_ids=src_ids)
        return self.decode(memory, pad_mask, tgt_in)

    def forward_soft(self, src_soft, src_pad_mask, tgt_in):
        memory, pad_mask = self.encode(src_soft=src_soft, src_pad_mask=src_pad_mask)
        return self.decode(memory, pad_mask, tgt_in)

    def loss(self, src_ids, tgt_in, tgt_out):
        logits = self.forward_tokens(src_ids, tgt_in)
        flat = ad.reshape(logits, (-1, self.config.vocab_size))
        targets = np.asarray(tgt_out).reshape(-1)
        return ad.cross_entropy(flat, targets, mask=targets != PAD)

    def greedy_decode(self, src_ids, max_len=None):
        """Batch greedy decoding; returns a list of id lists without
        bos/eos."""
        max_len = max_len or self.config.max_tgt_len
        src_ids = np.asarray(src_ids)
        b = src_ids.shape[0]
        with ad.no_grad():
            memory, pad_mask = self.encode(src_ids=src_ids)
            out = np.full((b, 1), BOS, dtype=np.int64)
            done = np.zeros(b, dtype=bool)
            for _ in range(max_len):
                logits = self.decode(memory, pad_mask, out)
                nxt = np.argmax(logits.data[:, -1, :], axis=-1)
                nxt = np.where(done, PAD, nxt)
                out = np.concatenate([out, nxt[:, None]], axis=1)
                done |= nxt == EOS
                if done.all():
                    break
        decoded = []
        for row in out[:, 1:]:
            ids = []
            for tok in row:
                if tok in (EOS, PAD):
                    break
                ids.append(int(tok))
            decoded.append(ids)
        return decoded

    def encode_pooled(self, src_ids):
        """Mean-pooled final encoder states over non-pad positions, as a
        plain [B, d] array.  Used by representation-space defenses."""
        with ad.no_grad():
            memory, pad_mask = self.encode(src_ids=src_ids)
        keep = pad_mask[:, :, None].astype(float)
        denom = np.maximum(keep.sum(axis=1), 1.0)
        return (memory.data * keep).sum(axis=1) / denom


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(model, base, vocab_hash=""):
    """Write ``base.bin`` (flat little-endian float64) and ``base.json``."""
    manifest = {"layout_version": LAYOUT_VERSION, "vocab_hash": vocab_hash,
                "config": asdict(model.config), "params": []}
    offset = 0
    chunks = []
    for name, tensor in model.params.items():
        flat = np.ascontiguousarray(tensor.data, dtype="<f8").reshape(-1)
        manifest["params"].append(
            {"name": name, "offset": offset, "shape": list(tensor.data.shape)})
        offset += flat.size
        chunks.append(flat)
    manifest["total"] = offset
    with open(base + ".bin", "wb") as fh:
        fh.write(np.concatenate(chunks).tobytes())
    with open(base + ".json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def load_checkpoint(base, expected_vocab_hash=None):
    """Rebuild a model from ``base.bin``/``base.json``; any structural
    mismatch raises CorruptionError."""
    try:
        with open(base + ".json", "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise CorruptionError(f"unreadable checkpoint manifest {base}.json: {e}") from e
    if manifest.get("layout_version") != LAYOUT_VERSION:
        raise CorruptionError(
            f"checkpoint layout {manifest.get('layout_version')} is not {LAYOUT_VERSION}")
    if expected_vocab_hash and manifest.get("vocab_hash") != expected_vocab_hash:
        raise CorruptionError("checkpoint was trained against a different vocabulary")
    blob_size = os.path.getsize(base + ".bin")
    if blob_size != manifest["total"] * 8:
        raise CorruptionError(
            f"weight blob holds {blob_size} bytes, manifest expects {manifest['total'] * 8}")
    flat = np.fromfile(base + ".bin", dtype="<f8")
    model = Transformer(ModelConfig(**manifest["config"]))
    if [p["name"] for p in manifest["params"]] != list(model.params):
        raise CorruptionError("checkpoint parameter names do not match the architecture")
    for entry in manifest["params"]:
        tensor = model.params[entry["name"]]
        shape = tuple(entry["shape"])
        if shape != tensor.data.shape:
            raise CorruptionError(f"parameter {entry['name']} has shape {shape}, "
                                  f"expected {tensor.data.shape}")
        n = int(np.prod(shape))
        tensor.data = flat[entry["offset"]:entry["offset"] + n].reshape(shape).copy()
    return model, manifest
