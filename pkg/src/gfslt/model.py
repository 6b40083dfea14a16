"""Visual Encoder, Text Encoder, Text Decoder and the contrastive projection heads.

Parameters live in a flat :class:`~gfslt.numerics.ParameterStore` whose names
carry the sub-network prefix:

* ``ve.`` visual encoder (``ve.cnn``, ``ve.tb1``, ``ve.tb2``, ``ve.bridge`` form
  the visual embedding; ``ve.cls`` and ``ve.enc`` the transformer encoder)
* ``te.`` text encoder (stage 1 only)
* ``td.`` text decoder including the output layer
* ``heads.`` projection heads and the learnable logit scale (stage 1 only)
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import numerics as nx
from .corpus import EOS, PAD
from .numerics import ParameterStore, Tensor

NEG_INF = -1e9
LOGIT_SCALE_INIT = math.log(1 / 0.07)
FRAME_STD_FLOOR = 1e-2
LOGIT_SCALE_MAX = math.log(100.0)

GROUPS = {
    "visual_embedding": ("ve.cnn.", "ve.tb1.", "ve.tb2.", "ve.bridge."),
    "transformer_encoder": ("ve.cls", "ve.enc."),
    "text_decoder": ("td.",),
    "text_encoder": ("te.",),
    "heads": ("heads.",),
}


class InputError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 37
    channels: int = 1
    d_model: int = 128
    d_proj: int = 64
    heads: int = 4
    d_ff: int = 512
    enc_layers: int = 3
    text_enc_layers: int = 3
    dec_layers: int = 3
    cnn_channels: tuple[int, ...] = (8, 16, 32)
    tie_output: bool = False
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")


def group_of(name: str) -> str:
    for group, prefixes in GROUPS.items():
        if name.startswith(prefixes):
            return group
    raise KeyError(name)


# ---------------------------------------------------------------- initialisation

def _param_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


def _shapes(cfg: ModelConfig, parts) -> list[tuple[str, tuple, str]]:
    """(name, shape, init-kind) for every parameter of the requested parts."""
    d, ff, V = cfg.d_model, cfg.d_ff, cfg.vocab_size
    out: list[tuple[str, tuple, str]] = []

    def ln(p):
        out.extend([(f"{p}.g", (d,), "one"), (f"{p}.b", (d,), "zero")])

    def lin(p, i, o, kind="lecun"):
        out.extend([(f"{p}.w", (i, o), kind), (f"{p}.b", (o,), "zero")])

    def enc_layer(p):
        ln(f"{p}.ln1")
        lin(f"{p}.attn.qkv", d, 3 * d)
        lin(f"{p}.attn.o", d, d)
        ln(f"{p}.ln2")
        lin(f"{p}.ff1", d, ff, "he")
        lin(f"{p}.ff2", ff, d)

    if "ve" in parts:
        cin = cfg.channels
        for i, c in enumerate(cfg.cnn_channels):
            out.extend([(f"ve.cnn.{i}.w", (3, 3, cin, c), "he"), (f"ve.cnn.{i}.b", (c,), "zero")])
            cin = c
        for blk, din in (("ve.tb1", cin), ("ve.tb2", d)):
            out.extend([(f"{blk}.w", (5, din, d), "he"), (f"{blk}.b", (d,), "zero")])
            ln(f"{blk}.ln")
        lin("ve.bridge", d, d, "he")
        ln("ve.bridge.ln")
        out.append(("ve.cls", (d,), "emb"))
        for layer in range(cfg.enc_layers):
            enc_layer(f"ve.enc.{layer}")
        ln("ve.enc.ln")
    if "te" in parts:
        out.append(("te.emb", (V, d), "emb"))
        for layer in range(cfg.text_enc_layers):
            enc_layer(f"te.enc.{layer}")
        ln("te.enc.ln")
    if "td" in parts:
        out.append(("td.emb", (V, d), "emb"))
        for layer in range(cfg.dec_layers):
            p = f"td.dec.{layer}"
            ln(f"{p}.ln1")
            lin(f"{p}.self.qkv", d, 3 * d)
            lin(f"{p}.self.o", d, d)
            ln(f"{p}.ln2")
            lin(f"{p}.cross.q", d, d)
            lin(f"{p}.cross.kv", d, 2 * d)
            lin(f"{p}.cross.o", d, d)
            ln(f"{p}.ln3")
            lin(f"{p}.ff1", d, ff, "he")
            lin(f"{p}.ff2", ff, d)
        ln("td.ln")
        if not cfg.tie_output:
            out.append(("td.out.w", (d, V), "lecun"))
        out.append(("td.out.b", (V,), "zero"))
    if "heads" in parts:
        lin("heads.v", d, cfg.d_proj)
        lin("heads.t", d, cfg.d_proj)
        out.append(("heads.logit_scale", (1,), "logit_scale"))
    return out


def _init_array(name: str, shape: tuple, kind: str, seed: int, d_model: int) -> np.ndarray:
    if kind == "zero":
        return np.zeros(shape, np.float32)
    if kind == "one":
        return np.ones(shape, np.float32)
    if kind == "logit_scale":
        return np.full(shape, LOGIT_SCALE_INIT, np.float32)
    rng = _param_rng(seed, name)
    fan_in = int(np.prod(shape[:-1]))
    std = {"lecun": math.sqrt(1.0 / fan_in), "he": math.sqrt(2.0 / fan_in),
           "emb": d_model ** -0.5}[kind]
    return (rng.standard_normal(shape) * std).astype(np.float32)


def init_params(cfg: ModelConfig, seed: int, parts=("ve", "te", "td", "heads")) -> ParameterStore:
    """Fresh parameters; each tensor's values depend only on ``(seed, name)``."""
    store = ParameterStore()
    for name, shape, kind in _shapes(cfg, parts):
        store.add(name, _init_array(name, shape, kind, seed, cfg.d_model))
    return store


# ---------------------------------------------------------------- building blocks

@lru_cache(maxsize=32)
def positional_encoding(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    div = np.exp(np.arange(0, d, 2) * (-math.log(10000.0) / d))
    pe = np.zeros((length, d), np.float64)
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div)[:, : d // 2]
    pe = pe.astype(np.float32)
    pe.flags.writeable = False
    return pe


def _ln(P: ParameterStore, p: str, x: Tensor, eps: float) -> Tensor:
    return nx.layer_norm(x, P[f"{p}.g"], P[f"{p}.b"], eps)


def _lin(P: ParameterStore, p: str, x: Tensor) -> Tensor:
    return nx.linear(x, P[f"{p}.w"], P[f"{p}.b"])


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, L, d = x.shape
    return nx.transpose(nx.reshape(x, (B, L, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, h, L, dh = x.shape
    return nx.reshape(nx.transpose(x, (0, 2, 1, 3)), (B, L, h * dh))


def attention(q: Tensor, k: Tensor, v: Tensor, bias: np.ndarray, heads: int) -> Tensor:
    """Scaled dot-product attention; ``bias`` is an additive ``[B,1|h,Lq,Lk]`` mask."""
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    dh = qh.shape[-1]
    scores = nx.matmul(qh, nx.transpose(kh, (0, 1, 3, 2)))
    scores = nx.add(nx.mul(scores, 1.0 / math.sqrt(dh)), bias.astype(scores.data.dtype))
    return _merge_heads(nx.matmul(nx.softmax(scores, axis=-1), vh))


def _key_bias(key_valid: np.ndarray) -> np.ndarray:
    return np.where(key_valid, 0.0, NEG_INF).astype(np.float32)[:, None, None, :]


def _split_last(x: Tensor, parts: int) -> list[Tensor]:
    d = x.shape[-1] // parts
    return [nx.getitem(x, (Ellipsis, slice(i * d, (i + 1) * d))) for i in range(parts)]


def encoder_layer(P: ParameterStore, p: str, x: Tensor, bias: np.ndarray, cfg: ModelConfig) -> Tensor:
    h = _ln(P, f"{p}.ln1", x, cfg.ln_eps)
    q, k, v = _split_last(_lin(P, f"{p}.attn.qkv", h), 3)
    x = nx.add(x, _lin(P, f"{p}.attn.o", attention(q, k, v, bias, cfg.heads)))
    h = _ln(P, f"{p}.ln2", x, cfg.ln_eps)
    h = _lin(P, f"{p}.ff2", nx.relu(_lin(P, f"{p}.ff1", h)))
    return nx.add(x, h)


def decoder_layer(P: ParameterStore, p: str, y: Tensor, self_bias: np.ndarray,
                  memory: Tensor, mem_bias: np.ndarray, cfg: ModelConfig) -> Tensor:
    h = _ln(P, f"{p}.ln1", y, cfg.ln_eps)
    q, k, v = _split_last(_lin(P, f"{p}.self.qkv", h), 3)
    y = nx.add(y, _lin(P, f"{p}.self.o", attention(q, k, v, self_bias, cfg.heads)))
    h = _ln(P, f"{p}.ln2", y, cfg.ln_eps)
    q = _lin(P, f"{p}.cross.q", h)
    k, v = _split_last(_lin(P, f"{p}.cross.kv", memory), 2)
    y = nx.add(y, _lin(P, f"{p}.cross.o", attention(q, k, v, mem_bias, cfg.heads)))
    h = _ln(P, f"{p}.ln3", y, cfg.ln_eps)
    h = _lin(P, f"{p}.ff2", nx.relu(_lin(P, f"{p}.ff1", h)))
    return nx.add(y, h)


# ---------------------------------------------------------------- visual encoder

@dataclass
class Encoded:
    sequence: Tensor      # [B, L, d]
    mask: np.ndarray      # [B, L] True at real positions
    summary: Tensor       # [B, d]  (CLS output, or EOS output for text)


def pooled_length(valid_len: int) -> int:
    """Number of visual tokens (before CLS) for a clip with ``valid_len`` frames."""
    return -(-valid_len // 4)


def frame_features(P: ParameterStore, frames: np.ndarray, cfg: ModelConfig) -> Tensor:
    """Weight-shared per-frame CNN: ``[N,H,W,C] -> [N, cnn_channels[-1]]``."""
    # per-frame standardisation: sparse glyph frames otherwise give the CNN tiny gradients
    mu = frames.mean(axis=(1, 2, 3), keepdims=True)
    sd = frames.std(axis=(1, 2, 3), keepdims=True)
    x = Tensor(((frames - mu) / (sd + FRAME_STD_FLOOR)).astype(frames.dtype))
    for i in range(len(cfg.cnn_channels)):
        # relu and max-pool commute; pooling first quarters the relu work
        x = nx.relu(nx.maxpool2d(nx.conv2d(x, P[f"ve.cnn.{i}.w"], P[f"ve.cnn.{i}.b"], padding=1)))
    return nx.mean(x, axis=(1, 2))


def _temporal_block(P: ParameterStore, p: str, x: Tensor, keep: np.ndarray, cfg) -> Tensor:
    x = nx.conv1d(x, P[f"{p}.w"], P[f"{p}.b"], stride=1, padding=2)
    x = nx.maxpool1d(nx.relu(_ln(P, f"{p}.ln", x, cfg.ln_eps)), window=2, stride=2)
    return nx.mul(x, keep[:, :, None].astype(x.data.dtype))


def visual_encode(P: ParameterStore, clips: list[np.ndarray], valid_lens, cfg: ModelConfig) -> Encoded:
    """Encode a batch of clips (each ``[T_i,H,W,C]``; frames past ``valid_lens[i]`` ignored).

    Each clip is padded with masked frames up to a multiple of four, so its
    visual sequence has ``ceil(valid/4)`` pooled positions plus the CLS token.
    """
    valid = np.asarray(valid_lens, dtype=np.int64)
    if (valid < 4).any():
        raise InputError(f"clip too short: need >= 4 valid frames, got {int(valid.min())}")
    B = len(clips)
    t_eff = 4 * ((valid + 3) // 4)
    t_pad = int(t_eff.max())
    stack = np.concatenate([c[:v] for c, v in zip(clips, valid)])
    feats = frame_features(P, stack, cfg)
    d_frame = feats.shape[-1]
    # scatter valid frame features into a zero-padded [B, t_pad, d_frame] grid
    idx = np.full((B, t_pad), len(stack), dtype=np.int64)
    start = 0
    for b, v in enumerate(valid):
        idx[b, :v] = np.arange(start, start + v)
        start += v
    table = nx.concat([feats, Tensor(np.zeros((1, d_frame), feats.data.dtype))], axis=0)
    x = nx.embedding_lookup(table, idx)
    pos = np.arange(t_pad // 2)
    x = _temporal_block(P, "ve.tb1", x, pos[None] < (t_eff // 2)[:, None], cfg)
    m = t_eff // 4
    keep = np.arange(t_pad // 4)[None] < m[:, None]
    x = _temporal_block(P, "ve.tb2", x, keep, cfg)
    x = nx.relu(_ln(P, "ve.bridge.ln", _lin(P, "ve.bridge", x), cfg.ln_eps))
    d = cfg.d_model
    cls = nx.add(nx.reshape(P["ve.cls"], (1, 1, d)), np.zeros((B, 1, d), x.data.dtype))
    x = nx.concat([cls, x], axis=1)
    L = x.shape[1]
    x = nx.add(x, positional_encoding(L, d))
    mask = np.concatenate([np.ones((B, 1), bool), keep], axis=1)
    bias = _key_bias(mask)
    for layer in range(cfg.enc_layers):
        x = encoder_layer(P, f"ve.enc.{layer}", x, bias, cfg)
    x = _ln(P, "ve.enc.ln", x, cfg.ln_eps)
    return Encoded(x, mask, nx.getitem(x, (slice(None), 0)))


# ---------------------------------------------------------------- text side

def _embed(P: ParameterStore, table: str, ids: np.ndarray, d: int) -> Tensor:
    x = nx.mul(nx.embedding_lookup(P[table], ids), math.sqrt(d))
    return nx.add(x, positional_encoding(ids.shape[1], d))


def text_encode(P: ParameterStore, ids: np.ndarray, cfg: ModelConfig) -> Encoded:
    """Encode PAD-right-padded token rows ``[B, U]``; summary is the EOS output."""
    ids = np.asarray(ids, dtype=np.int64)
    eos_count = (ids == EOS).sum(axis=1)
    if (eos_count != 1).any():
        raise InputError(f"each sentence needs exactly one EOS, got counts {eos_count.tolist()}")
    mask = ids != PAD
    x = _embed(P, "te.emb", ids, cfg.d_model)
    bias = _key_bias(mask)
    for layer in range(cfg.text_enc_layers):
        x = encoder_layer(P, f"te.enc.{layer}", x, bias, cfg)
    x = _ln(P, "te.enc.ln", x, cfg.ln_eps)
    eos_pos = (ids == EOS).argmax(axis=1)
    return Encoded(x, mask, nx.getitem(x, (np.arange(len(ids)), eos_pos)))


def text_decode(P: ParameterStore, prefix: np.ndarray, memory: Tensor, memory_mask: np.ndarray,
                cfg: ModelConfig) -> Tensor:
    """Teacher-forced logits ``[B, u, V]``; position ``i`` predicts token ``i+1``."""
    prefix = np.asarray(prefix, dtype=np.int64)
    if prefix.ndim != 2 or prefix.shape[1] == 0:
        raise InputError("decoder prefix must be a non-empty [B, u] array")
    if memory.shape[1] == 0:
        raise InputError("decoder memory is empty")
    B, u = prefix.shape
    causal = np.tril(np.ones((u, u), bool))
    self_valid = causal[None] & (prefix != PAD)[:, None, :]
    self_bias = np.where(self_valid, 0.0, NEG_INF).astype(np.float32)[:, None]
    mem_bias = _key_bias(memory_mask)
    y = _embed(P, "td.emb", prefix, cfg.d_model)
    for layer in range(cfg.dec_layers):
        y = decoder_layer(P, f"td.dec.{layer}", y, self_bias, memory, mem_bias, cfg)
    y = _ln(P, "td.ln", y, cfg.ln_eps)
    if cfg.tie_output:
        w = nx.transpose(P["td.emb"], (1, 0))
        return nx.add(nx.matmul(y, w), P["td.out.b"])
    return nx.linear(y, P["td.out.w"], P["td.out.b"])


# ---------------------------------------------------------------- projection heads

@dataclass
class Projected:
    v: Tensor
    t: Tensor
    scale: Tensor


def logit_scale(P: ParameterStore) -> Tensor:
    return nx.exp(nx.minimum(P["heads.logit_scale"], LOGIT_SCALE_MAX))


def project(P: ParameterStore, visual_cls: Tensor, text_eos: Tensor) -> Projected:
    """Map both summaries to unit vectors in the joint space, plus the pair scale."""
    v = nx.l2_normalize(_lin(P, "heads.v", visual_cls), axis=-1)
    t = nx.l2_normalize(_lin(P, "heads.t", text_eos), axis=-1)
    return Projected(v, t, logit_scale(P))


def pad_batch(seqs, pad: int = PAD) -> np.ndarray:
    L = max(len(s) for s in seqs)
    out = np.full((len(seqs), L), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out
