"""Metadata prompts, visual token projection and a small encoder-decoder transformer.

The prompt is encoded by a bidirectional transformer encoder; its outputs are
concatenated with the projected visual tokens to form the memory that every
decoder layer cross-attends to.  All sub-layers are pre-norm residual blocks.
"""
from __future__ import annotations

import itertools
import re
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .datamodel import (BOS_ID, EOS_ID, ERYTHEMA_LEVELS, FRIABILITY_LEVELS, MES_GRADES, PAD_ID,
                        ULCERATION_LEVELS, VASCULAR_PATTERNS, ClinicalMetadata, Vocabulary)
from .diffcore import DiffArray, ShapeError
from .diffcore.nn import Embedding, LayerNorm, Linear, Module
from .encoder import module_rng

NEG_INF = -1e9
PROJ_EPS = 1e-8

# -- prompts ---------------------------------------------------------------------------

_PROMPT_RE = re.compile(
    r"^MES-(?P<mes>\d); bleeding: (?P<bleeding>yes|no); erythema: (?P<erythema>\w+); "
    r"friability: (?P<friability>\w+); ulceration: (?P<ulceration>\w+); vascular: (?P<vascular>\w+)$")


def build_prompt(meta: ClinicalMetadata | None) -> str:
    """``MES-<g>; bleeding: <yes|no>; erythema: ..; friability: ..; ulceration: ..; vascular: ..``.

    ``None`` gives the empty prompt used when clinical prompts are disabled.
    """
    if meta is None:
        return ""
    return (f"MES-{meta.mes}; bleeding: {'yes' if meta.bleeding else 'no'}; erythema: {meta.erythema}; "
            f"friability: {meta.friability}; ulceration: {meta.ulceration}; vascular: {meta.vascular_pattern}")


def parse_prompt(prompt: str) -> ClinicalMetadata:
    m = _PROMPT_RE.match(prompt)
    if m is None:
        raise ValueError(f"malformed prompt: {prompt!r}")
    return ClinicalMetadata(int(m["mes"]), m["vascular"], m["bleeding"] == "yes", m["erythema"],
                            m["friability"], m["ulceration"])


def all_metadata():
    """Every schema-valid metadata combination."""
    for mes, vasc, bleed, ery, fri, ulc in itertools.product(
            MES_GRADES, VASCULAR_PATTERNS, (False, True), ERYTHEMA_LEVELS, FRIABILITY_LEVELS, ULCERATION_LEVELS):
        if mes == 0 and (bleed or ulc != "none"):
            continue
        yield ClinicalMetadata(mes, vasc, bleed, ery, fri, ulc)


def prompt_corpus() -> list[str]:
    """Strings covering every token a prompt can contain."""
    words = [f"MES-{g};" for g in MES_GRADES] + ["bleeding: yes; no; erythema: friability: ulceration: vascular:"]
    words += [" ".join(ERYTHEMA_LEVELS + FRIABILITY_LEVELS + ULCERATION_LEVELS + VASCULAR_PATTERNS)]
    return words


# -- positional encodings ------------------------------------------------------------------

def sinusoid(positions: np.ndarray, dim: int) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.float64)
    i = np.arange(dim // 2)
    freq = 1.0 / (10000.0 ** (2 * i / dim))
    ang = positions[:, None] * freq[None]
    out = np.zeros((len(positions), dim))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def positional_encoding_2d(h: int, w: int, dim: int) -> np.ndarray:
    """(h*w, dim): first half encodes the row index, second half the column."""
    if dim % 4:
        raise ValueError("2-D positional encoding needs dim divisible by 4")
    rows, cols = np.divmod(np.arange(h * w), w)
    return np.concatenate([sinusoid(rows, dim // 2), sinusoid(cols, dim // 2)], axis=1)


# -- layers ------------------------------------------------------------------------------

@dataclass(frozen=True)
class DecoderConfig:
    vocab_size: int
    d_model: int = 64
    heads: int = 4
    encoder_layers: int = 1
    decoder_layers: int = 2
    ffn_dim: int = 128
    max_len: int = 48

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.d_model % 4:
            raise ValueError("d_model must be divisible by 4 for 2-D positions")


class MultiHeadAttention(Module):
    def __init__(self, rng, d: int, heads: int):
        self.q = Linear(rng, d, d)
        self.k = Linear(rng, d, d)
        self.v = Linear(rng, d, d)
        self.o = Linear(rng, d, d)
        self._heads = heads
        self._last_weights = None

    def _split(self, x: DiffArray) -> DiffArray:
        n, t, d = x.shape
        return dc.transpose(dc.reshape(x, (n, t, self._heads, d // self._heads)), (0, 2, 1, 3))

    def __call__(self, x: DiffArray, memory: DiffArray, mask: np.ndarray | None = None) -> DiffArray:
        n, t, d = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(memory)), self._split(self.v(memory))
        scores = dc.mul(dc.matmul(q, dc.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(d // self._heads))
        if mask is not None:
            scores = dc.add(scores, mask.astype(scores.dtype))
        weights = dc.softmax(scores, axis=-1)
        self._last_weights = weights.data
        ctx = dc.reshape(dc.transpose(dc.matmul(weights, v), (0, 2, 1, 3)), (n, t, d))
        return self.o(ctx)


class FeedForward(Module):
    def __init__(self, rng, d: int, hidden: int):
        self.fc1 = Linear(rng, d, hidden)
        self.fc2 = Linear(rng, hidden, d)

    def __call__(self, x):
        return self.fc2(dc.relu(self.fc1(x)))


class EncoderLayer(Module):
    def __init__(self, rng, cfg: DecoderConfig):
        self.ln1 = LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(rng, cfg.d_model, cfg.heads)
        self.ln2 = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(rng, cfg.d_model, cfg.ffn_dim)

    def __call__(self, x, mask):
        h = self.ln1(x)
        x = dc.add(x, self.attn(h, h, mask))
        return dc.add(x, self.ffn(self.ln2(x)))


class DecoderLayer(Module):
    def __init__(self, rng, cfg: DecoderConfig):
        self.ln1 = LayerNorm(cfg.d_model)
        self.self_attn = MultiHeadAttention(rng, cfg.d_model, cfg.heads)
        self.ln2 = LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(rng, cfg.d_model, cfg.heads)
        self.ln3 = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(rng, cfg.d_model, cfg.ffn_dim)

    def __call__(self, x, memory, self_mask, mem_mask):
        h = self.ln1(x)
        x = dc.add(x, self.self_attn(h, h, self_mask))
        x = dc.add(x, self.cross_attn(self.ln2(x), memory, mem_mask))
        return dc.add(x, self.ffn(self.ln3(x)))


class VisualProjection(Module):
    """Flatten (N, C, H, W) to H*W tokens, project C -> d, layer-norm, add 2-D positions."""

    def __init__(self, rng, channels: int, d_model: int):
        self.linear = Linear(rng, channels, d_model)
        self._channels = channels
        self._d = d_model

    def normalized(self, f: DiffArray) -> DiffArray:
        if f.ndim != 4 or f.shape[1] != self._channels:
            raise ShapeError("project_visual", f.shape, (self._channels,), detail="channel count mismatch")
        if not np.isfinite(f.data).all():
            raise ValueError("project_visual: non-finite features")
        n, c, h, w = f.shape
        tokens = dc.transpose(dc.reshape(f, (n, c, h * w)), (0, 2, 1))
        return dc.layer_norm(self.linear(tokens), -1, PROJ_EPS)

    def __call__(self, f: DiffArray) -> DiffArray:
        h, w = f.shape[-2:]
        pe = positional_encoding_2d(h, w, self._d).astype(f.dtype)
        return dc.add(self.normalized(f), pe)


def project_visual(f: DiffArray, projection: VisualProjection) -> DiffArray:
    return projection(f)


def causal_mask(t: int) -> np.ndarray:
    return np.triu(np.full((t, t), NEG_INF), k=1)


def pad_batch(seqs, pad: int = PAD_ID, length: int | None = None) -> np.ndarray:
    length = max((len(s) for s in seqs), default=0) if length is None else length
    out = np.full((len(seqs), length), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s[:length]
    return out


@dataclass
class Memory:
    tokens: DiffArray          # (N, S, d)
    mask: np.ndarray | None    # additive, (N, 1, 1, S), or None

    def select(self, idx) -> "Memory":
        idx = np.asarray(idx)
        return Memory(DiffArray(self.tokens.data[idx]), None if self.mask is None else self.mask[idx])


class CaptionDecoder(Module):
    def __init__(self, cfg: DecoderConfig, seed: int = 0):
        rng = module_rng(seed, "captioner")
        self.cfg = cfg
        self.embed = Embedding(rng, cfg.vocab_size, cfg.d_model)
        self.prompt_layers = [EncoderLayer(rng, cfg) for _ in range(cfg.encoder_layers)]
        self.prompt_norm = LayerNorm(cfg.d_model)
        self.layers = [DecoderLayer(rng, cfg) for _ in range(cfg.decoder_layers)]
        self.final_norm = LayerNorm(cfg.d_model)
        self.out = Linear(rng, cfg.d_model, cfg.vocab_size)
        self._pe = sinusoid(np.arange(max(cfg.max_len, 64)), cfg.d_model)

    def _embed(self, ids: np.ndarray) -> DiffArray:
        e = dc.mul(self.embed(ids), np.sqrt(self.cfg.d_model))
        return dc.add(e, self._pe[:ids.shape[1]].astype(e.dtype))

    def encode_memory(self, prompt_ids: np.ndarray, visual: DiffArray) -> Memory:
        """Memory = [encoded prompt; visual tokens].  ``prompt_ids`` is (N, P), PAD-padded."""
        prompt_ids = np.asarray(prompt_ids, dtype=np.int64)
        n = visual.shape[0]
        if prompt_ids.ndim != 2 or prompt_ids.shape[0] != n:
            raise ShapeError("encode_memory", prompt_ids.shape, visual.shape)
        if prompt_ids.shape[1] == 0:
            return Memory(visual, None)
        valid = prompt_ids != PAD_ID
        key_mask = np.where(valid, 0.0, NEG_INF)[:, None, None, :]
        x = self._embed(prompt_ids)
        for layer in self.prompt_layers:
            x = layer(x, key_mask)
        x = self.prompt_norm(x)
        mem = dc.concat([x, visual], axis=1)
        full_valid = np.concatenate([valid, np.ones((n, visual.shape[1]), dtype=bool)], axis=1)
        return Memory(mem, np.where(full_valid, 0.0, NEG_INF)[:, None, None, :])

    def forward(self, memory: Memory, prefix_ids: np.ndarray) -> DiffArray:
        """Logits (N, T, V) for every position of the teacher-forced prefix."""
        prefix_ids = np.asarray(prefix_ids, dtype=np.int64)
        t = prefix_ids.shape[1]
        if t > self.cfg.max_len:
            raise ShapeError("decode", prefix_ids.shape, (self.cfg.max_len,), detail="prefix longer than max_len")
        x = self._embed(prefix_ids)
        mask = causal_mask(t)
        for layer in self.layers:
            x = layer(x, memory.tokens, mask, memory.mask)
        return self.out(self.final_norm(x))

    def decode_step(self, prompt_ids, visual: DiffArray, prefix_ids) -> DiffArray:
        """Next-token logits (N, V) given a prompt, visual tokens and the prefix so far."""
        prefix_ids = np.atleast_2d(np.asarray(prefix_ids, dtype=np.int64))
        if prefix_ids.shape[1] >= self.cfg.max_len:
            raise ShapeError("decode_step", prefix_ids.shape, (self.cfg.max_len,),
                             detail="prefix must be shorter than max_len")
        return _last(self.forward(self.encode_memory(prompt_ids, visual), prefix_ids))


def _last(logits: DiffArray) -> DiffArray:
    n, t, v = logits.shape
    sel = np.zeros((1, t, 1), dtype=logits.dtype)
    sel[0, -1, 0] = 1.0
    return dc.reduce_sum(dc.mul(logits, sel), axis=1)


# -- generation ----------------------------------------------------------------------

_BLOCKED = (PAD_ID, BOS_ID)


def step_logprobs(logits: np.ndarray) -> np.ndarray:
    """Log-softmax over the generable vocabulary (PAD and BOS excluded)."""
    z = np.array(logits, dtype=np.float64)
    z[..., list(_BLOCKED)] = -np.inf
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class Generated:
    ids: list[int]
    logprob: float
    truncated: bool


def greedy_decode(model: CaptionDecoder, memory: Memory, max_len: int | None = None) -> list[Generated]:
    max_len = model.cfg.max_len if max_len is None else max_len
    n = memory.tokens.shape[0]
    prefix = np.full((n, 1), BOS_ID, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    logp = np.zeros(n)
    out = [[] for _ in range(n)]
    for _ in range(max_len):
        lp = step_logprobs(model.forward(memory, prefix).data[:, -1])
        nxt = lp.argmax(axis=1)
        for i in np.flatnonzero(~done):
            logp[i] += lp[i, nxt[i]]
            out[i].append(int(nxt[i]))
            if nxt[i] == EOS_ID:
                done[i] = True
        if done.all():
            break
        prefix = np.concatenate([prefix, np.where(done, PAD_ID, nxt)[:, None]], axis=1)
    return [Generated(ids[:-1] if ids and ids[-1] == EOS_ID else ids, float(logp[i]),
                      not (ids and ids[-1] == EOS_ID)) for i, ids in enumerate(out)]


def beam_search(model: CaptionDecoder, memory: Memory, width: int = 3,
                max_len: int | None = None) -> Generated:
    """Beam search for a single memory (batch of 1); ranks by total log-probability."""
    if memory.tokens.shape[0] != 1:
        raise ValueError("beam_search decodes one item at a time")
    max_len = model.cfg.max_len if max_len is None else max_len
    beams = [([], 0.0)]
    finished: list[tuple[list[int], float]] = []
    for step in range(max_len):
        prefix = np.array([[BOS_ID] + ids for ids, _ in beams], dtype=np.int64)
        mem = memory.select(np.zeros(len(beams), dtype=int))
        lp = step_logprobs(model.forward(mem, prefix).data[:, -1])
        cand = (np.array([s for _, s in beams])[:, None] + lp).reshape(-1)
        order = np.argsort(-cand, kind="stable")
        v = lp.shape[1]
        new_beams = []
        for flat in order:
            if not np.isfinite(cand[flat]) or len(new_beams) >= width:
                break
            b, tok = divmod(int(flat), v)
            ids = beams[b][0] + [tok]
            if tok == EOS_ID:
                finished.append((ids, float(cand[flat])))
            else:
                new_beams.append((ids, float(cand[flat])))
            if len(finished) >= width:
                break
        beams = new_beams
        if not beams or len(finished) >= width:
            break
        if finished and max(s for _, s in finished) >= max(s for _, s in beams):
            # log-probs only decrease, no live beam can overtake the best finished one
            break
    pool = [(ids, s, False) for ids, s in finished] + [(ids, s, True) for ids, s in beams]
    ids, score, truncated = max(pool, key=lambda x: x[1])
    if not truncated:
        ids = ids[:-1]
    return Generated(ids, score, truncated)


def sequence_logprob(model: CaptionDecoder, memory: Memory, ids: list[int]) -> float:
    """Total log-probability of emitting ``ids`` (which may end in EOS)."""
    prefix = np.array([[BOS_ID] + list(ids[:-1])], dtype=np.int64)
    lp = step_logprobs(model.forward(memory, prefix).data[0])
    return float(sum(lp[i, t] for i, t in enumerate(ids)))


def generate(model: CaptionDecoder, memory: Memory, vocab: Vocabulary, strategy: str = "greedy",
             beam_width: int = 3) -> list[dict]:
    """Captions for a batch of memories as ``{caption, truncated, logprob}`` dicts."""
    if strategy == "greedy":
        results = greedy_decode(model, memory)
    elif strategy == "beam":
        results = [beam_search(model, memory.select([i]), beam_width) for i in range(memory.tokens.shape[0])]
    else:
        raise ValueError(f"unknown decoding strategy {strategy!r}")
    return [{"caption": vocab.decode(r.ids), "truncated": r.truncated, "logprob": r.logprob} for r in results]
