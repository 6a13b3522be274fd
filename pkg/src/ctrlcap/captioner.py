"""Control-conditioned GRU caption decoder.

The control embedding is added to every word embedding on the input side,
the image feature only initialises the hidden state.  All passes are
batched: row ``b`` of a batch carries its own feature, signal and target.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .corpus import Vocab
from .signals import (ControlSignal, ControlSpace, InvalidCaption, annotate, embed_control_batch,
                      positional_encoding)

CHECKPOINT_VERSION = 1

PARAM_NAMES = ("E", "W", "P", "Wz", "bz", "Wr", "br", "Wh", "bh", "O", "bo")


class CheckpointError(ValueError):
    pass


class VocabMismatch(CheckpointError):
    pass


@dataclass(frozen=True)
class Dims:
    vocab_size: int
    feature_dim: int
    num_levels: int
    d: int = 64
    dropout: float = 0.1
    positional: bool = False


@dataclass
class DecoderParams:
    tensors: Dict[str, ad.Tensor]
    dims: Dims

    def __getitem__(self, name: str) -> ad.Tensor:
        return self.tensors[name]

    def arrays(self) -> Dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def copy(self) -> "DecoderParams":
        return DecoderParams({k: ad.parameter(t.data.copy(), name=k) for k, t in self.tensors.items()},
                             self.dims)


def init_params(seed: int, dims: Dims) -> DecoderParams:
    if min(dims.vocab_size, dims.feature_dim, dims.d) <= 0:
        raise ValueError(f"dimensions must be positive: {dims}")
    if not 0.0 <= dims.dropout < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    d, V = dims.d, dims.vocab_size
    shapes = {
        "E": (V, d), "W": (dims.num_levels, d), "P": (dims.feature_dim, d),
        "Wz": (2 * d, d), "bz": (d,), "Wr": (2 * d, d), "br": (d,), "Wh": (2 * d, d), "bh": (d,),
        "O": (d, V), "bo": (V,),
    }
    tensors = {name: ad.parameter(rng.uniform(-0.1, 0.1, size=shapes[name]), name=name)
               for name in PARAM_NAMES}
    return DecoderParams(tensors, dims)


@dataclass
class Captioner:
    """Parameters plus everything needed to interpret them."""

    params: DecoderParams
    space: ControlSpace
    vocab: Vocab
    tags: Mapping[str, str]
    task: str = "length"
    meta: Dict[str, str] = field(default_factory=dict)

    @property
    def dims(self) -> Dims:
        return self.params.dims

    def words(self, ids: Sequence[int]) -> List[str]:
        return self.vocab.decode(ids)

    def annotate_words(self, words: Sequence[str], quality_score: Optional[float] = None,
                       reference: bool = False) -> Optional[ControlSignal]:
        if len(words) == 0:
            # an empty sample counts as a one-word caption without verbs
            sig = annotate(["<empty>"], self.space, {"<empty>": "OTHER"}, quality_score, reference)
            return sig
        return annotate(words, self.space, self.tags, quality_score, reference)


# ------------------------------------------------------------------ one GRU step

def _dropout_mask(rng: np.random.Generator, shape, rate: float) -> np.ndarray:
    return (rng.random(shape) >= rate) / (1.0 - rate)


def initial_state(params: DecoderParams, features: np.ndarray) -> ad.Tensor:
    return ad.tanh(ad.matmul(ad.constant(np.atleast_2d(features)), params["P"]))


def gru_step(params: DecoderParams, h: ad.Tensor, x: ad.Tensor) -> ad.Tensor:
    hx = ad.concat(h, x)
    z = ad.sigmoid(ad.add(ad.matmul(hx, params["Wz"]), params["bz"]))
    r = ad.sigmoid(ad.add(ad.matmul(hx, params["Wr"]), params["br"]))
    cand = ad.tanh(ad.add(ad.matmul(ad.concat(ad.elemwise_mul(r, h), x), params["Wh"]), params["bh"]))
    return ad.add(ad.elemwise_mul(ad.one_minus(z), h), ad.elemwise_mul(z, cand))


def step_log_probs(params: DecoderParams, h: ad.Tensor, prev_ids: Sequence[int], e_beta: ad.Tensor,
                   t: int, mask: Optional[np.ndarray]) -> Tuple[ad.Tensor, ad.Tensor]:
    """Advance one position; ``t`` is the 0-based output position."""
    x = ad.add(e_beta, ad.lookup_rows(params["E"], prev_ids))
    if params.dims.positional:
        x = ad.add(x, ad.constant(positional_encoding(t, params.dims.d)))
    h = gru_step(params, h, x)
    out = h if mask is None else ad.elemwise_mul(h, ad.constant(mask))
    logits = ad.add(ad.matmul(out, params["O"]), params["bo"])
    return ad.log_softmax(logits), h


def _no_grad(params: DecoderParams) -> DecoderParams:
    return DecoderParams({k: ad.constant(t.data) for k, t in params.tensors.items()}, params.dims)


# ------------------------------------------------------------------ teacher forcing

@dataclass
class TeacherPass:
    seq_log_prob: ad.Tensor            # [B]
    step_log_probs: List[np.ndarray]   # per row: [T_b, V]
    token_log_probs: List[np.ndarray]  # per row: [T_b]


def forward_teacher(model: Captioner, features: np.ndarray, signals: Sequence[Optional[ControlSignal]],
                    targets: Sequence[Sequence[int]], dropout_on: bool = False,
                    rng: Optional[np.random.Generator] = None, record: bool = True) -> TeacherPass:
    """Score target id sequences (EOS appended) under teacher forcing."""
    if any(len(t) == 0 for t in targets):
        raise InvalidCaption("empty target caption")
    seqs = [list(t) + [model.vocab.eos_id] for t in targets]
    return score_sequences(model, features, signals, seqs, dropout_on, rng, record)


def score_sequences(model: Captioner, features: np.ndarray, signals: Sequence[Optional[ControlSignal]],
                    seqs: Sequence[Sequence[int]], dropout_on: bool = False,
                    rng: Optional[np.random.Generator] = None, record: bool = True) -> TeacherPass:
    """Teacher-forced pass over sequences that already end in EOS."""
    params = model.params if record else _no_grad(model.params)
    B = len(seqs)
    vocab = model.vocab
    T = max(len(s) for s in seqs)
    tgt = np.full((B, T), vocab.pad_id, dtype=np.int64)
    valid = np.zeros((B, T))
    for b, s in enumerate(seqs):
        tgt[b, :len(s)] = s
        valid[b, :len(s)] = 1.0
    rate = model.dims.dropout
    use_dropout = dropout_on and rate > 0
    if use_dropout and rng is None:
        raise ValueError("dropout needs an rng")

    e_beta = embed_control_batch(signals, params["W"], model.space)
    h = initial_state(params, np.asarray(features))
    prev = np.full(B, vocab.bos_id, dtype=np.int64)
    total = None
    dists = []
    picks = []
    for t in range(T):
        mask = _dropout_mask(rng, (B, model.dims.d), rate) if use_dropout else None
        lp, h = step_log_probs(params, h, prev, e_beta, t, mask)
        pick = ad.pick_log_prob(lp, tgt[:, t])
        term = ad.elemwise_mul(pick, ad.constant(valid[:, t]))
        total = term if total is None else ad.add(total, term)
        dists.append(lp.data)
        picks.append(pick.data)
        prev = tgt[:, t]
    step = [np.stack([dists[t][b] for t in range(len(s))]) for b, s in enumerate(seqs)]
    tok = [np.array([picks[t][b] for t in range(len(s))]) for b, s in enumerate(seqs)]
    return TeacherPass(total, step, tok)


# ------------------------------------------------------------------ sampling

@dataclass
class Rollout:
    tokens: List[int]
    step_log_probs: List[np.ndarray]
    input_signal: Optional[ControlSignal]
    self_signal: Optional[ControlSignal]
    seq_log_prob: float
    words: List[str] = field(default_factory=list)
    row: int = 0


@dataclass
class SampleBatch:
    rollouts: List[Rollout]
    seq_log_prob: Optional[ad.Tensor]   # [B], graph-backed when recorded


def _draw(lp: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(np.exp(lp), axis=1)
    idx = (cdf < u[:, None] * cdf[:, -1:]).sum(axis=1)
    return np.minimum(idx, lp.shape[1] - 1)


def sample(model: Captioner, features: np.ndarray, signals: Sequence[Optional[ControlSignal]],
           rng: np.random.Generator, max_len: int = 20, dropout_on: bool = False,
           record: bool = False,
           annotate_fn: Optional[Callable[[List[str]], Optional[ControlSignal]]] = None) -> SampleBatch:
    """Ancestral sampling, one rollout per row; EOS is forced at ``max_len``."""
    if max_len < 2:
        raise ValueError("max_len must be at least 2")
    params = model.params if record else _no_grad(model.params)
    features = np.atleast_2d(np.asarray(features))
    B = features.shape[0]
    vocab = model.vocab
    rate = model.dims.dropout
    use_dropout = dropout_on and rate > 0

    e_beta = embed_control_batch(signals, params["W"], model.space)
    h = initial_state(params, features)
    prev = np.full(B, vocab.bos_id, dtype=np.int64)
    alive = np.ones(B, dtype=bool)
    tokens: List[List[int]] = [[] for _ in range(B)]
    dists: List[List[np.ndarray]] = [[] for _ in range(B)]
    total = None
    for t in range(max_len):
        mask = _dropout_mask(rng, (B, model.dims.d), rate) if use_dropout else None
        lp, h = step_log_probs(params, h, prev, e_beta, t, mask)
        u = rng.random(B)
        if t == max_len - 1:
            chosen = np.full(B, vocab.eos_id, dtype=np.int64)
        else:
            chosen = _draw(lp.data, u)
        chosen = np.where(alive, chosen, vocab.eos_id)
        pick = ad.pick_log_prob(lp, chosen)
        term = ad.elemwise_mul(pick, ad.constant(alive.astype(np.float64)))
        total = term if total is None else ad.add(total, term)
        for b in np.flatnonzero(alive):
            tokens[b].append(int(chosen[b]))
            dists[b].append(lp.data[b])
        alive &= chosen != vocab.eos_id
        prev = chosen
        if not alive.any():
            break
    if annotate_fn is None and model.space.quality is None:
        annotate_fn = model.annotate_words
    rollouts = []
    for b in range(B):
        words = model.words(tokens[b])
        # quality samples are annotated by the caller once their score is known
        self_signal = annotate_fn(words) if annotate_fn is not None else None
        rollouts.append(Rollout(tokens[b], dists[b], signals[b], self_signal, float(total.data[b]),
                                words, b))
    return SampleBatch(rollouts, total if record else None)


# ------------------------------------------------------------------ beam search

def beam_search_core(step_fn: Callable, init_state, beam_width: int, max_len: int,
                     eos_id: int, bos_id: int) -> Tuple[List[int], float]:
    """Generic beam search.

    ``step_fn(state, last_tokens, t) -> (log_probs [n, V], new_state)``; the
    state is an array indexed by beam row.  Each step keeps the top
    ``beam_width`` extensions by summed log-prob; extensions ending in EOS
    leave the beam for the finished pool.  The returned hypothesis is the
    finished one with the best log-prob per token (EOS counted).
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    seqs: List[List[int]] = [[]]
    scores = np.zeros(1)
    state = init_state
    last = np.array([bos_id])
    finished: List[Tuple[float, float, List[int]]] = []
    for t in range(max_len):
        lp, state = step_fn(state, last, t)
        V = lp.shape[1]
        if t == max_len - 1:
            # forced EOS for whatever is still alive
            for i, s in enumerate(seqs):
                tot = float(scores[i] + lp[i, eos_id])
                finished.append((tot / (len(s) + 1), tot, s + [eos_id]))
            break
        cand = (scores[:, None] + lp).reshape(-1)
        top = np.argsort(-cand, kind="stable")[:beam_width]
        rows, toks, new_scores = [], [], []
        for flat in top:
            row, tok = divmod(int(flat), V)
            tot = float(cand[flat])
            if tok == eos_id:
                s = seqs[row] + [eos_id]
                finished.append((tot / len(s), tot, s))
            else:
                rows.append(row)
                toks.append(tok)
                new_scores.append(tot)
        if not rows:
            break
        seqs = [seqs[r] + [k] for r, k in zip(rows, toks)]
        scores = np.array(new_scores)
        state = state[np.array(rows)]
        last = np.array(toks)
    best = max(finished, key=lambda f: (f[0], f[1]))
    return best[2], best[1]


def beam_search(model: Captioner, feature: np.ndarray, signal: Optional[ControlSignal],
                beam_width: int = 2, max_len: int = 20) -> Tuple[List[int], float]:
    """Return (token ids ending in EOS, summed log-prob) of the best finished beam."""
    params = _no_grad(model.params)
    e_row = embed_control_batch([signal], params["W"], model.space).data[0]
    h0 = initial_state(params, np.atleast_2d(feature)).data

    def step_fn(h, last, t):
        n = h.shape[0]
        lp, h_new = step_log_probs(params, ad.constant(h), last, ad.constant(np.tile(e_row, (n, 1))),
                                   t, None)
        return lp.data, h_new.data

    return beam_search_core(step_fn, h0, beam_width, max_len, model.vocab.eos_id, model.vocab.bos_id)


def greedy(model: Captioner, feature: np.ndarray, signal: Optional[ControlSignal],
           max_len: int = 20) -> List[int]:
    return beam_search(model, feature, signal, 1, max_len)[0]


# ------------------------------------------------------------------ checkpoints

def save_checkpoint(path: str, model: Captioner, extra: Optional[dict] = None,
                    adam: Optional[ad.AdamState] = None) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "dims": model.dims.__dict__,
        "task": model.task,
        "schemes": {
            "length": model.space.length.name if model.space.length else None,
            "tense": model.space.tense is not None,
            "quality": model.space.quality.name if model.space.quality else None,
        },
        "vocab": model.vocab.itos,
        "vocab_hash": model.vocab.hash,
        "tags": dict(model.tags),
        "meta": model.meta,
        "extra": extra or {},
    }
    arrays = {f"param/{k}": v for k, v in model.params.arrays().items()}
    if adam is not None:
        meta["adam_step"] = adam.step
        arrays.update({f"adam_m/{k}": v for k, v in adam.m.items()})
        arrays.update({f"adam_v/{k}": v for k, v in adam.v.items()})
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
             **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path: str, expect_vocab_hash: Optional[str] = None
                    ) -> Tuple[Captioner, Optional[ad.AdamState], dict]:
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {meta.get('version')}")
        vocab = Vocab(meta["vocab"])
        if vocab.itos != meta["vocab"] or vocab.hash != meta["vocab_hash"]:
            raise CheckpointError("checkpoint vocabulary is corrupt")
        if expect_vocab_hash is not None and expect_vocab_hash != vocab.hash:
            raise VocabMismatch(f"vocab hash mismatch: checkpoint {vocab.hash}, corpus {expect_vocab_hash}")
        dims = Dims(**meta["dims"])
        tensors = {k: ad.parameter(z[f"param/{k}"].copy(), name=k) for k in PARAM_NAMES}
        adam = None
        if "adam_step" in meta:
            adam = ad.AdamState({})
            adam.step = int(meta["adam_step"])
            adam.m = {k: z[f"adam_m/{k}"].copy() for k in PARAM_NAMES}
            adam.v = {k: z[f"adam_v/{k}"].copy() for k in PARAM_NAMES}
    sch = meta["schemes"]
    space = ControlSpace.build(length=sch["length"], tense=sch["tense"], quality=sch["quality"])
    model = Captioner(DecoderParams(tensors, dims), space, vocab, meta["tags"], meta["task"], meta["meta"])
    return model, adam, meta["extra"]
