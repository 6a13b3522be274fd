"""CIDEr-D scoring, the embedding-distance alignment reward, and their combination."""
from __future__ import annotations

import json
import math
import warnings
from collections import Counter
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .signals import ControlSignal, ControlSpace, SchemeError

Ngram = Tuple[str, ...]
MAX_N = 4


class EmptyCandidateWarning(UserWarning):
    pass


def ngram_counts(tokens: Sequence[str], n_max: int = MAX_N) -> Counter:
    counts: Counter = Counter()
    toks = tuple(tokens)
    for n in range(1, n_max + 1):
        for i in range(len(toks) - n + 1):
            counts[toks[i:i + n]] += 1
    return counts


@dataclass
class NgramStats:
    """Per-image document frequencies of every reference n-gram."""

    df: Dict[Ngram, int]
    num_images: int

    @classmethod
    def build(cls, ref_sets: Iterable[Sequence[Sequence[str]]]) -> "NgramStats":
        df: Counter = Counter()
        n_img = 0
        for refs in ref_sets:
            n_img += 1
            seen = set()
            for ref in refs:
                seen.update(ngram_counts(ref).keys())
            df.update(seen)
        if n_img == 0:
            raise ValueError("cannot build n-gram statistics from an empty corpus")
        return cls(dict(sorted(df.items())), n_img)

    @property
    def log_n(self) -> float:
        return math.log(float(self.num_images))

    def idf(self, g: Ngram) -> float:
        return self.log_n - math.log(max(1.0, float(self.df.get(g, 0))))

    def to_json(self) -> str:
        return json.dumps({"num_images": self.num_images,
                           "df": {" ".join(g): c for g, c in self.df.items()}}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NgramStats":
        raw = json.loads(text)
        return cls({tuple(k.split(" ")): int(v) for k, v in raw["df"].items()}, int(raw["num_images"]))


def build_ngram_stats(corpus) -> NgramStats:
    """``corpus`` is a Corpus or any iterable of reference sets."""
    images = getattr(corpus, "images", None)
    if images is not None:
        return NgramStats.build(img.refs for img in images)
    return NgramStats.build(corpus)


class _Cooked:
    __slots__ = ("vec", "norm", "length")

    def __init__(self, vec, norm, length):
        self.vec = vec
        self.norm = norm
        self.length = length


def _cook(tokens: Sequence[str], stats: NgramStats) -> _Cooked:
    vec: List[Dict[Ngram, float]] = [dict() for _ in range(MAX_N)]
    norm = [0.0] * MAX_N
    for g, tf in ngram_counts(tokens).items():
        n = len(g) - 1
        w = tf * stats.idf(g)
        vec[n][g] = w
        norm[n] += w * w
    return _Cooked(vec, [math.sqrt(x) for x in norm], len(tokens))


def _sim(hyp: _Cooked, ref: _Cooked, sigma: float, use_length_penalty: bool) -> float:
    vals = 0.0
    pen = 1.0
    if use_length_penalty:
        delta = float(hyp.length - ref.length)
        pen = math.exp(-(delta * delta) / (2.0 * sigma * sigma))
    for n in range(MAX_N):
        hv, rv = hyp.vec[n], ref.vec[n]
        v = 0.0
        for g, w in hv.items():
            r = rv.get(g)
            if r is not None:
                v += min(w, r) * r
        if hyp.norm[n] != 0.0 and ref.norm[n] != 0.0:
            v /= hyp.norm[n] * ref.norm[n]
        vals += v * pen
    return vals / MAX_N


class CiderD:
    """CIDEr-D scorer bound to fixed document frequencies.

    Cooked reference vectors are cached, so repeated scoring against the
    same reference set (the common case during training) is cheap.
    """

    def __init__(self, stats: NgramStats, sigma: float = 6.0, scale: float = 10.0):
        self.stats = stats
        self.sigma = sigma
        self.scale = scale
        self._cache: Dict[Tuple[str, ...], _Cooked] = {}

    def _cook_ref(self, ref: Sequence[str]) -> _Cooked:
        key = tuple(ref)
        c = self._cache.get(key)
        if c is None:
            c = self._cache[key] = _cook(key, self.stats)
        return c

    def score(self, candidate: Sequence[str], refs: Sequence[Sequence[str]],
              use_length_penalty: bool = True) -> float:
        if len(candidate) == 0:
            warnings.warn("empty candidate scored as 0", EmptyCandidateWarning, stacklevel=2)
            return 0.0
        if not refs:
            raise ValueError("CIDEr-D needs at least one reference")
        hyp = _cook(candidate, self.stats)
        total = 0.0
        for ref in refs:
            total += _sim(hyp, self._cook_ref(ref), self.sigma, use_length_penalty)
        return self.scale * total / len(refs)


def cider_d(candidate: Sequence[str], refs: Sequence[Sequence[str]], stats: NgramStats,
            sigma: float = 6.0, use_length_penalty: bool = True, scale: float = 10.0) -> float:
    return CiderD(stats, sigma, scale).score(candidate, refs, use_length_penalty)


def alignment_reward(signal_in: ControlSignal, signal_self: ControlSignal, W,
                     space: ControlSpace) -> float:
    """Negative mean per-component Euclidean distance between level embeddings, over sqrt(d)."""
    if signal_in.components() != signal_self.components():
        raise SchemeError(f"alignment needs matching components, got {signal_in.components()} "
                          f"and {signal_self.components()}")
    W = np.asarray(getattr(W, "data", W))
    rows_in = space.rows(signal_in)
    rows_self = space.rows(signal_self)
    d = W.shape[1]
    dist = 0.0
    for comp in space.components:
        dist += float(np.linalg.norm(W[rows_in[comp]] - W[rows_self[comp]]))
    return -dist / (len(space.components) * math.sqrt(d))


@dataclass(frozen=True)
class RewardBreakdown:
    cider: float
    align: float
    total: float
    lam: float = 1.0


def combined_reward(cider: float, align: float, lam: float = 1.0) -> RewardBreakdown:
    if lam < 0:
        raise ValueError("trade-off coefficient must be non-negative")
    return RewardBreakdown(cider, align, cider + lam * align, lam)
