"""BLEU, CIDEr-D under the 1-to-1 / 1-to-5 protocols, and control precision."""
from __future__ import annotations

import io
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .captioner import Captioner, beam_search
from .corpus import Corpus, ImageInstance
from .rewards import CiderD, NgramStats
from .signals import ControlSignal, gt_quality_score


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_len(c: int, refs: Sequence[Sequence[str]]) -> int:
    return min((abs(len(r) - c), len(r)) for r in refs)[1]


def _bleu_stats(candidate, refs, max_n):
    matches, totals = [], []
    for n in range(1, max_n + 1):
        cand = _ngrams(candidate, n)
        max_ref: Counter = Counter()
        for r in refs:
            for g, c in _ngrams(r, n).items():
                max_ref[g] = max(max_ref[g], c)
        matches.append(sum(min(c, max_ref[g]) for g, c in cand.items()))
        totals.append(max(len(candidate) - n + 1, 0))
    return matches, totals, len(candidate), _closest_ref_len(len(candidate), refs)


def _combine(matches, totals, c_len, r_len):
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len) if c_len > 0 else 0.0
    out = []
    log_sum = 0.0
    for n, (m, t) in enumerate(zip(matches, totals), 1):
        if m == 0 or t == 0:
            out.extend([0.0] * (len(matches) - n + 1))
            break
        log_sum += math.log(m / t)
        out.append(bp * math.exp(log_sum / n))
    return out


def bleu(candidate: Sequence[str], refs: Sequence[Sequence[str]], max_n: int = 4) -> List[float]:
    """Sentence BLEU-1..BLEU-max_n (clipped precision, closest-length brevity penalty)."""
    if len(candidate) == 0:
        raise ValueError("BLEU needs a non-empty candidate")
    return _combine(*_bleu_stats(candidate, refs, max_n))


def corpus_bleu(candidates: Sequence[Sequence[str]], ref_sets: Sequence[Sequence[Sequence[str]]],
                max_n: int = 4) -> List[float]:
    """Corpus BLEU: n-gram matches and lengths are pooled before combining."""
    M = np.zeros(max_n)
    T = np.zeros(max_n)
    c_tot = r_tot = 0
    for cand, refs in zip(candidates, ref_sets):
        m, t, c, r = _bleu_stats(cand, refs, max_n)
        M += m
        T += t
        c_tot += c
        r_tot += r
    if c_tot == 0:
        return [0.0] * max_n
    return _combine([int(x) for x in M], [int(x) for x in T], c_tot, r_tot)


# ------------------------------------------------------------------ generation

@dataclass
class Generation:
    image: ImageInstance
    ref_index: Optional[int]
    signal: Optional[ControlSignal]
    words: List[str]


GenerateFn = Callable[[ImageInstance, Optional[int], Optional[ControlSignal]], List[str]]


def reference_signals(model: Captioner, image: ImageInstance, stats: Optional[NgramStats]
                      ) -> List[Optional[ControlSignal]]:
    """Control signal carried by each reference (ground-truth thresholds for quality)."""
    out = []
    for i, ref in enumerate(image.refs):
        score = None
        if model.space.quality is not None:
            score = gt_quality_score(i, image.refs, stats)
        out.append(model.annotate_words(list(ref), score, reference=True))
    return out


def _model_generator(model: Captioner, beam: int, max_len: int) -> GenerateFn:
    def gen(image, ref_index, signal):
        ids, _ = beam_search(model, image.feature, signal, beam, max_len)
        return model.words(ids)
    return gen


def generate(model: Union[Captioner, GenerateFn], images: Sequence[ImageInstance],
             signal_source: Union[str, ControlSignal], annotator: Optional[Captioner] = None,
             stats: Optional[NgramStats] = None, beam: int = 2, max_len: int = 20,
             threads: int = 1) -> List[Generation]:
    """One generation per (image, reference) for ``gt``; one per image for a fixed signal."""
    ctrl = model if isinstance(model, Captioner) else annotator
    gen = _model_generator(model, beam, max_len) if isinstance(model, Captioner) else model
    jobs = []
    for img in images:
        if signal_source == "gt":
            sigs = reference_signals(ctrl, img, stats) if ctrl is not None else [None] * len(img.refs)
            jobs.extend((img, i, s) for i, s in enumerate(sigs))
        else:
            jobs.append((img, None, signal_source))

    def run(job):
        img, i, s = job
        return Generation(img, i, s, list(gen(img, i, s)))

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(run, jobs))
    return [run(j) for j in jobs]


# ------------------------------------------------------------------ control precision

@dataclass
class ControlPrecision:
    cp: float
    matches: int
    total: int
    per_level: Dict[str, Tuple[int, int]] = field(default_factory=dict)


def realized_signal(annotator: Captioner, g: Generation, scorer: Optional[CiderD]) -> Optional[ControlSignal]:
    score = None
    if annotator.space.quality is not None:
        score = scorer.score(g.words, g.image.refs, use_length_penalty=False) if g.words else 0.0
    return annotator.annotate_words(g.words, score)


def precision_of(generations: Sequence[Generation], annotator: Captioner,
                 scorer: Optional[CiderD] = None) -> ControlPrecision:
    per: Dict[str, List[int]] = {}
    hits = 0
    for g in generations:
        if g.signal is None:
            continue
        ok = realized_signal(annotator, g, scorer) == g.signal
        hits += ok
        cell = per.setdefault(g.signal.spec(), [0, 0])
        cell[0] += ok
        cell[1] += 1
    total = sum(c[1] for c in per.values())
    cp = hits / total if total else float("nan")
    return ControlPrecision(cp, hits, total, {k: (v[0], v[1]) for k, v in sorted(per.items())})


def control_precision(model: Union[Captioner, GenerateFn], eval_set: Corpus,
                      signal_source: Union[str, ControlSignal] = "gt",
                      annotator: Optional[Captioner] = None, stats: Optional[NgramStats] = None,
                      beam: int = 2, max_len: int = 20, threads: int = 1) -> ControlPrecision:
    annotator = annotator or model
    gens = generate(model, eval_set.images, signal_source, annotator, stats, beam, max_len, threads)
    scorer = CiderD(stats) if stats is not None else None
    return precision_of(gens, annotator, scorer)


# ------------------------------------------------------------------ full report

@dataclass
class EvalReport:
    protocol: str
    bleu1: float
    bleu4: float
    cider_d: float
    cp: float
    per_level: Dict[str, Tuple[int, int]] = field(default_factory=dict)

    FIELDS = ("protocol", "bleu1", "bleu4", "cider_d", "cp")

    def csv(self, header: bool = True) -> str:
        out = io.StringIO()
        if header:
            out.write(",".join(self.FIELDS) + "\n")
        out.write(f"{self.protocol},{self.bleu1:.6f},{self.bleu4:.6f},{self.cider_d:.6f},{self.cp:.6f}\n")
        return out.getvalue()

    def table(self) -> str:
        rows = [("protocol", self.protocol), ("BLEU-1", f"{self.bleu1:.4f}"),
                ("BLEU-4", f"{self.bleu4:.4f}"), ("CIDEr-D", f"{self.cider_d:.4f}"),
                ("CP", f"{self.cp:.4f}")]
        for lvl, (m, t) in self.per_level.items():
            rows.append((f"  CP[{lvl}]", f"{m}/{t}"))
        w = max(len(r[0]) for r in rows)
        return "\n".join(f"{k:<{w}}  {v}" for k, v in rows)


def score_generations(generations: Sequence[Generation], protocol: str, eval_stats: NgramStats,
                      use_length_penalty: bool = True) -> Tuple[float, float, float]:
    """(BLEU-1, BLEU-4, CIDEr-D) of a generation set under a reference protocol."""
    if protocol not in ("1to1", "1to5"):
        raise ValueError(f"unknown protocol {protocol!r}")
    scorer = CiderD(eval_stats)
    cands, refsets, ciders = [], [], []
    for g in generations:
        if protocol == "1to1" and g.ref_index is not None:
            refs = [g.image.refs[g.ref_index]]
        else:
            refs = g.image.refs
        cands.append(g.words)
        refsets.append(refs)
        ciders.append(scorer.score(g.words, refs, use_length_penalty) if g.words else 0.0)
    b = corpus_bleu(cands, refsets)
    return b[0], b[3], float(np.mean(ciders)) if ciders else 0.0


def evaluate(model: Union[Captioner, GenerateFn], corpus_split: Corpus, protocol: str = "1to5",
             signal_source: Union[str, ControlSignal] = "gt", annotator: Optional[Captioner] = None,
             stats: Optional[NgramStats] = None, eval_stats: Optional[NgramStats] = None,
             beam: int = 2, max_len: int = 20, threads: int = 1,
             generations: Optional[Sequence[Generation]] = None) -> EvalReport:
    """Generate on a held-out split and score it.

    ``stats`` are the training document frequencies used for quality
    annotation; ``eval_stats`` default to the split's own references.
    """
    annotator = annotator or (model if isinstance(model, Captioner) else None)
    if eval_stats is None:
        eval_stats = NgramStats.build(img.refs for img in corpus_split.images)
    if generations is None:
        generations = generate(model, corpus_split.images, signal_source, annotator, stats, beam,
                               max_len, threads)
    b1, b4, cid = score_generations(generations, protocol, eval_stats)
    if annotator is not None and annotator.space.controlled:
        cp = precision_of(generations, annotator, CiderD(stats) if stats is not None else None)
    else:
        cp = ControlPrecision(float("nan"), 0, 0)
    return EvalReport(protocol, b1, b4, cid, cp.cp, cp.per_level)
