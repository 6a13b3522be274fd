"""Control levels: bucket schemes, attribute annotators and level embeddings."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad

INF = math.inf


class SchemeError(ValueError):
    pass


class InvalidCaption(ValueError):
    pass


class UnknownToken(KeyError):
    def __str__(self):
        return f"unknown token(s) not in tag map: {', '.join(self.args[0])}"


class Tag(str, Enum):
    BE = "BE"
    VERB_BASE = "VERB_BASE"
    VERB_ING = "VERB_ING"
    VERB_ED = "VERB_ED"
    OTHER = "OTHER"


VERB_TAGS = (Tag.VERB_BASE, Tag.VERB_ING, Tag.VERB_ED)

TENSE_NAMES = ("no v", "be + v", "v-ing", "v", "v-ed")
NO_V, BE_V, V_ING, V_BASE, V_ED = range(5)


@dataclass(frozen=True)
class LevelScheme:
    """Ordered half-open buckets ``lo <= x < hi`` mapped to levels 0..n-1."""

    kind: str
    buckets: Tuple[Tuple[float, float], ...]
    level_offset: int = 0
    name: str = ""

    def __post_init__(self):
        if not self.buckets:
            raise SchemeError("scheme needs at least one bucket")
        for (lo, hi) in self.buckets:
            if not lo < hi:
                raise SchemeError(f"empty bucket [{lo}, {hi})")
        for (_, hi), (lo, _) in zip(self.buckets, self.buckets[1:]):
            if hi != lo:
                raise SchemeError(f"buckets must be contiguous: gap or overlap at {hi} / {lo}")

    @property
    def size(self) -> int:
        return len(self.buckets)

    def level_of(self, x: float) -> int:
        for level, (lo, hi) in enumerate(self.buckets):
            if lo <= x < hi:
                return level
        raise SchemeError(f"value {x} outside the domain of scheme {self.name or self.kind}")

    def with_offset(self, offset: int) -> "LevelScheme":
        return replace(self, level_offset=offset)

    def check_level(self, level: int) -> None:
        if not 0 <= level < self.size:
            raise SchemeError(f"level {level} out of range for {self.name or self.kind} (0..{self.size - 1})")


def _int_buckets(edges: Sequence[int]) -> Tuple[Tuple[float, float], ...]:
    # edges are interior boundaries; domain starts at 1 word
    pts = [1.0] + [float(e) for e in edges] + [INF]
    return tuple(zip(pts[:-1], pts[1:]))


def _score_buckets(edges: Sequence[float]) -> Tuple[Tuple[float, float], ...]:
    pts = [0.0] + list(edges) + [INF]
    return tuple(zip(pts[:-1], pts[1:]))


PRESETS: Dict[str, LevelScheme] = {
    # <=8, 9, 10, 11, >=12
    "length-coarse": LevelScheme("length", _int_buckets([9, 10, 11, 12]), name="length-coarse"),
    # <7, 7, 8, ..., 14, >14
    "length-fine": LevelScheme("length", _int_buckets(list(range(7, 16))), name="length-fine"),
    "tense": LevelScheme("tense", tuple((float(i), float(i + 1)) for i in range(5)), name="tense"),
    "quality-updown-5": LevelScheme("quality", _score_buckets([0.5, 0.9, 1.3, 1.7]), name="quality-updown-5"),
    "quality-transformer-3": LevelScheme("quality", _score_buckets([0.7, 1.3]), name="quality-transformer-3"),
    "quality-gt-5": LevelScheme("quality", _score_buckets([0.375, 0.625, 0.875, 1.25]), name="quality-gt-5"),
    "quality-gt-3": LevelScheme("quality", _score_buckets([0.375, 0.625]), name="quality-gt-3"),
}

# generated-caption thresholds paired with the ground-truth column of the same table
GT_COUNTERPART = {"quality-updown-5": "quality-gt-5", "quality-transformer-3": "quality-gt-3"}


def get_scheme(name: str) -> LevelScheme:
    try:
        return PRESETS[name]
    except KeyError:
        raise SchemeError(f"unknown scheme preset '{name}' (choose from {', '.join(PRESETS)})") from None


_BUCKET_LINE = re.compile(
    r"^\s*level\s+(\d+)\s*:\s*([-+0-9.eEinfINF]+)\s*<=\s*x\s*<\s*([-+0-9.eEinfINF]+)\s*$"
)


def load_scheme_file(path: str, kind: str) -> LevelScheme:
    """Read ``level <int> : <lo> <= x < <hi>`` lines into a scheme."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            m = _BUCKET_LINE.match(line)
            if not m:
                raise SchemeError(f"{path}:{lineno}: cannot parse bucket line: {line.strip()!r}")
            rows.append((int(m.group(1)), float(m.group(2)), float(m.group(3))))
    rows.sort()
    if [r[0] for r in rows] != list(range(len(rows))):
        raise SchemeError(f"{path}: levels must be contiguous from 0")
    return LevelScheme(kind, tuple((lo, hi) for _, lo, hi in rows), name=path)


@dataclass(frozen=True)
class ControlSignal:
    len_level: Optional[int] = None
    tense_level: Optional[int] = None
    quality_level: Optional[int] = None

    def __post_init__(self):
        if self.len_level is None and self.tense_level is None and self.quality_level is None:
            raise SchemeError("a control signal needs at least one level")

    def components(self) -> Tuple[str, ...]:
        return tuple(c for c, v in (("len", self.len_level), ("tense", self.tense_level),
                                    ("quality", self.quality_level)) if v is not None)

    def spec(self) -> str:
        parts = []
        if self.len_level is not None:
            parts.append(f"len={self.len_level}")
        if self.tense_level is not None:
            parts.append(f"tense={self.tense_level}")
        if self.quality_level is not None:
            parts.append(f"quality={self.quality_level}")
        return ",".join(parts)


def parse_level_spec(text: str) -> ControlSignal:
    """Parse ``len=<int>[,tense=<int>][,quality=<int>]``."""
    kwargs = {}
    keys = {"len": "len_level", "tense": "tense_level", "quality": "quality_level"}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise SchemeError(f"bad level spec component {part!r}")
        k, v = part.split("=", 1)
        if k.strip() not in keys:
            raise SchemeError(f"unknown level component {k!r}")
        try:
            kwargs[keys[k.strip()]] = int(v)
        except ValueError:
            raise SchemeError(f"level for {k!r} must be an integer, got {v!r}") from None
    return ControlSignal(**kwargs)


@dataclass(frozen=True)
class ControlSpace:
    """Which attributes are controlled and where each lives in the shared matrix W.

    ``quality_gt`` holds the ground-truth thresholds used for annotating
    references; ``quality`` holds the thresholds for model samples.  Both
    share the same rows of W.
    """

    length: Optional[LevelScheme] = None
    tense: Optional[LevelScheme] = None
    quality: Optional[LevelScheme] = None
    quality_gt: Optional[LevelScheme] = None

    @classmethod
    def build(cls, length: Optional[str] = None, tense: bool = False,
              quality: Optional[str] = None) -> "ControlSpace":
        offset = 0
        ls = ts = qs = qg = None
        if length:
            ls = get_scheme(length).with_offset(offset)
            offset += ls.size
        if tense:
            ts = PRESETS["tense"].with_offset(offset)
            offset += ts.size
        if quality:
            qs = get_scheme(quality).with_offset(offset)
            gt_name = GT_COUNTERPART.get(quality, quality)
            qg = get_scheme(gt_name).with_offset(offset)
            if qg.size != qs.size:
                raise SchemeError(f"{quality} and {gt_name} have different level counts")
            offset += qs.size
        return cls(ls, ts, qs, qg)

    @classmethod
    def for_task(cls, task: str, length_scheme: str = "length-coarse",
                 quality_scheme: str = "quality-updown-5") -> "ControlSpace":
        if task == "length":
            return cls.build(length=length_scheme)
        if task == "tense":
            return cls.build(tense=True)
        if task == "length+tense":
            return cls.build(length=length_scheme, tense=True)
        if task == "quality":
            return cls.build(quality=quality_scheme)
        if task == "none":
            return cls()
        raise SchemeError(f"unknown control task {task!r}")

    @property
    def num_levels(self) -> int:
        return sum(s.size for s in (self.length, self.tense, self.quality) if s is not None)

    @property
    def components(self) -> Tuple[str, ...]:
        out = []
        if self.length is not None:
            out.append("len")
        if self.tense is not None:
            out.append("tense")
        if self.quality is not None:
            out.append("quality")
        return tuple(out)

    @property
    def controlled(self) -> bool:
        return bool(self.components)

    def describe(self) -> str:
        names = [s.name for s in (self.length, self.tense, self.quality) if s is not None]
        return "+".join(names) if names else "none"

    def validate(self, signal: ControlSignal) -> None:
        if signal.components() != self.components:
            raise SchemeError(f"signal components {signal.components()} do not match task {self.components}")
        if signal.len_level is not None:
            self.length.check_level(signal.len_level)
        if signal.tense_level is not None:
            self.tense.check_level(signal.tense_level)
        if signal.quality_level is not None:
            self.quality.check_level(signal.quality_level)

    def rows(self, signal: Optional[ControlSignal]) -> Dict[str, int]:
        """Row of W for every present component."""
        if signal is None:
            return {}
        self.validate(signal)
        out = {}
        if signal.len_level is not None:
            out["len"] = self.length.level_offset + signal.len_level
        if signal.tense_level is not None:
            out["tense"] = self.tense.level_offset + signal.tense_level
        if signal.quality_level is not None:
            out["quality"] = self.quality.level_offset + signal.quality_level
        return out

    def all_signals(self) -> List[ControlSignal]:
        """Every valid signal in this space, in lexicographic level order."""
        ranges = []
        for comp, scheme in (("len_level", self.length), ("tense_level", self.tense),
                             ("quality_level", self.quality)):
            if scheme is not None:
                ranges.append((comp, range(scheme.size)))
        out = [{}]
        for comp, rng in ranges:
            out = [dict(d, **{comp: lv}) for d in out for lv in rng]
        return [ControlSignal(**d) for d in out if d]


# ------------------------------------------------------------------ annotators

def length_level(caption_len: int, scheme: LevelScheme) -> int:
    if caption_len < 1:
        raise InvalidCaption("caption must contain at least one word")
    return scheme.level_of(caption_len)


def tense_category(caption: Sequence[str], tag_map: Mapping[str, str]) -> int:
    """Classify a caption into no v / be + v / v-ing / v / v-ed.

    Be followed later by a participle outranks the tag of the first verb.
    """
    missing = sorted({w for w in caption if w not in tag_map})
    if missing:
        raise UnknownToken(missing)
    tags = [Tag(tag_map[w]) for w in caption]
    verb_pos = [i for i, t in enumerate(tags) if t in VERB_TAGS]
    if not verb_pos:
        return NO_V
    for i, t in enumerate(tags):
        if t is Tag.BE and any(u in (Tag.VERB_ING, Tag.VERB_ED) for u in tags[i + 1:]):
            return BE_V
    first = tags[verb_pos[0]]
    return {Tag.VERB_ING: V_ING, Tag.VERB_ED: V_ED, Tag.VERB_BASE: V_BASE}[first]


def tense_level(caption: Sequence[str], tag_map: Mapping[str, str],
                scheme: Optional[LevelScheme] = None) -> int:
    cat = tense_category(caption, tag_map)
    return cat if scheme is None else scheme.level_of(cat)


def quality_level(score: float, scheme: LevelScheme) -> int:
    return scheme.level_of(max(score, 0.0))


def gt_quality_score(ref_index: int, refs: Sequence[Sequence[str]], stats) -> float:
    """Leave-one-out CIDEr-D of one reference against the image's other references."""
    from .rewards import cider_d

    if len(refs) < 2:
        raise InvalidCaption("leave-one-out quality needs at least two references")
    others = [r for i, r in enumerate(refs) if i != ref_index]
    return cider_d(refs[ref_index], others, stats, use_length_penalty=False)


def annotate(caption: Sequence[str], space: ControlSpace, tag_map: Mapping[str, str],
             quality_score: Optional[float] = None, reference: bool = False) -> Optional[ControlSignal]:
    """Derive the control signal of a caption.

    ``reference`` selects the ground-truth quality thresholds; samples use the
    generated-caption thresholds.
    """
    if not space.controlled:
        return None
    kw = {}
    if space.length is not None:
        kw["len_level"] = length_level(len(caption), space.length)
    if space.tense is not None:
        kw["tense_level"] = tense_level(caption, tag_map, space.tense)
    if space.quality is not None:
        if quality_score is None:
            raise SchemeError("quality annotation needs a CIDEr-D score")
        scheme = space.quality_gt if reference else space.quality
        kw["quality_level"] = quality_level(quality_score, scheme)
    return ControlSignal(**kw)


# ------------------------------------------------------------------ embeddings

def embed_control(signal: Optional[ControlSignal], W: ad.Tensor, space: ControlSpace) -> ad.Tensor:
    """Sum of the W rows selected by each present level; zeros without a signal."""
    rows = space.rows(signal)
    if W.data.ndim != 2 or (rows and W.shape[0] != space.num_levels):
        raise ad.ShapeError(f"control matrix shape {W.shape} does not fit {space.num_levels} levels")
    if not rows:
        return ad.constant(np.zeros(W.shape[1]))
    out = None
    for comp in ("len", "tense", "quality"):
        if comp in rows:
            e = ad.lookup_row(W, rows[comp])
            out = e if out is None else ad.add(out, e)
    return out


def embed_control_batch(signals: Sequence[Optional[ControlSignal]], W: ad.Tensor,
                        space: ControlSpace) -> ad.Tensor:
    """Row-stacked control embeddings for a batch of signals."""
    d = W.shape[1]
    if not space.controlled:
        return ad.constant(np.zeros((len(signals), d)))
    out = None
    for comp in space.components:
        idx = [space.rows(s)[comp] for s in signals]
        e = ad.lookup_rows(W, idx)
        out = e if out is None else ad.add(out, e)
    return out


def positional_encoding(position: int, d: int) -> np.ndarray:
    """Sinusoidal position vector."""
    i = np.arange(d)
    angle = position / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def input_embedding(word_id: int, e_beta: ad.Tensor, E: ad.Tensor,
                    position: Optional[int] = None) -> ad.Tensor:
    x = ad.add(e_beta, ad.lookup_row(E, word_id))
    if position is not None:
        x = ad.add(x, ad.constant(positional_encoding(position, E.shape[1])))
    return x
