"""Synthetic caption corpus and its JSON-lines file format.

Each synthetic image is a latent scene drawn from small closed attribute
sets.  The feature vector is the one-hot encoding of the scene plus
Gaussian noise, and every reference caption is a template realization of
the scene with a chosen tense and target length.  Some references misstate
one or more spoken factors, which spreads their consensus scores over all
quality levels.
"""
from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .signals import BE_V, NO_V, V_BASE, V_ED, V_ING, Tag

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
RESERVED = (PAD, BOS, EOS)


class CorpusError(ValueError):
    pass


class Vocab:
    """Token <-> id bijection with PAD=0, BOS=1, EOS=2."""

    def __init__(self, tokens: Iterable[str]):
        words = sorted(set(tokens) - set(RESERVED))
        self.itos: List[str] = list(RESERVED) + words
        self.stoi: Dict[str, int] = {w: i for i, w in enumerate(self.itos)}

    pad_id, bos_id, eos_id = 0, 1, 2

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, w: str) -> bool:
        return w in self.stoi

    def encode(self, tokens: Sequence[str]) -> List[int]:
        try:
            return [self.stoi[w] for w in tokens]
        except KeyError as e:
            raise CorpusError(f"token {e.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Sequence[int]) -> List[str]:
        out = []
        for i in ids:
            if i == self.eos_id:
                break
            if i in (self.pad_id, self.bos_id):
                continue
            out.append(self.itos[i])
        return out

    @property
    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode()).hexdigest()[:16]


@dataclass
class ImageInstance:
    id: str
    feature: np.ndarray
    refs: List[Tuple[str, ...]]
    declared_tense: Optional[List[int]] = None

    def __eq__(self, other):
        if not isinstance(other, ImageInstance):
            return NotImplemented
        return (self.id == other.id and np.array_equal(self.feature, other.feature)
                and [tuple(r) for r in self.refs] == [tuple(r) for r in other.refs]
                and self.declared_tense == other.declared_tense)


@dataclass
class Corpus:
    images: List[ImageInstance]
    tags: Dict[str, str]
    vocab: Vocab = field(init=False)

    def __post_init__(self):
        self.vocab = Vocab(self.tags)

    def __len__(self) -> int:
        return len(self.images)

    def __eq__(self, other):
        if not isinstance(other, Corpus):
            return NotImplemented
        return self.tags == other.tags and self.images == other.images

    def by_id(self, image_id: str) -> ImageInstance:
        for img in self.images:
            if img.id == image_id:
                return img
        raise CorpusError(f"no image with id {image_id!r}")

    def subset(self, images: List[ImageInstance]) -> "Corpus":
        return Corpus(images, self.tags)

    @property
    def feature_dim(self) -> int:
        return int(self.images[0].feature.shape[0]) if self.images else 0


# ------------------------------------------------------------------ synthetic scenes

SUBJECTS = ("dog", "cat", "man", "woman", "boy", "horse")
SIZES = ("big", "small")
COLORS = ("brown", "black", "white", "red")
# lemma -> (base/3rd person, -ing, past)
VERBS = {
    "hold": ("holds", "holding", "held"),
    "carry": ("carries", "carrying", "carried"),
    "chase": ("chases", "chasing", "chased"),
    "watch": ("watches", "watching", "watched"),
    "pull": ("pulls", "pulling", "pulled"),
}
OBJECTS = ("frisbee", "ball", "kite", "bag", "stick")
PLACES = (("in", "park"), ("on", "beach"), ("in", "field"), ("on", "street"))
COMPANIONS = ("owner", "friend", "family")
WEATHER = ("sunny", "cloudy", "rainy")

FACTORS = (
    ("subject", len(SUBJECTS)), ("size", len(SIZES)), ("color", len(COLORS)),
    ("verb", len(VERBS)), ("object", len(OBJECTS)), ("place", len(PLACES)),
    ("companion", len(COMPANIONS)), ("weather", len(WEATHER)),
)
SCENE_DIM = sum(n for _, n in FACTORS)

# optional phrases: name -> number of tokens
ADDONS = (("size", 1), ("color", 1), ("companion", 3), ("place", 3), ("weather", 4))

MIN_LEN, MAX_LEN = 5, 15
# length ranges balanced over the coarse length levels
LENGTH_BANDS = ((5, 8), (9, 9), (10, 10), (11, 11), (12, 15))


def synthetic_tags() -> Dict[str, str]:
    tags = {w: Tag.OTHER.value for w in
            ("a", "with", "its", "on", "in", "day") + SUBJECTS + SIZES + COLORS + OBJECTS
            + tuple(p for _, p in PLACES) + tuple(p for p, _ in PLACES) + COMPANIONS + WEATHER}
    tags["is"] = Tag.BE.value
    for lemma, (third, ing, past) in VERBS.items():
        tags[lemma] = Tag.VERB_BASE.value
        tags[third] = Tag.VERB_BASE.value
        tags[ing] = Tag.VERB_ING.value
        tags[past] = Tag.VERB_ED.value
    return dict(sorted(tags.items()))


@dataclass(frozen=True)
class Scene:
    subject: int
    size: int
    color: int
    verb: int
    object: int
    place: int
    companion: int
    weather: int

    def one_hot(self) -> np.ndarray:
        parts = []
        for name, n in FACTORS:
            v = np.zeros(n)
            v[getattr(self, name)] = 1.0
            parts.append(v)
        return np.concatenate(parts)


def _addon_subsets() -> Dict[int, List[Tuple[str, ...]]]:
    by_len: Dict[int, List[Tuple[str, ...]]] = {}
    for r in range(len(ADDONS) + 1):
        for combo in itertools.combinations(ADDONS, r):
            by_len.setdefault(sum(n for _, n in combo), []).append(tuple(a for a, _ in combo))
    return by_len


_SUBSETS = _addon_subsets()


def realize(scene: Scene, tense: int, addons: Sequence[str],
            corrupt: Sequence[Tuple[str, int]] = ()) -> Tuple[str, ...]:
    """Render one caption.  ``corrupt`` lists (factor, wrong value) swaps."""
    vals = {name: getattr(scene, name) for name, _ in FACTORS}
    for name, value in corrupt:
        vals[name] = value
    lemma = list(VERBS)[vals["verb"]]
    third, ing, past = VERBS[lemma]
    words = ["a"]
    if "size" in addons:
        words.append(SIZES[vals["size"]])
    if "color" in addons:
        words.append(COLORS[vals["color"]])
    words.append(SUBJECTS[vals["subject"]])
    words += {NO_V: ["with"], BE_V: ["is", ing], V_ING: [ing], V_BASE: [third], V_ED: [past]}[tense]
    words += ["a", OBJECTS[vals["object"]]]
    if "companion" in addons:
        words += ["with", "its", COMPANIONS[vals["companion"]]]
    if "place" in addons:
        prep, noun = PLACES[vals["place"]]
        words += [prep, "a", noun]
    if "weather" in addons:
        words += ["on", "a", WEATHER[vals["weather"]], "day"]
    return tuple(words)


def _base_len(tense: int) -> int:
    return 6 if tense == BE_V else 5


@dataclass
class SynthConfig:
    num_images: int = 500
    refs_per_image: int = 5
    seed: int = 42
    feature_dim: int = 32
    noise_std: float = 0.1
    # probability of misstating 0, 1, 2, ... spoken factors in one reference
    corrupt_probs: Tuple[float, ...] = (0.5, 0.2, 0.1, 0.1, 0.1)


def generate_synthetic(config: SynthConfig) -> Corpus:
    if config.num_images < 2:
        raise CorpusError("need at least 2 images")
    if config.refs_per_image < 1:
        raise CorpusError("need at least 1 reference per image")
    if config.feature_dim < SCENE_DIM:
        raise CorpusError(f"feature_dim {config.feature_dim} smaller than scene encoding ({SCENE_DIM})")
    probs = np.asarray(config.corrupt_probs, dtype=np.float64)
    if probs.ndim != 1 or len(probs) == 0 or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
        raise CorpusError("corrupt_probs must be a probability vector")
    rng = np.random.default_rng(config.seed)
    images = []
    width = len(str(config.num_images - 1))
    for idx in range(config.num_images):
        scene = Scene(*(int(rng.integers(n)) for _, n in FACTORS))
        feat = np.zeros(config.feature_dim)
        feat[:SCENE_DIM] = scene.one_hot()
        feat += rng.normal(0.0, config.noise_std, size=config.feature_dim)
        refs, tenses = [], []
        for _ in range(config.refs_per_image):
            tense = int(rng.integers(5))
            lo, hi = LENGTH_BANDS[int(rng.integers(len(LENGTH_BANDS)))]
            base = _base_len(tense)
            length = int(rng.integers(max(lo, base), hi + 1))
            options = _SUBSETS[length - base]
            addons = options[int(rng.integers(len(options)))]
            # only factors that are actually spoken can be misstated
            spoken = ["subject", "verb", "object"] + list(addons)
            k = min(int(rng.choice(len(probs), p=probs)), len(spoken))
            corrupt = []
            for j in sorted(rng.choice(len(spoken), size=k, replace=False)):
                name = spoken[j]
                n = dict(FACTORS)[name]
                cur = getattr(scene, name)
                corrupt.append((name, int((cur + 1 + rng.integers(n - 1)) % n)))
            refs.append(realize(scene, tense, addons, corrupt))
            tenses.append(tense)
        images.append(ImageInstance(f"img{idx:0{width}d}", feat, refs, tenses))
    return Corpus(images, synthetic_tags())


# ------------------------------------------------------------------ file format

def save_corpus(corpus: Corpus, path: str) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"vocab_tags": corpus.tags}, sort_keys=True) + "\n")
        for img in corpus.images:
            rec = {"id": img.id, "feature": [float(x) for x in img.feature],
                   "captions": [list(r) for r in img.refs]}
            if img.declared_tense is not None:
                rec["declared_tense"] = list(img.declared_tense)
            fh.write(json.dumps(rec) + "\n")


def load_corpus(path: str, vocab: Optional[Vocab] = None) -> Corpus:
    """Parse a corpus file.  With ``vocab`` given, every token must belong to it."""
    tags: Optional[Dict[str, str]] = None
    images: List[ImageInstance] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"{path}:{lineno}: malformed record ({e.msg})") from None
            if not isinstance(rec, dict):
                raise CorpusError(f"{path}:{lineno}: record is not an object")
            if "vocab_tags" in rec:
                if tags is not None:
                    raise CorpusError(f"{path}:{lineno}: duplicate vocab_tags header")
                tags = {str(k): str(v) for k, v in rec["vocab_tags"].items()}
                for w, t in tags.items():
                    if t not in Tag.__members__:
                        raise CorpusError(f"{path}:{lineno}: unknown tag {t!r} for {w!r}")
                continue
            missing = [k for k in ("id", "feature", "captions") if k not in rec]
            if missing:
                raise CorpusError(f"{path}:{lineno}: record missing field(s) {', '.join(missing)}")
            refs = [tuple(str(w) for w in c) for c in rec["captions"]]
            if not refs or any(len(r) == 0 for r in refs):
                raise CorpusError(f"{path}:{lineno}: image needs non-empty captions")
            known = vocab.stoi if vocab is not None else tags
            if known is not None:
                for r in refs:
                    for w in r:
                        if w not in known or w in RESERVED:
                            raise CorpusError(f"{path}:{lineno}: unknown token {w!r}")
            images.append(ImageInstance(str(rec["id"]), np.asarray(rec["feature"], dtype=np.float64),
                                        refs, rec.get("declared_tense")))
    if not images:
        raise CorpusError(f"{path}: empty corpus")
    if tags is None:
        raise CorpusError(f"{path}: missing vocab_tags header record")
    dims = {img.feature.shape for img in images}
    if len(dims) != 1:
        raise CorpusError(f"{path}: inconsistent feature dimensions {sorted(dims)}")
    return Corpus(images, tags)


def split_of(image_id: str) -> str:
    h = int(hashlib.md5(image_id.encode()).hexdigest(), 16) % 100
    if h < 90:
        return "train"
    return "val" if h < 95 else "test"


def split_corpus(corpus: Corpus) -> Dict[str, Corpus]:
    parts: Dict[str, List[ImageInstance]] = {"train": [], "val": [], "test": []}
    for img in corpus.images:
        parts[split_of(img.id)].append(img)
    return {k: corpus.subset(v) for k, v in parts.items()}
