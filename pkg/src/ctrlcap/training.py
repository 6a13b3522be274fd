"""Training regimes: cross-entropy, conventional RL, self-annotated training, finetuning.

All policy-gradient stages draw one Monte-Carlo sample per reference
caption of an image, use the mean of those k rewards as the baseline, and
accumulate the per-image gradients of a batch before one Adam step.
"""
from __future__ import annotations

import hashlib
import logging
import os
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .captioner import (Captioner, Dims, Rollout, VocabMismatch, forward_teacher, init_params, load_checkpoint,
                        sample, save_checkpoint, score_sequences)
from .corpus import Corpus, ImageInstance, split_corpus
from .evaluation import evaluate, generate, reference_signals
from .rewards import CiderD, NgramStats, RewardBreakdown, alignment_reward, combined_reward
from .signals import ControlSignal, ControlSpace

log = logging.getLogger(__name__)

STAGES = ("xe", "rl", "sat", "finetune")
STAGE_CODES = {s: i for i, s in enumerate(STAGES)}
DEFAULT_LR = {"xe": 2e-3, "rl": 1e-3, "sat": 1e-3, "finetune": 3e-4}
DEFAULT_EPOCHS = {"xe": 15, "rl": 10, "sat": 10, "finetune": 3}

METRIC_FIELDS = ("epoch", "stage", "loss", "mean_reward", "cider_1to1", "cider_1to5", "bleu1", "bleu4", "cp")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage: str = "xe"
    task: str = "length"
    epochs: Optional[int] = None
    lr: Optional[float] = None
    batch_size: int = 10
    lam: float = 1.0
    seed: int = 0
    length_scheme: str = "length-coarse"
    quality_scheme: str = "quality-updown-5"
    length_penalty: bool = False
    max_len: int = 20
    clip_norm: float = 5.0
    d: int = 64
    dropout: float = 0.1
    positional: bool = False
    beam: int = 2
    finetune_clip_advantage: bool = False
    eval_split: str = "test"
    threads: int = 1

    def __post_init__(self):
        if self.stage not in STAGES:
            raise TrainingError(f"unknown stage {self.stage!r}")
        if self.epochs is None:
            self.epochs = DEFAULT_EPOCHS[self.stage]
        if self.lr is None:
            self.lr = DEFAULT_LR[self.stage]
        if self.lam < 0:
            raise TrainingError("lambda must be non-negative")

    def space(self) -> ControlSpace:
        return ControlSpace.for_task(self.task, self.length_scheme, self.quality_scheme)


@dataclass
class StepReport:
    rewards: List[float] = field(default_factory=list)
    baselines: List[float] = field(default_factory=list)
    advantages: List[float] = field(default_factory=list)
    loss: float = 0.0
    grad_norm: float = 0.0
    teacher_rows: int = 0
    rollouts: List[Rollout] = field(default_factory=list)
    breakdowns: List[RewardBreakdown] = field(default_factory=list)
    scores: List[float] = field(default_factory=list)


@dataclass
class PolicyContext:
    """What a policy-gradient step needs besides the model."""

    scorer: CiderD
    stats: NgramStats
    length_penalty: bool = False
    lam: float = 1.0
    max_len: int = 20
    finetune_clip: bool = False


def build_model(config: TrainConfig, corpus: Corpus, seed: Optional[int] = None) -> Captioner:
    space = config.space()
    dims = Dims(len(corpus.vocab), corpus.feature_dim, space.num_levels, config.d, config.dropout,
                config.positional)
    params = init_params(config.seed if seed is None else seed, dims)
    return Captioner(params, space, corpus.vocab, corpus.tags, config.task)


# ------------------------------------------------------------------ cross-entropy

def xe_step(model: Captioner, batch: Sequence[Tuple[np.ndarray, Optional[ControlSignal], Sequence[int]]],
            rng: Optional[np.random.Generator] = None, dropout_on: bool = True
            ) -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean negative log-likelihood over (feature, signal, target ids) triples."""
    feats = np.stack([b[0] for b in batch])
    tp = forward_teacher(model, feats, [b[1] for b in batch], [b[2] for b in batch],
                         dropout_on=dropout_on and rng is not None, rng=rng)
    loss = ad.scale(ad.sum(tp.seq_log_prob), -1.0 / len(batch))
    grads = ad.grad(loss, model.params.tensors)
    return loss.item(), grads


# ------------------------------------------------------------------ policy gradient

def _rollouts(model: Captioner, images: Sequence[ImageInstance],
              ref_signals: Sequence[Sequence[Optional[ControlSignal]]], rng: np.random.Generator,
              max_len: int, annotate: bool):
    feats, sigs, owners = [], [], []
    for n, (img, sg) in enumerate(zip(images, ref_signals)):
        if len(img.refs) < 2:
            raise TrainingError(f"image {img.id}: policy-gradient steps need at least 2 references")
        for s in sg:
            feats.append(img.feature)
            sigs.append(s)
            owners.append(n)
    fn = None if annotate else (lambda words: None)
    batch = sample(model, np.stack(feats), sigs, rng, max_len, dropout_on=True, record=True,
                   annotate_fn=fn)
    return batch, np.array(owners)


def _self_annotate(model: Captioner, roll: Rollout, img: ImageInstance, ctx: PolicyContext) -> float:
    """CIDEr-D of a sample against all references; fills in its quality level if controlled."""
    score = ctx.scorer.score(roll.words, img.refs, ctx.length_penalty) if roll.words else 0.0
    if model.space.quality is not None:
        roll.self_signal = model.annotate_words(roll.words, score)
    return score


def baselines(rewards: np.ndarray, owners: np.ndarray, n_images: int) -> np.ndarray:
    """Mean reward of each sample's own image, broadcast back to the samples."""
    b = np.zeros(n_images)
    for n in range(n_images):
        b[n] = rewards[owners == n].mean()
    return b[owners]


def advantages(rewards, owners=None, n_images: int = 1, clip: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """(advantages, baselines); ``clip`` applies ``max(x, 0)``."""
    rewards = np.asarray(rewards, dtype=np.float64)
    owners = np.zeros(len(rewards), dtype=np.int64) if owners is None else np.asarray(owners)
    base = baselines(rewards, owners, n_images)
    adv = rewards - base
    if clip:
        adv = np.maximum(adv, 0.0)
    return adv, base


def _finish(model: Captioner, loss: ad.Tensor, report: StepReport) -> Dict[str, np.ndarray]:
    grads = ad.grad(loss, model.params.tensors) if loss.requires_grad else \
        {k: np.zeros_like(t.data) for k, t in model.params.tensors.items()}
    report.loss = loss.item()
    report.grad_norm = ad.global_norm(grads)
    return grads


def policy_step(model: Captioner, images: Sequence[ImageInstance],
                ref_signals: Sequence[Sequence[Optional[ControlSignal]]], rng: np.random.Generator,
                ctx: PolicyContext, mode: str) -> Tuple[Dict[str, np.ndarray], StepReport]:
    """One policy-gradient update direction for a group of images.

    ``mode`` is ``rl`` (conventional), ``sat`` (self-annotated, clipped
    advantages) or ``finetune`` (conventional with the alignment reward).
    The loss is averaged over images; within an image it is
    ``-(1/k) * sum_i weight_i * log p(Y_i)``.
    """
    batch, owners = _rollouts(model, images, ref_signals, rng, ctx.max_len, annotate=True)
    rolls = batch.rollouts
    report = StepReport(rollouts=rolls)
    scores = np.array([_self_annotate(model, r, images[o], ctx) for r, o in zip(rolls, owners)])
    report.scores = list(scores)
    if mode == "finetune":
        W = model.params["W"].data
        bds = [combined_reward(s, alignment_reward(r.input_signal, r.self_signal, W, model.space), ctx.lam)
               for s, r in zip(scores, rolls)]
    else:
        bds = [combined_reward(s, 0.0, 0.0) for s in scores]
    report.breakdowns = bds
    rewards = np.array([bd.total for bd in bds])
    clip = mode == "sat" or (mode == "finetune" and ctx.finetune_clip)
    adv, base = advantages(rewards, owners, len(images), clip)
    report.rewards, report.baselines, report.advantages = list(rewards), list(base), list(adv)

    k = np.array([len(images[o].refs) for o in owners], dtype=np.float64)
    weights = adv / (k * len(images))
    if mode != "sat":
        loss = ad.scale(ad.dot(ad.constant(weights), batch.seq_log_prob), -1.0)
        return _finish(model, loss, report), report

    # keep the sampled-pass log-prob when the realized signal equals the input signal,
    # otherwise re-score the sample under its own signal with a fresh pass
    match = np.array([r.self_signal == r.input_signal for r in rolls])
    keep = np.where(match, weights, 0.0)
    loss = ad.scale(ad.dot(ad.constant(keep), batch.seq_log_prob), -1.0)
    # rows with zero weight contribute nothing, so their second pass is skipped
    redo = np.flatnonzero(~match & (weights > 0))
    report.teacher_rows = int(redo.size)
    if redo.size:
        tp = score_sequences(model, np.stack([images[owners[i]].feature for i in redo]),
                             [rolls[i].self_signal for i in redo], [rolls[i].tokens for i in redo],
                             dropout_on=True, rng=rng, record=True)
        loss = ad.add(loss, ad.scale(ad.dot(ad.constant(weights[redo]), tp.seq_log_prob), -1.0))
    return _finish(model, loss, report), report


def rl_step(model, image, ref_signals, rng, ctx):
    return policy_step(model, [image], [ref_signals], rng, ctx, "rl")


def sat_step(model, image, ref_signals, rng, ctx):
    return policy_step(model, [image], [ref_signals], rng, ctx, "sat")


def finetune_step(model, image, ref_signals, rng, ctx):
    if model.meta.get("provenance") not in ("sat", "finetune"):
        warnings.warn("finetuning a model that was not trained with self-annotated training", stacklevel=2)
    return policy_step(model, [image], [ref_signals], rng, ctx, "finetune")


# ------------------------------------------------------------------ the loop

def stage_rng(seed: int, stage: str, epoch: int, batch: int = -1) -> np.random.Generator:
    return np.random.default_rng([seed, STAGE_CODES[stage], epoch, batch + 1])


@dataclass
class TrainResult:
    model: Captioner
    metrics: List[Dict[str, object]]
    checkpoints: List[str]


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if v != v else f"{v:.6f}"
    return str(v)


def metrics_row_csv(row: Dict[str, object]) -> str:
    return ",".join(_fmt(row[k]) for k in METRIC_FIELDS)


def corpus_digest(corpus: Corpus) -> str:
    h = hashlib.sha256()
    for img in corpus.images:
        h.update(img.id.encode())
        h.update(np.ascontiguousarray(img.feature).tobytes())
        for r in img.refs:
            h.update(" ".join(r).encode() + b"\n")
    return h.hexdigest()[:16]


class Trainer:
    def __init__(self, config: TrainConfig, corpus: Corpus, model: Optional[Captioner] = None,
                 adam: Optional[ad.AdamState] = None):
        self.config = config
        self.corpus = corpus
        splits = split_corpus(corpus)
        self.train_set = splits["train"]
        self.eval_set = splits[config.eval_split]
        if not self.train_set.images:
            raise TrainingError("training split is empty")
        self.stats = NgramStats.build(img.refs for img in self.train_set.images)
        self.eval_stats = NgramStats.build(img.refs for img in self.eval_set.images) \
            if self.eval_set.images else None
        self.model = model if model is not None else build_model(config, corpus)
        if self.model.vocab.hash != corpus.vocab.hash:
            raise VocabMismatch("vocab hash mismatch between model and corpus")
        if self.model.space.describe() != config.space().describe():
            raise TrainingError(f"model controls {self.model.space.describe()}, "
                                f"config asks for {config.space().describe()}")
        shapes = {k: t.shape for k, t in self.model.params.tensors.items()}
        self.adam = adam if adam is not None else ad.AdamState(shapes)
        self.ctx = PolicyContext(CiderD(self.stats), self.stats, config.length_penalty, config.lam,
                                 config.max_len, config.finetune_clip_advantage)
        self._ref_signals = {img.id: reference_signals(self.model, img, self.stats)
                             for img in self.train_set.images}

    def ref_signals(self, img: ImageInstance):
        return self._ref_signals[img.id]

    def _apply(self, grads: Dict[str, np.ndarray]) -> None:
        ad.clip_by_global_norm(grads, self.config.clip_norm)
        ad.adam_step(self.model.params.arrays(), grads, self.adam, self.config.lr)

    def run_epoch(self, epoch: int) -> Tuple[float, float]:
        cfg = self.config
        order = stage_rng(cfg.seed, cfg.stage, epoch).permutation(len(self.train_set.images))
        images = [self.train_set.images[i] for i in order]
        losses, rewards = [], []
        for bi in range(0, len(images), cfg.batch_size):
            chunk = images[bi:bi + cfg.batch_size]
            rng = stage_rng(cfg.seed, cfg.stage, epoch, bi // cfg.batch_size)
            if cfg.stage == "xe":
                items = [(img.feature, s, self.model.vocab.encode(ref))
                         for img in chunk for s, ref in zip(self.ref_signals(img), img.refs)]
                loss, grads = xe_step(self.model, items, rng)
                losses.append(loss)
            else:
                grads, rep = policy_step(self.model, chunk, [self.ref_signals(i) for i in chunk], rng,
                                         self.ctx, cfg.stage)
                losses.append(rep.loss)
                rewards.extend(rep.rewards)
            self._apply(grads)
        return float(np.mean(losses)), float(np.mean(rewards)) if rewards else float("nan")

    def evaluate(self) -> Dict[str, float]:
        if self.eval_stats is None:
            nan = float("nan")
            return {"cider_1to1": nan, "cider_1to5": nan, "bleu1": nan, "bleu4": nan, "cp": nan}
        gens = generate(self.model, self.eval_set.images, "gt", self.model, self.stats,
                        self.config.beam, self.config.max_len, self.config.threads)
        r1 = evaluate(self.model, self.eval_set, "1to1", stats=self.stats, eval_stats=self.eval_stats,
                      generations=gens)
        r5 = evaluate(self.model, self.eval_set, "1to5", stats=self.stats, eval_stats=self.eval_stats,
                      generations=gens)
        return {"cider_1to1": r1.cider_d, "cider_1to5": r5.cider_d, "bleu1": r5.bleu1,
                "bleu4": r5.bleu4, "cp": r5.cp}

    def train(self, out_dir: Optional[str] = None, start_epoch: int = 1,
              log_path: Optional[str] = None, save_every_epoch: bool = True) -> TrainResult:
        cfg = self.config
        if cfg.stage == "finetune" and self.model.meta.get("provenance") not in ("sat", "finetune"):
            warnings.warn("finetuning a model that was not trained with self-annotated training", stacklevel=2)
        metrics, ckpts = [], []
        for epoch in range(start_epoch, cfg.epochs + 1):
            loss, mean_reward = self.run_epoch(epoch)
            row = {"epoch": epoch, "stage": cfg.stage, "loss": loss, "mean_reward": mean_reward}
            row.update(self.evaluate())
            metrics.append(row)
            log.info("%s", metrics_row_csv(row))
            if log_path:
                with open(log_path, "a") as fh:
                    fh.write(metrics_row_csv(row) + "\n")
            self.model.meta["provenance"] = cfg.stage
            if out_dir and (save_every_epoch or epoch == cfg.epochs):
                path = os.path.join(out_dir, f"{cfg.stage}-{epoch}.ckpt")
                save_checkpoint(path, self.model, {"stage": cfg.stage, "epoch": epoch}, self.adam)
                ckpts.append(path)
        return TrainResult(self.model, metrics, ckpts)


def train(config: TrainConfig, corpus: Corpus, init: Optional[str] = None,
          out_dir: Optional[str] = None, log_path: Optional[str] = None) -> TrainResult:
    """Run one stage.  ``init`` is a checkpoint path; a checkpoint of the same
    stage resumes after its epoch with its optimizer state."""
    model = adam = None
    start = 1
    if init:
        model, saved_adam, extra = load_checkpoint(init, expect_vocab_hash=corpus.vocab.hash)
        if extra.get("stage") == config.stage:
            start = int(extra["epoch"]) + 1
            adam = saved_adam
        model.meta.setdefault("provenance", extra.get("stage", ""))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    trainer = Trainer(config, corpus, model, adam)
    return trainer.train(out_dir, start, log_path)
