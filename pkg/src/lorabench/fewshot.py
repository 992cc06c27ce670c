"""Zero-shot prediction, few-shot fine-tuning and the desk-scale contrastive
pretrainer for the dual encoder.

The fine-tuning loop keeps every hyper-parameter fixed across tasks:
lr 2e-4 with cosine annealing, batch size 32, 500 * shots iterations,
rank-2 adapters with dropout 0.25 on query/key/value of every layer of both
encoders.  Class prompts are re-encoded through the (adapting) text encoder
at every step.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DomainError, LorabenchError, ShapeError
from .lora import AdaptedModel
from .model import (ClassPrompt, DualEncoderModel, encode_images,
                    encode_prompts, tokenize_caption, tokenize_prompt)
from .optim import AdamW, cosine_lr
from .tensor import (Tape, Tensor, div, gather_per_row, log_softmax, matmul,
                     mean, row_softmax, transpose)


# ---------------------------------------------------------------------------
# task construction


@dataclass
class FewShotTask:
    class_names: list[str]
    support_images: np.ndarray   # (N, H, W)
    support_labels: np.ndarray   # (N,)
    query_images: np.ndarray
    query_labels: np.ndarray

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def shots(self) -> int:
        return self.support_images.shape[0] // self.num_classes


def sample_support_set(images: np.ndarray, labels: np.ndarray,
                       class_names: Sequence[str], shots: int, seed: int,
                       min_query: int = 1) -> FewShotTask:
    """Draw `shots` support images per class without replacement; the rest is query."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5A3F]))
    sup_idx, qry_idx = [], []
    for k, name in enumerate(class_names):
        pool = np.flatnonzero(labels == k)
        if len(pool) < shots + min_query:
            raise DomainError(f"class {name!r} has {len(pool)} images, "
                              f"needs {shots + min_query}")
        perm = rng.permutation(pool)
        sup_idx.extend(perm[:shots])
        qry_idx.extend(perm[shots:])
    sup_idx = np.asarray(sup_idx)
    qry_idx = np.asarray(qry_idx)
    return FewShotTask(class_names=list(class_names),
                       support_images=images[sup_idx], support_labels=labels[sup_idx],
                       query_images=images[qry_idx], query_labels=labels[qry_idx])


# ---------------------------------------------------------------------------
# prediction


def zero_shot_logits(model: DualEncoderModel, images: np.ndarray,
                     prompts: list[ClassPrompt]) -> Tensor:
    """Cosine-similarity logits (n_images x K) between unit embeddings."""
    if len(prompts) < 2:
        raise DomainError(f"need at least 2 classes, got {len(prompts)}")
    feats = encode_images(model, images)
    texts = encode_prompts(model, prompts)
    return matmul(feats, transpose(texts, (1, 0)))


def posterior(logits: Tensor, tau: float) -> Tensor:
    """Softmax posteriors over classes at temperature tau."""
    if tau <= 0:
        raise DomainError(f"temperature must be > 0, got {tau}")
    return row_softmax(logits, temperature=tau)


def predict(scores: Tensor) -> np.ndarray:
    """Per-row argmax; ties resolve to the lowest class index."""
    data = np.asarray(scores.data if isinstance(scores, Tensor) else scores)
    if data.ndim != 2 or data.shape[1] == 0:
        raise ShapeError(f"expected (n, K) scores, got shape {data.shape}")
    return data.argmax(axis=1)


def cross_entropy_loss(logits: Tensor, labels: np.ndarray, tau: float) -> Tensor:
    """Mean negative log posterior of the true classes, via stable log-softmax."""
    labels = np.asarray(labels)
    if logits.data.shape[0] != labels.shape[0]:
        raise ShapeError(f"{logits.data.shape[0]} logit rows vs {labels.shape[0]} labels")
    logp = log_softmax(logits, temperature=tau)
    return -mean(gather_per_row(logp, labels))


def evaluate(model: DualEncoderModel, task: FewShotTask,
             prompts: Optional[list[ClassPrompt]] = None) -> float:
    """Top-1 accuracy on the query set."""
    if task.query_images.shape[0] == 0:
        raise DomainError("empty query set")
    if prompts is None:
        prompts = [tokenize_prompt(n, model.vocab, model.cfg.max_text_len)
                   for n in task.class_names]
    logits = zero_shot_logits(model, task.query_images, prompts)
    return float((predict(logits) == task.query_labels).mean())


# ---------------------------------------------------------------------------
# few-shot fine-tuning


@dataclass
class TrainConfig:
    lr: float = 2e-4
    batch_size: int = 32
    iters_per_shot: int = 500
    weight_decay: float = 1e-2
    seed: int = 0

    def iterations(self, shots: int) -> int:
        return self.iters_per_shot * shots


@dataclass
class TrainingHistory:
    steps: list[int] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)

    def append(self, step: int, lr: float, loss: float):
        self.steps.append(step)
        self.lrs.append(lr)
        self.losses.append(loss)

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "lr", "loss"])
            for s, lr, loss in zip(self.steps, self.lrs, self.losses):
                w.writerow([s, f"{lr:.10g}", f"{loss:.8g}"])


class _BatchSampler:
    """Uniform batches: with replacement when the pool is smaller than the
    batch, otherwise epoch-wise shuffles without replacement."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n = n
        self.batch_size = batch_size
        self.rng = rng
        self._order = np.empty(0, dtype=np.int64)

    def next(self) -> np.ndarray:
        if self.n < self.batch_size:
            return self.rng.integers(0, self.n, size=self.batch_size)
        if len(self._order) < self.batch_size:
            self._order = self.rng.permutation(self.n)
        batch, self._order = self._order[:self.batch_size], self._order[self.batch_size:]
        return batch


def run_training_loop(model: DualEncoderModel, params, task: FewShotTask,
                      cfg: TrainConfig, iterations: int,
                      train_rng: np.random.Generator,
                      encode_text_fn=None) -> TrainingHistory:
    """Shared CE loop used by the adapter-module method and the trainable-subset
    baselines: sample a batch, re-encode prompts, step AdamW under cosine lr."""
    prompts = [tokenize_prompt(n, model.vocab, model.cfg.max_text_len)
               for n in task.class_names]
    if encode_text_fn is None:
        encode_text_fn = lambda training, rng: encode_prompts(
            model, prompts, training=training, rng=rng)
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    sampler = _BatchSampler(task.support_images.shape[0], cfg.batch_size,
                            np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xBA7C])))
    tau = model.tau
    history = TrainingHistory()
    for step in range(iterations):
        lr = cosine_lr(step, iterations, cfg.lr)
        idx = sampler.next()
        with Tape() as tape:
            feats = encode_images(model, task.support_images[idx],
                                  training=True, rng=train_rng)
            text_feats = encode_text_fn(training=True, rng=train_rng)
            logits = matmul(feats, transpose(text_feats, (1, 0)))
            loss = cross_entropy_loss(logits, task.support_labels[idx], tau)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                last = history.steps[-1] if history.steps else None
                raise LorabenchError(f"non-finite loss at step {step}; "
                                     f"last good step: {last}")
            tape.backward(loss)
        opt.step(lr=lr)
        opt.zero_grad()
        history.append(step, lr, loss_val)
    return history


def finetune_lora(adapted: AdaptedModel, task: FewShotTask,
                  cfg: TrainConfig) -> TrainingHistory:
    """Fine-tune only the adapter tensors on the support set."""
    iterations = cfg.iterations(task.shots)
    train_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xD209]))
    return run_training_loop(adapted.base, adapted.trainable_parameters(), task,
                             cfg, iterations, train_rng)


# ---------------------------------------------------------------------------
# desk-scale contrastive pretraining


@dataclass
class PretrainConfig:
    epochs: int = 40
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    min_tau: float = 0.01  # keeps logits / tau bounded by 100


def contrastive_pretrain(model: DualEncoderModel, images: np.ndarray,
                         captions: list[str], cfg: PretrainConfig,
                         log: Optional[Callable[[int, float, float], None]] = None
                         ) -> TrainingHistory:
    """Symmetric in-batch contrastive training of the full model.

    The temperature is trainable here (and only here), clamped from below.
    """
    if cfg.batch_size < 2:
        raise DomainError(f"contrastive batches need >= 2 pairs, got {cfg.batch_size}")
    n = images.shape[0]
    prompts = [tokenize_caption(c, model.vocab, model.cfg.max_text_len) for c in captions]
    tokens = np.stack([p.tokens for p in prompts])
    eos = np.asarray([p.eos_index for p in prompts])

    model.set_trainable(True)
    params = model.parameters()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    order_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xC0DE]))
    history = TrainingHistory()

    from .model import encode_tokens

    steps_per_epoch = n // cfg.batch_size
    total = cfg.epochs * steps_per_epoch
    step = 0
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(n)
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            lr = cosine_lr(step, total, cfg.lr)
            with Tape() as tape:
                f = encode_images(model, images[idx])
                t = encode_tokens(model, tokens[idx], eos[idx])
                sims = matmul(f, transpose(t, (1, 0)))
                # divide by the temperature tensor so tau receives gradient
                scaled = div(sims, model.temperature)
                targets = np.arange(cfg.batch_size)
                li = cross_entropy_loss(scaled, targets, tau=1.0)
                lt = cross_entropy_loss(transpose(scaled, (1, 0)), targets, tau=1.0)
                loss = (li + lt) * 0.5
                loss_val = loss.item()
                if not np.isfinite(loss_val):
                    raise LorabenchError(f"non-finite pretraining loss at step {step}")
                tape.backward(loss)
            opt.step(lr=lr)
            opt.zero_grad()
            if model.tau < cfg.min_tau:
                model.temperature.data = np.asarray(cfg.min_tau,
                                                    dtype=model.cfg.np_dtype)
            history.append(step, lr, loss_val)
            if log is not None:
                log(step, lr, loss_val)
            step += 1
    model.set_trainable(False)
    return history
