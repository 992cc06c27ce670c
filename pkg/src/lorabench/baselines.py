"""Competing parameter-efficient strategies at desk scale: continuous-context
prompt tuning, a residual bottleneck feature adapter, and bias-only tuning.

These are generic instantiations of the three mechanism families, wired to
the same optimizer, schedule and CE loss as the low-rank method so parameter
counts and accuracy trends are directly comparable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, InputError
from .fewshot import (FewShotTask, TrainConfig, TrainingHistory,
                      cross_entropy_loss, predict, run_training_loop)
from .model import (DualEncoderModel, PROMPT_TEMPLATE, encode_images,
                    encode_prompts, encode_tokens, tokenize_prompt)
from .optim import AdamW, cosine_lr
from .tensor import (Tape, Tensor, add, concat, gelu, l2_normalize, matmul,
                     mean, reshape, take_rows, transpose)


@dataclass
class BaselineResult:
    accuracy: float
    trainable_count: int
    history: TrainingHistory
    artifacts: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# continuous-context prompt tuning


@dataclass
class SoftPromptConfig:
    context_length: int = 4


def _context_token_layout(model: DualEncoderModel, task: FewShotTask, m: int):
    """Token grids for [BOS, <m placeholders>, class words, EOS, PAD...]."""
    placeholder = ["a"] * m  # ids are irrelevant; embeddings get overridden
    prompts = [tokenize_prompt(name, model.vocab, model.cfg.max_text_len,
                               template=tuple(placeholder))
               for name in task.class_names]
    tokens = np.stack([p.tokens for p in prompts])
    eos = np.asarray([p.eos_index for p in prompts])
    return tokens, eos


def _soft_prompt_features(model: DualEncoderModel, context: Tensor,
                          tokens: np.ndarray, eos: np.ndarray):
    """Text features with rows 1..m of the embedded sequence replaced by the
    shared trainable context."""
    k, t = tokens.shape
    m, d = context.shape
    table = model.textual.token_embed
    prefix = take_rows(table, tokens[:, :1])
    suffix = take_rows(table, tokens[:, 1 + m:])
    ctx = add(reshape(context, (1, m, d)),
              Tensor(np.zeros((k, m, d), dtype=model.cfg.np_dtype)))
    emb = concat([prefix, ctx, suffix], axis=1)
    return encode_tokens(model, tokens, eos, embeddings=emb)


def soft_prompt_finetune(model: DualEncoderModel, task: FewShotTask,
                         cfg: SoftPromptConfig = SoftPromptConfig(),
                         train_cfg: TrainConfig = TrainConfig()) -> BaselineResult:
    """Optimize shared context vectors in front of the class tokens (Eq.4-style).

    The context is initialized from the embeddings of the standard template,
    so step-0 predictions match template zero-shot predictions exactly.
    """
    m = cfg.context_length
    cfg_model = model.cfg
    longest = max(len(n.split()) for n in task.class_names)
    if 2 + m + longest > cfg_model.max_text_len:
        raise InputError(f"context length {m} overflows max text length "
                         f"{cfg_model.max_text_len}")
    model.set_trainable(False)
    if m == len(PROMPT_TEMPLATE):
        init = model.textual.token_embed.data[
            np.asarray(model.vocab.encode_words(PROMPT_TEMPLATE))].copy()
    else:
        init = (np.random.default_rng(train_cfg.seed).standard_normal(
            (m, cfg_model.width)) * 0.02).astype(cfg_model.np_dtype)
    context = Tensor(init.astype(cfg_model.np_dtype), requires_grad=True)

    tokens, eos = _context_token_layout(model, task, m)
    encode_text_fn = lambda training, rng: _soft_prompt_features(
        model, context, tokens, eos)

    iterations = train_cfg.iterations(task.shots)
    train_rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 0x50F7]))
    history = run_training_loop(model, [context], task, train_cfg, iterations,
                                train_rng, encode_text_fn=encode_text_fn)
    acc = soft_prompt_evaluate(model, task, context, tokens, eos)
    return BaselineResult(accuracy=acc, trainable_count=context.size,
                          history=history, artifacts={"context": context,
                                                      "tokens": tokens, "eos": eos})


def soft_prompt_evaluate(model: DualEncoderModel, task: FewShotTask,
                         context: Tensor, tokens: np.ndarray,
                         eos: np.ndarray) -> float:
    feats = encode_images(model, task.query_images)
    texts = _soft_prompt_features(model, context, tokens, eos)
    logits = matmul(feats, transpose(texts, (1, 0)))
    return float((predict(logits) == task.query_labels).mean())


# ---------------------------------------------------------------------------
# residual bottleneck adapter on image features


class LinearAdapter:
    """Two-layer bottleneck on image features with residual blend alpha."""

    def __init__(self, embed_dim: int, bottleneck: int, seed: int = 0,
                 dtype=np.float32):
        if bottleneck >= embed_dim:
            raise DomainError(f"bottleneck {bottleneck} must be < width {embed_dim}")
        rng = np.random.default_rng(seed)
        bound = np.sqrt(6.0 / embed_dim)
        self.w1 = Tensor(rng.uniform(-bound, bound, (embed_dim, bottleneck)).astype(dtype),
                         requires_grad=True)
        self.b1 = Tensor(np.zeros(bottleneck, dtype=dtype), requires_grad=True)
        # zero-output init: adapted features start as the plain features
        self.w2 = Tensor(np.zeros((bottleneck, embed_dim), dtype=dtype),
                         requires_grad=True)
        self.b2 = Tensor(np.zeros(embed_dim, dtype=dtype), requires_grad=True)

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def forward(self, feats: Tensor) -> Tensor:
        h = gelu(add(matmul(feats, self.w1), self.b1))
        return add(matmul(h, self.w2), self.b2)


def adapter_logits(adapter: LinearAdapter, alpha: float, feats: Tensor,
                   text_feats: Tensor) -> Tensor:
    if alpha == 0.0:
        # residual bypass: normalizing (1-alpha) * f recovers f exactly
        return matmul(feats, transpose(text_feats, (1, 0)))
    blended = add(adapter.forward(feats) * alpha, feats * (1.0 - alpha))
    return matmul(l2_normalize(blended), transpose(text_feats, (1, 0)))


def adapter_finetune(model: DualEncoderModel, task: FewShotTask,
                     adapter: LinearAdapter, alpha: float,
                     train_cfg: TrainConfig = TrainConfig()) -> BaselineResult:
    """Train only the adapter on frozen, precomputed embeddings (Eq.5-style)."""
    if not (0.0 <= alpha <= 1.0):
        raise DomainError(f"alpha must be in [0, 1], got {alpha}")
    model.set_trainable(False)
    prompts = [tokenize_prompt(n, model.vocab, model.cfg.max_text_len)
               for n in task.class_names]
    sup_feats = encode_images(model, task.support_images).data
    qry_feats = encode_images(model, task.query_images).data
    text_feats = encode_prompts(model, prompts).data

    iterations = train_cfg.iterations(task.shots)
    opt = AdamW(adapter.parameters(), lr=train_cfg.lr,
                weight_decay=train_cfg.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 0xADA7]))
    n = sup_feats.shape[0]
    tau = model.tau
    history = TrainingHistory()
    texts = Tensor(text_feats)
    for step in range(iterations):
        lr = cosine_lr(step, iterations, train_cfg.lr)
        idx = rng.integers(0, n, size=train_cfg.batch_size) if n < train_cfg.batch_size \
            else rng.permutation(n)[:train_cfg.batch_size]
        with Tape() as tape:
            logits = adapter_logits(adapter, alpha, Tensor(sup_feats[idx]), texts)
            loss = cross_entropy_loss(logits, task.support_labels[idx], tau)
            tape.backward(loss)
        opt.step(lr=lr)
        opt.zero_grad()
        history.append(step, lr, loss.item())

    logits = adapter_logits(adapter, alpha, Tensor(qry_feats), texts)
    acc = float((predict(logits) == task.query_labels).mean())
    return BaselineResult(accuracy=acc, trainable_count=adapter.param_count(),
                          history=history, artifacts={"adapter": adapter})


# ---------------------------------------------------------------------------
# bias-only tuning


def bias_parameters(model: DualEncoderModel) -> list[Tensor]:
    """Biases of the attention projections and MLPs of both encoders."""
    out = []
    for enc in (model.visual, model.textual):
        for blk in enc.blocks:
            out.extend([blk.bq, blk.bk, blk.bv, blk.bo, blk.b1, blk.b2])
    return out


def bias_only_finetune(model: DualEncoderModel, task: FewShotTask,
                       train_cfg: TrainConfig = TrainConfig()) -> BaselineResult:
    """Train only attention/MLP bias vectors; all weight matrices stay frozen."""
    model.set_trainable(False)
    params = bias_parameters(model)
    for p in params:
        p.requires_grad = True
    iterations = train_cfg.iterations(task.shots)
    train_rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 0xB1A5]))
    history = run_training_loop(model, params, task, train_cfg, iterations, train_rng)
    for p in params:
        p.requires_grad = False
    from .fewshot import evaluate
    acc = evaluate(model, task)
    return BaselineResult(accuracy=acc, trainable_count=sum(p.size for p in params),
                          history=history)
