"""Benchmark harness: per-seed runs for each method, the ablation grid over
placement coordinates, and the pretrain step, all producing RunReport rows."""

from __future__ import annotations

import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import product
from typing import Callable, Optional

import numpy as np

from .baselines import (LinearAdapter, SoftPromptConfig, adapter_finetune,
                        bias_only_finetune, soft_prompt_finetune)
from .data import Dataset
from .errors import DomainError, LorabenchError
from .fewshot import (FewShotTask, PretrainConfig, TrainConfig,
                      contrastive_pretrain, evaluate, finetune_lora,
                      sample_support_set, zero_shot_logits, predict)
from .lora import PlacementConfig, inject, merge, unmerge
from .model import DualEncoderModel, ModelConfig, save_checkpoint, tokenize_prompt
from .report import RunReport, mean_report

METHODS = ("zero-shot", "lora", "soft-prompt", "adapter", "bias-only")
SHOT_GRID = (1, 2, 4, 8, 16)

DEFAULT_GROUPS = ("q", "k", "v", "o", "qk", "qkv", "qkvo")
DEFAULT_RANKS = (1, 2, 4, 8, 16)

ModelFactory = Callable[[], DualEncoderModel]


@dataclass
class AblationGridSpec:
    groups: tuple[str, ...] = DEFAULT_GROUPS
    ranks: tuple[int, ...] = DEFAULT_RANKS
    spans: tuple[str, ...] = ("all",)
    encoders: tuple[str, ...] = ("both",)
    shots: int = 4
    n_seeds: int = 3

    def cells(self) -> list[tuple[str, int, str, str]]:
        return list(product(self.groups, self.ranks, self.spans, self.encoders))


def default_ablation_cells() -> list[tuple[str, int, str, str]]:
    """The documented default grid: 7 matrix groups x 5 ranks at every layer,
    plus the 7 groups at rank 2 restricted to the bottom or upper half."""
    cells = [(g, r, "all", "both") for g in DEFAULT_GROUPS for r in DEFAULT_RANKS]
    cells += [(g, 2, span, "both") for g in DEFAULT_GROUPS for span in ("bottom", "up")]
    return cells


def derive_seed(master: int, *parts) -> int:
    """Stable per-cell seed from the master seed and the cell coordinates."""
    h = zlib.crc32(repr((master,) + parts).encode())
    return int(h)


def run_single(model_factory: ModelFactory, ds: Dataset, method: str,
               shots: int, seed: int,
               placement: Optional[PlacementConfig] = None,
               train_cfg: Optional[TrainConfig] = None,
               record_seconds: bool = True,
               merged_checkpoint: Optional[str] = None,
               merge_tolerance: float = 1e-5) -> RunReport:
    """One (method, shots, seed) run on a freshly loaded model."""
    if method not in METHODS:
        raise DomainError(f"unknown method {method!r}; choose from {METHODS}")
    model = model_factory()
    task = sample_support_set(ds.images, ds.labels, ds.class_names, shots, seed)
    cfg = train_cfg or TrainConfig()
    cfg = TrainConfig(lr=cfg.lr, batch_size=cfg.batch_size,
                      iters_per_shot=cfg.iters_per_shot,
                      weight_decay=cfg.weight_decay, seed=seed)
    t0 = time.perf_counter()
    model.set_trainable(False)
    zs_acc = evaluate(model, task)
    total = model.param_count()
    iters = cfg.iterations(shots)
    config_digest = "-"

    if method == "zero-shot":
        acc, trainable, iters = zs_acc, 0, 0
    elif method == "lora":
        pl = placement or PlacementConfig()
        config_digest = pl.digest()
        adapted = inject(model, pl, seed=seed)
        finetune_lora(adapted, task, cfg)
        acc = evaluate(adapted.base, task)
        trainable = adapted.trainable_count()
        _assert_merge_equivalence(adapted, task, merge_tolerance)
        if merged_checkpoint is not None:
            save_checkpoint(adapted.base, merged_checkpoint)
        unmerge(adapted)
    elif method == "soft-prompt":
        res = soft_prompt_finetune(model, task, SoftPromptConfig(), cfg)
        acc, trainable = res.accuracy, res.trainable_count
        config_digest = "ctx4"
    elif method == "adapter":
        adapter = LinearAdapter(model.cfg.embed_dim, bottleneck=8, seed=seed,
                                dtype=model.cfg.np_dtype)
        res = adapter_finetune(model, task, adapter, alpha=0.5, train_cfg=cfg)
        acc, trainable = res.accuracy, res.trainable_count
        config_digest = "mlp8-a0.5"
    else:  # bias-only
        res = bias_only_finetune(model, task, cfg)
        acc, trainable = res.accuracy, res.trainable_count
        config_digest = "bias"

    seconds = time.perf_counter() - t0 if record_seconds else None
    return RunReport(method=method, config=config_digest, shots=shots, seed=seed,
                     zs_acc=zs_acc, acc=acc, trainable=trainable, total=total,
                     iters=iters, seconds=seconds)


def _assert_merge_equivalence(adapted, task: FewShotTask, tol: float) -> None:
    """Dynamic-vs-merged logits must agree before a lora row is reported."""
    model = adapted.base
    prompts = [tokenize_prompt(n, model.vocab, model.cfg.max_text_len)
               for n in task.class_names]
    probe = task.query_images[:min(100, task.query_images.shape[0])]
    dynamic = zero_shot_logits(model, probe, prompts).data.copy()
    merge(adapted)
    merged = zero_shot_logits(model, probe, prompts).data
    diff = float(np.abs(dynamic - merged).max())
    if diff >= tol:
        unmerge(adapted)
        raise LorabenchError(f"merge equivalence violated: max logit diff {diff:.3e}")
    # leave the model merged; callers unmerge when they need the modules back


def run_method_over_seeds(model_factory: ModelFactory, ds: Dataset, method: str,
                          shots: int, seeds: list[int],
                          placement: Optional[PlacementConfig] = None,
                          train_cfg: Optional[TrainConfig] = None,
                          record_seconds: bool = True,
                          merged_checkpoint_dir: Optional[str] = None
                          ) -> list[RunReport]:
    """Per-seed rows plus one aggregated 'mean' row."""
    rows = []
    for seed in seeds:
        merged = None
        if merged_checkpoint_dir is not None and method == "lora":
            merged = f"{merged_checkpoint_dir}/merged_seed{seed}"
        rows.append(run_single(model_factory, ds, method, shots, seed,
                               placement=placement, train_cfg=train_cfg,
                               record_seconds=record_seconds,
                               merged_checkpoint=merged))
    rows.append(mean_report(rows))
    return rows


def run_ablation(model_factory: ModelFactory, ds: Dataset,
                 cells: list[tuple[str, int, str, str]], shots: int,
                 n_seeds: int, master_seed: int = 0, workers: int = 1,
                 train_cfg: Optional[TrainConfig] = None
                 ) -> tuple[list[RunReport], list[tuple]]:
    """One row per (cell, seed), ordered by cell then seed.  Cells whose
    placement is invalid (e.g. rank above the matrix dimension) are skipped
    and reported in the second return value."""

    def run_cell(cell_index: int):
        group, rank, span, encoders = cells[cell_index]
        try:
            placement = PlacementConfig(matrices=tuple(group), layer_span=span,
                                        encoders=encoders, rank=rank)
        except DomainError as e:
            return cell_index, None, str(e)
        rows = []
        for s in range(n_seeds):
            seed = derive_seed(master_seed, group, rank, span, encoders, s)
            try:
                row = run_single(model_factory, ds, "lora", shots, seed,
                                 placement=placement, train_cfg=train_cfg,
                                 record_seconds=False)
            except DomainError as e:
                return cell_index, None, str(e)
            row.extra = {"group": group, "rank": rank, "span": span,
                         "encoders": encoders}
            rows.append(row)
        return cell_index, rows, None

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_cell, range(len(cells))))
    else:
        results = [run_cell(i) for i in range(len(cells))]

    rows, skipped = [], []
    for idx, cell_rows, err in sorted(results, key=lambda r: r[0]):
        if cell_rows is None:
            skipped.append((cells[idx], err))
        else:
            rows.extend(cell_rows)
    return rows, skipped


def pretrain_model(ds: Dataset, cfg: PretrainConfig,
                   model_cfg: Optional[ModelConfig] = None
                   ) -> tuple[DualEncoderModel, "TrainingHistory"]:
    if model_cfg is None:
        model_cfg = ModelConfig(vocab_words=ds.vocab_words)
    model = DualEncoderModel(model_cfg, seed=cfg.seed)
    history = contrastive_pretrain(model, ds.images, ds.captions, cfg)
    return model, history
