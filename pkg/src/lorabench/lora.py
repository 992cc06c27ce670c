"""Low-rank adaptation engine: create, place, merge and count adapter modules.

A module holds the factored update delta = B @ A for one attention projection.
The host weight is stored input-major (d_in x d_out), i.e. transposed relative
to the column-vector convention, so merging folds in (B @ A) transposed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DomainError, FormatError, StateError
from .model import (DualEncoderModel, ModelConfig, read_tensor_blob,
                    write_tensor_blob)
from .tensor import Tensor

MATRICES = ("q", "k", "v", "o")
LAYER_SPANS = ("bottom", "up", "all")
ENCODER_CHOICES = ("vision", "text", "both")


@dataclass
class PlacementConfig:
    """Which attention matrices, layers and encoders receive adapter modules."""

    matrices: tuple[str, ...] = ("q", "k", "v")
    layer_span: str = "all"
    encoders: str = "both"
    rank: int = 2
    scale: float = 1.0
    dropout: float = 0.25

    def __post_init__(self):
        self.matrices = tuple(self.matrices)
        if not self.matrices or any(m not in MATRICES for m in self.matrices):
            raise DomainError(f"matrices must be a non-empty subset of {MATRICES}, "
                              f"got {self.matrices}")
        if len(set(self.matrices)) != len(self.matrices):
            raise DomainError(f"duplicate matrices in {self.matrices}")
        if self.layer_span not in LAYER_SPANS:
            raise DomainError(f"layer_span must be one of {LAYER_SPANS}")
        if self.encoders not in ENCODER_CHOICES:
            raise DomainError(f"encoders must be one of {ENCODER_CHOICES}")
        if self.rank < 1:
            raise DomainError(f"rank must be >= 1, got {self.rank}")
        if not (0.0 <= self.dropout < 1.0):
            raise DomainError(f"dropout must be in [0, 1), got {self.dropout}")

    def digest(self) -> str:
        return f"{''.join(self.matrices)}-{self.layer_span}-{self.encoders}-r{self.rank}"

    def selected_layers(self, depth: int) -> range:
        # odd depth: bottom gets the extra layer
        split = (depth + 1) // 2
        if self.layer_span == "bottom":
            return range(0, split)
        if self.layer_span == "up":
            return range(split, depth)
        return range(0, depth)

    def selected_encoders(self) -> tuple[str, ...]:
        if self.encoders == "both":
            return ("vision", "text")
        return (self.encoders,)

    def targets(self, depth: int) -> list[tuple[str, int, str]]:
        """All (encoder, layer, matrix) triples selected by this placement."""
        return [(enc, layer, m)
                for enc in self.selected_encoders()
                for layer in self.selected_layers(depth)
                for m in self.matrices]


class LoRAModule:
    """One factored update: A is (rank, d_in) Kaiming-uniform, B is (d_out, rank) zeros."""

    def __init__(self, A: Tensor, B: Tensor, rank: int, scale: float,
                 dropout: float, target: tuple[str, int, str]):
        self.A = A
        self.B = B
        self.rank = rank
        self.scale = scale
        self.dropout = dropout
        self.target = target

    def delta(self) -> np.ndarray:
        """Materialized dense update (d_out x d_in), i.e. B @ A."""
        return self.B.data @ self.A.data

    def param_count(self) -> int:
        return self.A.size + self.B.size


def init_lora(d_out: int, d_in: int, rank: int, scale: float = 1.0,
              dropout: float = 0.0, seed: int = 0,
              target: tuple[str, int, str] = ("", 0, ""),
              dtype=np.float32) -> LoRAModule:
    """Seeded module init: A ~ U(-sqrt(6/d_in), +sqrt(6/d_in)), B = 0."""
    if rank < 1 or rank > min(d_out, d_in):
        raise DomainError(f"rank {rank} outside [1, min({d_out}, {d_in})]")
    rng = np.random.default_rng(seed)
    bound = np.sqrt(6.0 / d_in)
    A = Tensor(rng.uniform(-bound, bound, size=(rank, d_in)).astype(dtype),
               requires_grad=True)
    B = Tensor(np.zeros((d_out, rank), dtype=dtype), requires_grad=True)
    return LoRAModule(A, B, rank, scale, dropout, target)


def lora_forward(W: Tensor, module: LoRAModule, x: Tensor,
                 training: bool = False, rng=None) -> Tensor:
    """h = W x + scale * B (A drop(x)) for column-convention W (d_out x d_in)."""
    from .tensor import dropout as drop_op, matmul, transpose

    xd = drop_op(x, module.dropout, training, rng)
    base = matmul(W, x) if x.data.ndim == 1 else matmul(x, transpose(W, (1, 0)))
    delta = matmul(module.B, matmul(module.A, xd)) if x.data.ndim == 1 else \
        matmul(matmul(xd, transpose(module.A, (1, 0))), transpose(module.B, (1, 0)))
    return base + delta * module.scale


class AdaptedModel:
    """A frozen base model plus the adapter modules selected by a placement."""

    def __init__(self, base: DualEncoderModel, cfg: PlacementConfig,
                 modules: dict[tuple[str, int, str], LoRAModule]):
        self.base = base
        self.placement = cfg
        self.modules = modules
        self.merged = False
        self._snapshots: Optional[dict[tuple[str, int, str], np.ndarray]] = None

    def trainable_parameters(self) -> list[Tensor]:
        out = []
        for key in sorted(self.modules):
            out.append(self.modules[key].A)
            out.append(self.modules[key].B)
        return out

    def trainable_count(self) -> int:
        return sum(m.param_count() for m in self.modules.values())

    def named_lora_tensors(self) -> list[tuple[str, Tensor]]:
        out = []
        for (enc, layer, mat) in sorted(self.modules):
            m = self.modules[(enc, layer, mat)]
            out.append((f"{enc}.{layer}.{mat}.A", m.A))
            out.append((f"{enc}.{layer}.{mat}.B", m.B))
        return out


def _encoder_of(model: DualEncoderModel, name: str):
    return model.visual if name == "vision" else model.textual


def inject(model: DualEncoderModel, cfg: PlacementConfig, seed: int = 0) -> AdaptedModel:
    """Freeze the base model and attach one fresh module per selected target."""
    if model.has_lora():
        raise StateError("model already carries adapter modules; inject once only")
    d = model.cfg.width
    if cfg.rank > d:
        raise DomainError(f"rank {cfg.rank} exceeds matrix dimension {d}")
    model.set_trainable(False)
    ss = np.random.SeedSequence([seed, 0x10A7])
    modules: dict[tuple[str, int, str], LoRAModule] = {}
    targets = cfg.targets(model.cfg.depth)
    for child, target in zip(ss.spawn(len(targets)), targets):
        enc, layer, mat = target
        module = init_lora(d, d, cfg.rank, cfg.scale, cfg.dropout,
                           seed=child, target=target, dtype=model.cfg.np_dtype)
        _encoder_of(model, enc).blocks[layer].lora[mat] = module
        modules[target] = module
    return AdaptedModel(model, cfg, modules)


def merge(adapted: AdaptedModel) -> DualEncoderModel:
    """Fold scale * B @ A into each host weight; detach modules for inference."""
    if adapted.merged:
        raise StateError("adapter modules already merged")
    snapshots = {}
    for target, module in adapted.modules.items():
        enc, layer, mat = target
        w = _encoder_of(adapted.base, enc).blocks[layer].weight(mat)
        snapshots[target] = w.data.copy()
        # stored weights are input-major, delta() is output-major
        w.data = w.data + (module.scale * module.delta()).T.astype(w.data.dtype)
        _encoder_of(adapted.base, enc).blocks[layer].lora.pop(mat)
    adapted._snapshots = snapshots
    adapted.merged = True
    return adapted.base


def unmerge(adapted: AdaptedModel) -> AdaptedModel:
    """Restore pre-merge weights bitwise and re-attach the modules."""
    if not adapted.merged or adapted._snapshots is None:
        raise StateError("unmerge without a prior merge")
    for target, module in adapted.modules.items():
        enc, layer, mat = target
        block = _encoder_of(adapted.base, enc).blocks[layer]
        block.weight(mat).data = adapted._snapshots[target]
        block.lora[mat] = module
    adapted._snapshots = None
    adapted.merged = False
    return adapted


def detach(adapted: AdaptedModel) -> DualEncoderModel:
    """Remove modules without merging, returning the unchanged base model."""
    for (enc, layer, mat) in adapted.modules:
        _encoder_of(adapted.base, enc).blocks[layer].lora.pop(mat, None)
    return adapted.base


def trainable_param_count(cfg: PlacementConfig, depth: int, width: int) -> int:
    """Sum of rank * (d_out + d_in) over every selected target matrix."""
    return len(cfg.targets(depth)) * cfg.rank * (width + width)


# ---------------------------------------------------------------------------
# adapter-only checkpoints


def save_lora_checkpoint(adapted: AdaptedModel, path) -> None:
    write_tensor_blob(adapted.named_lora_tensors(), Path(path),
                      {"kind": "lora", "placement": asdict(adapted.placement),
                       "width": adapted.base.cfg.width,
                       "depth": adapted.base.cfg.depth})


def load_lora_checkpoint(model: DualEncoderModel, path) -> AdaptedModel:
    """Attach saved adapter tensors onto a base model with matching dims."""
    manifest, arrays = read_tensor_blob(Path(path))
    if manifest.get("kind") != "lora":
        raise FormatError(f"not a lora checkpoint: kind={manifest.get('kind')!r}")
    if manifest["width"] != model.cfg.width or manifest["depth"] != model.cfg.depth:
        raise FormatError(f"checkpoint dims ({manifest['width']}, {manifest['depth']}) "
                          f"do not match model ({model.cfg.width}, {model.cfg.depth})")
    pcfg = manifest["placement"]
    cfg = PlacementConfig(matrices=tuple(pcfg["matrices"]), layer_span=pcfg["layer_span"],
                          encoders=pcfg["encoders"], rank=pcfg["rank"],
                          scale=pcfg["scale"], dropout=pcfg["dropout"])
    adapted = inject(model, cfg, seed=0)
    for target, module in adapted.modules.items():
        enc, layer, mat = target
        for letter, tensor in (("A", module.A), ("B", module.B)):
            name = f"{enc}.{layer}.{mat}.{letter}"
            if name not in arrays:
                raise FormatError(f"lora checkpoint missing tensor {name}")
            arr = arrays[name]
            if tuple(arr.shape) != tuple(tensor.data.shape):
                raise FormatError(f"tensor {name}: shape {arr.shape} vs {tensor.data.shape}")
            tensor.data = arr.astype(model.cfg.np_dtype)
    return adapted
