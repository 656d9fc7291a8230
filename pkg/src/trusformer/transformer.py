"""Stage 2: transformer aggregation of ROI features into a core prediction."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import FEATURE_DIM, ResNetBackbone
from .evaluation import auroc
from .schedule import lr_lambda

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TransformerConfig:
    blocks: int = 12
    heads: int = 8
    dim: int = 256
    mlp_dim: int = 512
    input_dim: int = FEATURE_DIM
    num_classes: int = 2
    roi_dropout_rate: float = 0.2
    # positional table covers this (axial, lateral) ROI grid
    grid_shape: tuple[int, int] = (24, 42)

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        if self.input_dim != FEATURE_DIM:
            raise ValueError(f"input_dim must equal the backbone feature dim ({FEATURE_DIM})")
        if not 0 <= self.roi_dropout_rate <= 1:
            raise ValueError("roi_dropout_rate must lie in [0, 1]")
        object.__setattr__(self, "grid_shape", tuple(self.grid_shape))


@dataclass(frozen=True)
class Stage2Schedule:
    epochs: int = 70
    transformer_lr: float = 1e-4
    transformer_warmup_epochs: int = 5
    backbone_lr: float = 3e-5
    backbone_warmup_epochs: int = 10
    cores_per_batch: int = 8

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.transformer_warmup_epochs >= self.epochs or self.backbone_warmup_epochs >= self.epochs:
            raise ValueError("warmup must be shorter than training")


def self_attention_head(Y, W_Q, W_K, W_V):
    """One attention head on row-stacked tokens ``Y`` (n x d_model).

    Weights map d_model -> d_head as in ``Q = Y @ W_Q.T``. Returns
    ``(A @ V, A)``; the logits are scaled by the square root of the head width.
    """
    Q, K, V = Y @ W_Q.T, Y @ W_K.T, Y @ W_V.T
    A = torch.softmax(Q @ K.transpose(-1, -2) / math.sqrt(Q.shape[-1]), dim=-1)
    return A @ V, A


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.attention: torch.Tensor | None = None

    def forward(self, x: torch.Tensor, keep_attention: bool = False) -> torch.Tensor:
        # x: (n, dim) for one core
        n, dim = x.shape
        q, k, v = self.qkv(x).reshape(n, 3, self.heads, self.head_dim).permute(1, 2, 0, 3)
        A = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1)  # (heads, n, n)
        self.attention = A if keep_attention else None
        y = (A @ v).transpose(0, 1).reshape(n, dim)
        return self.out(y)


class Block(nn.Module):
    """Pre-norm: x + attn(norm(x)), then x + mlp(norm(x))."""

    def __init__(self, dim: int, heads: int, mlp_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_dim), nn.GELU(), nn.Linear(mlp_dim, dim))

    def forward(self, x, keep_attention: bool = False):
        x = x + self.attn(self.norm1(x), keep_attention)
        return x + self.mlp(self.norm2(x))


class PositionalEmbedding(nn.Module):
    """Learnable vector per (axial, lateral) ROI grid cell."""

    def __init__(self, grid_shape: tuple[int, int], dim: int):
        super().__init__()
        self.grid_shape = tuple(grid_shape)
        self.table = nn.Parameter(torch.randn(grid_shape[0] * grid_shape[1], dim) * 0.02)

    def forward(self, grid_index: torch.Tensor) -> torch.Tensor:
        grid_index = torch.as_tensor(grid_index, dtype=torch.long).reshape(-1, 2)
        a, l = grid_index[:, 0], grid_index[:, 1]
        na, nl = self.grid_shape
        if (a < 0).any() or (a >= na).any() or (l < 0).any() or (l >= nl).any():
            raise IndexError(f"ROI grid position outside the {na}x{nl} positional table")
        return self.table[a * nl + l]


@dataclass
class CoreOutput:
    logits: torch.Tensor  # (num_classes,)
    pooled: torch.Tensor  # (dim,) pooled sequence before the classifier
    attentions: list[torch.Tensor] = field(default_factory=list)  # per layer (heads, n, n)

    @property
    def probabilities(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=-1)


class CoreTransformer(nn.Module):
    """(n, 512) ROI features -> 2 logits via projection, positions, encoder, mean pool."""

    def __init__(self, config: TransformerConfig = TransformerConfig()):
        super().__init__()
        self.config = config
        self.proj = nn.Linear(config.input_dim, config.dim)
        self.pos = PositionalEmbedding(config.grid_shape, config.dim)
        self.blocks = nn.ModuleList(Block(config.dim, config.heads, config.mlp_dim) for _ in range(config.blocks))
        self.norm = nn.LayerNorm(config.dim)
        self.classifier = nn.Linear(config.dim, config.num_classes)

    def forward(self, features: torch.Tensor, grid_index, keep_attention: bool = False) -> CoreOutput:
        if features.shape[0] == 0:
            raise ValueError("empty bag")
        x = self.proj(features) + self.pos(grid_index)
        for block in self.blocks:
            x = block(x, keep_attention)
        pooled = self.norm(x).mean(dim=0)
        attn = [b.attn.attention for b in self.blocks] if keep_attention else []
        return CoreOutput(self.classifier(pooled), pooled, attn)


class CoreClassifier(nn.Module):
    """Backbone applied per ROI, then the transformer aggregator."""

    def __init__(self, backbone: ResNetBackbone, transformer: CoreTransformer):
        super().__init__()
        self.backbone = backbone
        self.transformer = transformer

    def forward_core(self, rois, grid_index, keep_attention: bool = False) -> CoreOutput:
        rois = torch.as_tensor(np.asarray(rois, dtype=np.float32))
        if rois.shape[0] == 0:
            raise ValueError("empty bag")
        return self.transformer(self.backbone(rois), grid_index, keep_attention)

    def forward_batch(self, cores: list[tuple[np.ndarray, np.ndarray]]) -> list[CoreOutput]:
        """One backbone call over all ROIs of several cores; per-core attention."""
        sizes = [len(r) for r, _ in cores]
        if min(sizes) == 0:
            raise ValueError("empty bag")
        x = torch.from_numpy(np.concatenate([np.asarray(r, np.float32) for r, _ in cores]))
        feats = torch.split(self.backbone(x), sizes)
        return [self.transformer(f, g) for f, (_, g) in zip(feats, cores)]


def roi_dropout(n: int, rate: float, rng, training: bool = True) -> np.ndarray:
    """Indices kept after dropping each ROI independently with probability ``rate``.

    At least one ROI is always kept; evaluation mode keeps all.
    """
    if n < 1:
        raise ValueError("bag must be nonempty")
    if not training or rate == 0:
        return np.arange(n)
    rng = np.random.default_rng(rng)
    keep = np.flatnonzero(rng.random(n) >= rate)
    if keep.size == 0:
        keep = np.array([rng.integers(n)])
    return keep


# -- Stage 2 training ------------------------------------------------------------


@dataclass
class CoreSample:
    core_id: str
    rois: np.ndarray  # (n, H, W) float32
    grid_index: np.ndarray  # (n, 2)
    label: int  # 1 = cancer
    positions: np.ndarray | None = None  # (n, 2) mm
    meta: dict = field(default_factory=dict)


class TrainingDivergedError(RuntimeError):
    pass


@torch.no_grad()
def predict_cores(model: CoreClassifier, cores: list[CoreSample]) -> np.ndarray:
    """Cancer probability per core, all ROIs kept, eval mode."""
    was_training = model.training
    model.eval()
    probs = [model.forward_core(c.rois, c.grid_index).probabilities[1].item() for c in cores]
    model.train(was_training)
    return np.asarray(probs)


def param_groups(model: CoreClassifier, schedule: Stage2Schedule):
    return [
        {"params": list(model.transformer.parameters()), "lr": schedule.transformer_lr, "name": "transformer"},
        {"params": list(model.backbone.parameters()), "lr": schedule.backbone_lr, "name": "backbone"},
    ]


@dataclass
class Stage2Result:
    history: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_auroc: float | None = None
    best_state: dict | None = None


def _improves(score: float | None, result: Stage2Result) -> bool:
    # without validation scores the latest epoch wins; otherwise strict
    # improvement, so ties keep the earliest epoch
    if result.best_epoch is None:
        return True
    if score is None:
        return result.best_auroc is None
    return result.best_auroc is None or score > result.best_auroc


def finetune(
    model: CoreClassifier,
    train_cores: list[CoreSample],
    val_cores: list[CoreSample],
    schedule: Stage2Schedule = Stage2Schedule(),
    *,
    seed: int = 0,
    out_dir: str | Path | None = None,
    resume: dict | None = None,
    max_epochs: int | None = None,
    checkpoint_meta: dict | None = None,
) -> Stage2Result:
    """End-to-end cross-entropy training; best = highest validation AUROC.

    Each epoch's shuffling and ROI dropout come from an RNG keyed on
    ``(seed, epoch)``, so resuming from an epoch checkpoint continues the
    exact trajectory. ``max_epochs`` stops early without changing the LR
    schedule (used for resume tests). ``checkpoint_meta`` is copied into every
    epoch checkpoint.
    """
    if not train_cores:
        raise ValueError("no training cores")
    steps_per_epoch = math.ceil(len(train_cores) / schedule.cores_per_batch)
    opt = torch.optim.Adam(param_groups(model, schedule))
    lambdas = [
        lr_lambda(schedule.transformer_warmup_epochs, schedule.epochs, steps_per_epoch),
        lr_lambda(schedule.backbone_warmup_epochs, schedule.epochs, steps_per_epoch),
    ]
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambdas)
    result = Stage2Result()
    start = 0
    if resume is not None:
        model.load_state_dict(resume["model"])
        opt.load_state_dict(resume["optimizer"])
        sched.load_state_dict(resume["scheduler"])
        result.history = list(resume["history"])
        result.best_epoch = resume["best_epoch"]
        result.best_auroc = resume["best_auroc"]
        result.best_state = resume["best_state"]
        start = resume["epoch"] + 1
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    rate = model.transformer.config.roi_dropout_rate
    stop = schedule.epochs if max_epochs is None else min(schedule.epochs, max_epochs)
    for epoch in range(start, stop):
        model.train()
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(len(train_cores))
        losses = []
        for b in range(steps_per_epoch):
            batch = [train_cores[i] for i in order[b * schedule.cores_per_batch : (b + 1) * schedule.cores_per_batch]]
            kept = [roi_dropout(len(c.rois), rate, rng) for c in batch]
            outputs = model.forward_batch([(c.rois[k], c.grid_index[k]) for c, k in zip(batch, kept)])
            logits = torch.stack([o.logits for o in outputs])
            target = torch.tensor([c.label for c in batch])
            loss = F.cross_entropy(logits, target)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch} batch {b}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            losses.append(loss.item())

        entry = {"epoch": epoch, "loss": float(np.mean(losses)), "val_auroc": None}
        if val_cores:
            labels = [c.label for c in val_cores]
            if len(set(labels)) == 2:
                entry["val_auroc"] = auroc(predict_cores(model, val_cores), labels)
        result.history.append(entry)
        log.info("stage2 epoch %d loss %.4f val auroc %s", epoch, entry["loss"], entry["val_auroc"])

        if _improves(entry["val_auroc"], result):
            result.best_epoch = epoch
            result.best_auroc = entry["val_auroc"]
            result.best_state = copy.deepcopy(model.state_dict())
        if out_dir is not None:
            torch.save(
                {
                    "epoch": epoch,
                    "model": model.state_dict(),
                    "optimizer": opt.state_dict(),
                    "scheduler": sched.state_dict(),
                    "history": result.history,
                    "best_epoch": result.best_epoch,
                    "best_auroc": result.best_auroc,
                    "best_state": result.best_state,
                    **(checkpoint_meta or {}),
                },
                out_dir / f"epoch_{epoch:03d}.pt",
            )
    return result
