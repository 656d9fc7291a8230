"""Per-ROI relevancy from gradient-weighted attention.

For a target class score, every layer contributes a head-averaged positive
part of ``A * dA`` (attention times its gradient). Starting from the identity,
each layer updates ``R <- R + A_bar @ R`` in forward order. The identity is
subtracted afterwards and ``R`` is averaged over its receiving (row) index,
giving one score per source ROI.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .preprocess import ROISpec

CLASSES = ("benign", "cancer")

# axis of R averaged away when pooling; 0 = receivers (rows), 1 = sources
POOL_AXIS = 0


class ModelNotReadyError(RuntimeError):
    pass


@dataclass
class RelevancyVector:
    scores: np.ndarray
    target_class: str

    def __len__(self) -> int:
        return len(self.scores)


def modified_attention(A: torch.Tensor, grad_A: torch.Tensor) -> torch.Tensor:
    """Head mean of the positive part of ``A * grad_A``; inputs are (heads, n, n) or (n, n)."""
    if A.shape != grad_A.shape:
        raise ValueError(f"attention {tuple(A.shape)} and gradient {tuple(grad_A.shape)} differ")
    cam = (A * grad_A).clamp(min=0)
    return cam.mean(dim=0) if cam.dim() == 3 else cam


def propagate(R: torch.Tensor, A_bar: torch.Tensor) -> torch.Tensor:
    """One layer of ``R <- R + A_bar @ R``."""
    return R + A_bar @ R


def relevancy_matrix(A_bars: list[torch.Tensor]) -> torch.Tensor:
    n = A_bars[0].shape[-1]
    R = torch.eye(n, dtype=A_bars[0].dtype)
    for A_bar in A_bars:
        R = propagate(R, A_bar)
    return R


def pool_relevancy(R: torch.Tensor, axis: int = POOL_AXIS) -> torch.Tensor:
    """Remove the identity offset and average over ``axis``."""
    return (R - torch.eye(R.shape[0], dtype=R.dtype)).mean(dim=axis)


def _class_index(target_class) -> int:
    if isinstance(target_class, str):
        return CLASSES.index(target_class)
    return int(target_class)


def roi_relevance(model, rois, grid_index, target_class="cancer") -> RelevancyVector:
    """Relevancy of each ROI of one bag for ``target_class``.

    ``model`` is a :class:`~trusformer.transformer.CoreClassifier`; it is run in
    eval mode with one forward and one backward pass.
    """
    if model is None or not hasattr(model, "forward_core"):
        raise ModelNotReadyError("a loaded core classifier is required")
    c = _class_index(target_class)
    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad():
            out = model.forward_core(rois, grid_index, keep_attention=True)
            grads = torch.autograd.grad(out.logits[c], out.attentions, allow_unused=True)
    finally:
        model.train(was_training)
    A_bars = []
    for A, g in zip(out.attentions, grads):
        g = torch.zeros_like(A) if g is None else g
        A_bars.append(modified_attention(A.detach(), g.detach()))
    R = relevancy_matrix(A_bars)
    return RelevancyVector(pool_relevancy(R).numpy().astype(np.float64), CLASSES[c])


def map_to_image(
    scores,
    positions,
    image_shape: tuple[int, int],
    extent_mm: tuple[float, float],
    roi_size_mm: float = ROISpec.roi_size_mm,
) -> np.ndarray:
    """Splat each ROI score over its footprint; overlapping footprints are averaged.

    Pixels covered by no ROI are 0.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    h, w = image_shape
    pa, pl = extent_mm[0] / h, extent_mm[1] / w
    total = np.zeros((h, w))
    count = np.zeros((h, w))
    size_a = max(1, int(round(roi_size_mm / pa)))
    size_l = max(1, int(round(roi_size_mm / pl)))
    for s, (a_mm, l_mm) in zip(scores, positions):
        if a_mm < 0 or l_mm < 0 or a_mm + roi_size_mm > extent_mm[0] + 1e-9 or l_mm + roi_size_mm > extent_mm[1] + 1e-9:
            raise ValueError(f"ROI at ({a_mm}, {l_mm}) mm lies outside the image")
        a0 = min(int(round(a_mm / pa)), h - size_a)
        l0 = min(int(round(l_mm / pl)), w - size_l)
        total[a0 : a0 + size_a, l0 : l0 + size_l] += s
        count[a0 : a0 + size_a, l0 : l0 + size_l] += 1
    return np.divide(total, count, out=np.zeros_like(total), where=count > 0)


def write_relevance_csv(path, positions, benign, cancer) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["roi_index", "axial_mm", "lateral_mm", "benign_score", "cancer_score"])
        for i, ((a, l), b, c) in enumerate(zip(positions, benign, cancer)):
            w.writerow([i, f"{a:.6f}", f"{l:.6f}", repr(float(b)), repr(float(c))])


def save_heatmap_png(path, heatmap: np.ndarray) -> None:
    """8-bit grayscale, scaled so the map's maximum is 255 (all-zero maps stay black)."""
    from PIL import Image

    peak = heatmap.max()
    img = np.zeros(heatmap.shape, np.uint8) if peak <= 0 else np.round(255 * np.clip(heatmap, 0, None) / peak).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img).save(path)
