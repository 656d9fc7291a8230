"""RF frame -> bag of normalized ROIs.

Windows are laid out on a regular grid in millimetres and snapped to the
pixel raster. Grid order is lateral-major: the outer loop runs over lateral
positions, the inner loop over axial positions. Downstream positional
embeddings depend on this order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable

import numpy as np


class AlignmentError(ValueError):
    """Mask raster does not match the RF image raster."""


class EmptyBagError(ValueError):
    """No window passed the overlap threshold."""


@dataclass(frozen=True)
class RFImage:
    samples: np.ndarray  # (axial, lateral)
    depth_mm: float
    width_mm: float
    core_id: Hashable = None

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim != 2 or s.shape[0] < 2 or s.shape[1] < 2:
            raise ValueError(f"samples must be 2D with at least 2x2 pixels, got {s.shape}")
        if not (self.depth_mm > 0 and self.width_mm > 0):
            raise ValueError("physical extents must be positive")
        if not np.all(np.isfinite(s)):
            raise ValueError("samples contain non-finite values")

    @property
    def shape(self) -> tuple[int, int]:
        return self.samples.shape

    @property
    def pitch_mm(self) -> tuple[float, float]:
        """(axial, lateral) pixel pitch."""
        return self.depth_mm / self.shape[0], self.width_mm / self.shape[1]


@dataclass(frozen=True)
class NeedleMask:
    mask: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mask", np.asarray(self.mask, dtype=bool))


@dataclass(frozen=True)
class ROISpec:
    roi_size_mm: float = 5.0
    stride_mm: float = 1.0
    overlap_threshold: float = 0.66
    output_size_px: tuple[int, int] = (256, 256)

    def __post_init__(self):
        if not 0 < self.stride_mm <= self.roi_size_mm:
            raise ValueError("need 0 < stride_mm <= roi_size_mm")
        if not 0 < self.overlap_threshold <= 1:
            raise ValueError("overlap_threshold must lie in (0, 1]")
        object.__setattr__(self, "output_size_px", tuple(int(v) for v in self.output_size_px))


@dataclass
class ROIBag:
    rois: list[np.ndarray]
    positions: list[tuple[float, float]]  # (axial_mm, lateral_mm) top-left anchors
    core_id: Hashable = None
    grid_index: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        if len(self.rois) != len(self.positions):
            raise ValueError("rois and positions differ in length")

    def __len__(self) -> int:
        return len(self.rois)

    def as_array(self) -> np.ndarray:
        return np.stack(self.rois).astype(np.float32, copy=False)


@dataclass(frozen=True)
class Window:
    """Pixel window [a0:a1, l0:l1] plus its nominal grid position."""

    a0: int
    a1: int
    l0: int
    l1: int
    axial_idx: int
    lateral_idx: int
    axial_mm: float
    lateral_mm: float

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.a0, self.a1), slice(self.l0, self.l1)


def _n_positions(extent_mm: float, spec: ROISpec) -> int:
    return max(int(np.floor((extent_mm - spec.roi_size_mm) / spec.stride_mm + 1e-9)) + 1, 0)


def grid_shape(extent_mm: tuple[float, float], spec: ROISpec) -> tuple[int, int]:
    """Number of (axial, lateral) grid positions for a frame of the given extent."""
    return _n_positions(extent_mm[0], spec), _n_positions(extent_mm[1], spec)


def _axis_windows(n_px: int, extent_mm: float, spec: ROISpec):
    pitch = extent_mm / n_px
    size = max(1, min(n_px, int(round(spec.roi_size_mm / pitch))))
    for k in range(_n_positions(extent_mm, spec)):
        start = int(round(k * spec.stride_mm / pitch))
        start = min(start, n_px - size)
        yield k, start, start + size, k * spec.stride_mm


def grid_windows(shape: tuple[int, int], depth_mm: float, width_mm: float, spec: ROISpec) -> list[Window]:
    """All windows of the stride grid in lateral-major order."""
    axial = list(_axis_windows(shape[0], depth_mm, spec))
    lateral = list(_axis_windows(shape[1], width_mm, spec))
    return [
        Window(a0, a1, l0, l1, ia, il, amm, lmm)
        for il, l0, l1, lmm in lateral
        for ia, a0, a1, amm in axial
    ]


def window_overlaps(mask: np.ndarray, windows: list[Window]) -> np.ndarray:
    """Fraction of each window's pixels that are set in ``mask``."""
    sat = np.zeros((mask.shape[0] + 1, mask.shape[1] + 1), dtype=np.int64)
    sat[1:, 1:] = np.cumsum(np.cumsum(mask, axis=0, dtype=np.int64), axis=1)
    out = np.empty(len(windows))
    for i, w in enumerate(windows):
        inside = sat[w.a1, w.l1] - sat[w.a0, w.l1] - sat[w.a1, w.l0] + sat[w.a0, w.l0]
        out[i] = inside / ((w.a1 - w.a0) * (w.l1 - w.l0))
    return out


def tile_rois(image: RFImage, mask: NeedleMask, spec: ROISpec) -> list[tuple[Window, tuple[float, float]]]:
    """Windows whose overlap with the needle mask is at least ``spec.overlap_threshold``."""
    if mask.mask.shape != image.shape:
        raise AlignmentError(f"mask {mask.mask.shape} vs image {image.shape}")
    windows = grid_windows(image.shape, image.depth_mm, image.width_mm, spec)
    if not windows:
        return []
    overlap = window_overlaps(mask.mask, windows)
    return [(w, (w.axial_mm, w.lateral_mm)) for w, o in zip(windows, overlap) if o >= spec.overlap_threshold]


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    # endpoints map to endpoints (align-corners convention)
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    if n_out == 1:
        m[0, 0] = 1.0
        return m
    x = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(x).astype(int), n_in - 2)
    frac = x - lo
    rows = np.arange(n_out)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def resize_roi(window: np.ndarray, output_size_px: tuple[int, int] = (256, 256)) -> np.ndarray:
    """Separable linear resampling to ``output_size_px`` (axial, lateral)."""
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 2 or 0 in window.shape:
        raise ValueError(f"cannot resize a degenerate window of shape {window.shape}")
    if tuple(window.shape) == tuple(output_size_px):
        return window.copy()
    ma = _interp_matrix(output_size_px[0], window.shape[0])
    ml = _interp_matrix(output_size_px[1], window.shape[1])
    return ma @ window @ ml.T


def normalize_roi(roi: np.ndarray, n_std: float = 4.0) -> np.ndarray:
    """Clamp to mean +/- n_std standard deviations, then rescale to [0, 1].

    A constant ROI (up to float round-off) maps to 0.5 everywhere.
    """
    roi = np.asarray(roi, dtype=np.float64)
    mu, sd = roi.mean(), roi.std()
    clipped = np.clip(roi, mu - n_std * sd, mu + n_std * sd)
    lo, hi = clipped.min(), clipped.max()
    if hi - lo <= 1e-10 * max(abs(hi), abs(lo)):
        return np.full_like(roi, 0.5)
    return (clipped - lo) / (hi - lo)


def build_bag(image: RFImage, mask: NeedleMask, spec: ROISpec) -> ROIBag:
    tiles = tile_rois(image, mask, spec)
    if not tiles:
        raise EmptyBagError(f"core {image.core_id!r} has no window overlapping the needle trace")
    rois, positions, grid = [], [], []
    for w, pos in tiles:
        roi = normalize_roi(resize_roi(image.samples[w.slices], spec.output_size_px))
        rois.append(roi.astype(np.float32))
        positions.append(pos)
        grid.append((w.axial_idx, w.lateral_idx))
    return ROIBag(rois=rois, positions=positions, core_id=image.core_id, grid_index=grid)
