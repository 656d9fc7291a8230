"""On-disk formats.

RF frame   ``.npz``: samples (float32, axial x lateral), depth_mm, width_mm,
           core_id, format_version
mask       ``.npz``: mask (bool, same raster), optional roi_truth, format_version
ROI bag    ``.npz``: rois (float32, n x H x W), positions (n x 2, mm),
           grid_index (n x 2), core_id, format_version; plus a sidecar
           ``<stem>_positions.csv`` with columns index, axial_mm, lateral_mm

Archives are written with a fixed zip timestamp so identical content gives
identical bytes.
"""

from __future__ import annotations

import csv
import io
import zipfile
from pathlib import Path

import numpy as np

from .preprocess import NeedleMask, RFImage, ROIBag

FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def save_npz(path: str | Path, **arrays) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, np.asarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, buf.getvalue())


def load_npz(path: str | Path) -> dict[str, np.ndarray]:
    with np.load(path, allow_pickle=False) as data:
        out = {k: data[k] for k in data.files}
    version = int(out.get("format_version", -1))
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: format_version {version}, expected {FORMAT_VERSION}")
    return out


def save_rf(path, image: RFImage) -> None:
    save_npz(
        path,
        samples=np.asarray(image.samples, dtype=np.float32),
        depth_mm=np.float64(image.depth_mm),
        width_mm=np.float64(image.width_mm),
        core_id=np.str_("" if image.core_id is None else str(image.core_id)),
        format_version=np.int64(FORMAT_VERSION),
    )


def load_rf(path) -> RFImage:
    d = load_npz(path)
    return RFImage(d["samples"], float(d["depth_mm"]), float(d["width_mm"]), str(d["core_id"]) or None)


def save_mask(path, mask: NeedleMask, roi_truth: np.ndarray | None = None) -> None:
    arrays = dict(mask=mask.mask, format_version=np.int64(FORMAT_VERSION))
    if roi_truth is not None:
        arrays["roi_truth"] = np.asarray(roi_truth, dtype=bool)
    save_npz(path, **arrays)


def load_mask(path) -> tuple[NeedleMask, np.ndarray | None]:
    d = load_npz(path)
    return NeedleMask(d["mask"]), d.get("roi_truth")


def save_bag(path, bag: ROIBag) -> None:
    path = Path(path)
    save_npz(
        path,
        rois=bag.as_array(),
        positions=np.asarray(bag.positions, dtype=np.float64).reshape(-1, 2),
        grid_index=np.asarray(bag.grid_index, dtype=np.int64).reshape(-1, 2),
        core_id=np.str_("" if bag.core_id is None else str(bag.core_id)),
        format_version=np.int64(FORMAT_VERSION),
    )
    with open(path.with_name(path.stem + "_positions.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["index", "axial_mm", "lateral_mm"])
        for i, (a, l) in enumerate(bag.positions):
            w.writerow([i, f"{a:.6f}", f"{l:.6f}"])


def load_bag(path) -> ROIBag:
    d = load_npz(path)
    return ROIBag(
        rois=list(d["rois"]),
        positions=[tuple(p) for p in d["positions"]],
        core_id=str(d["core_id"]) or None,
        grid_index=[tuple(int(v) for v in g) for g in d["grid_index"]],
    )
