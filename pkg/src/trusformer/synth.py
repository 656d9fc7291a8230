"""Synthetic RF-like biopsy cores.

Each frame is filtered white-noise speckle: sparse scatterers convolved with
an axially oscillating pulse whose envelope width (the correlation length)
and amplitude depend on the tissue class. Cancer texture is painted over a
contiguous stretch of the needle trace whose length is the core's
involvement fraction.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .containers import FORMAT_VERSION, save_mask, save_rf
from .preprocess import NeedleMask, RFImage, ROISpec, grid_windows

log = logging.getLogger(__name__)

BENIGN, CANCER = "benign", "cancer"

MANIFEST_FIELDS = [
    "core_id",
    "patient_id",
    "center_id",
    "label",
    "involvement",
    "gleason_surrogate",
    "image_path",
    "mask_path",
]


@dataclass(frozen=True)
class TextureParams:
    density: float  # scatterers per pixel
    amplitude: float
    corr_length_mm: float  # axial pulse envelope width


@dataclass(frozen=True)
class NeedleBand:
    angle_deg: float = -15.0  # 0 = lateral axis, negative climbs toward the transducer
    width_mm: float = 6.0
    anchor_mm: tuple[float, float] = (19.0, 14.0)  # (axial, lateral) needle entry point
    length_mm: float = 15.0


@dataclass(frozen=True)
class PhantomConfig:
    image_size_px: tuple[int, int] = (280, 230)
    extent_mm: tuple[float, float] = (28.0, 46.0)
    benign_texture: TextureParams = TextureParams(0.35, 1.0, 0.25)
    cancer_texture: TextureParams = TextureParams(0.15, 1.5, 0.45)
    needle_band: NeedleBand = field(default_factory=NeedleBand)
    needle_jitter_mm: float = 1.0
    # per-core tissue shift: correlation length and scatterer density of both
    # textures move along the benign -> cancer direction by a uniform amount in
    # +-core_variation, measured in units of the (log) class gap
    core_variation: float = 0.0
    end_margin_mm: float = 1.5
    wavelength_mm: float = 0.5
    lateral_psf_mm: float = 0.3
    noise_level: float = 0.1
    n_centers: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.benign_texture == self.cancer_texture:
            raise ValueError("benign and cancer textures must differ")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")


@dataclass
class SyntheticCore:
    image: RFImage
    mask: NeedleMask
    label: str
    involvement: float
    gleason_surrogate: int
    roi_truth: np.ndarray  # (n_axial_grid, n_lateral_grid) bool
    cancer_region: np.ndarray  # pixel raster


def gleason_for(label: str, involvement: float) -> int:
    """Grade surrogate: 6 for benign, 7..10 rising with involvement."""
    if label == BENIGN:
        return 6
    step = (min(max(involvement, 0.4), 1.0) - 0.4) / 0.6
    return 7 + min(int(step * 4), 3)


def _shifted(tex: TextureParams, cfg: PhantomConfig, shift: float) -> TextureParams:
    b, c = cfg.benign_texture, cfg.cancer_texture
    return TextureParams(
        density=min(1.0, tex.density * (c.density / b.density) ** shift),
        amplitude=tex.amplitude,
        corr_length_mm=tex.corr_length_mm * (c.corr_length_mm / b.corr_length_mm) ** shift,
    )


def _speckle(shape, pitch, tex: TextureParams, cfg: PhantomConfig, rng) -> np.ndarray:
    scatter = (rng.random(shape) < tex.density) * rng.standard_normal(shape)
    corr = tex.corr_length_mm
    half_a = int(np.ceil(3 * corr / pitch[0]))
    half_l = int(np.ceil(3 * cfg.lateral_psf_mm / pitch[1]))
    z = np.arange(-half_a, half_a + 1) * pitch[0]
    x = np.arange(-half_l, half_l + 1) * pitch[1]
    axial = np.cos(2 * np.pi * z / cfg.wavelength_mm) * np.exp(-0.5 * (z / corr) ** 2)
    lateral = np.exp(-0.5 * (x / cfg.lateral_psf_mm) ** 2)
    kernel = np.outer(axial, lateral)
    # unit-energy kernel: output variance is density * amplitude**2
    kernel /= np.sqrt((kernel**2).sum())
    return tex.amplitude * fftconvolve(scatter, kernel, mode="same") / np.sqrt(tex.density)


def _needle_coords(cfg: PhantomConfig, anchor):
    h, w = cfg.image_size_px
    pitch = (cfg.extent_mm[0] / h, cfg.extent_mm[1] / w)
    ax = (np.arange(h) + 0.5) * pitch[0]
    lat = (np.arange(w) + 0.5) * pitch[1]
    A, L = np.meshgrid(ax, lat, indexing="ij")
    theta = np.deg2rad(cfg.needle_band.angle_deg)
    da, dl = np.sin(theta), np.cos(theta)
    along = (A - anchor[0]) * da + (L - anchor[1]) * dl
    across = -(A - anchor[0]) * dl + (L - anchor[1]) * da
    return along, across


def generate_core(
    config: PhantomConfig,
    label: str,
    involvement: float,
    rng_seed,
    core_id=None,
    roi_spec: ROISpec | None = None,
) -> SyntheticCore:
    if not 0.0 <= involvement <= 1.0:
        raise ValueError("involvement must lie in [0, 1]")
    if (label == BENIGN) != (involvement == 0.0):
        raise ValueError("involvement must be 0 exactly for benign cores")
    roi_spec = roi_spec or ROISpec()
    rng = np.random.default_rng(rng_seed)
    band = config.needle_band
    h, w = config.image_size_px
    pitch = (config.extent_mm[0] / h, config.extent_mm[1] / w)

    anchor = np.asarray(band.anchor_mm, float) + rng.uniform(-1, 1, 2) * config.needle_jitter_mm
    along, across = _needle_coords(config, anchor)
    mask = (np.abs(across) <= band.width_mm / 2) & (along >= 0) & (along <= band.length_mm)

    cancer_region = np.zeros((h, w), dtype=bool)
    if involvement > 0:
        # ROI centres cannot reach the needle ends, so involvement is measured
        # over the trace minus an end margin; a segment touching a margin
        # extends through it.
        e = config.end_margin_mm
        usable = band.length_mm - 2 * e
        seg = involvement * usable
        t0 = e + rng.uniform(0.0, usable - seg)
        lo = -np.inf if t0 <= e else t0
        hi = np.inf if t0 + seg >= band.length_mm - e else t0 + seg
        cancer_region = (
            (along >= lo)
            & (along <= hi)
            & (np.abs(across) <= band.width_mm / 2 + roi_spec.roi_size_mm)
        )

    shift = float(rng.uniform(-1, 1) * config.core_variation)
    benign = _speckle((h, w), pitch, _shifted(config.benign_texture, config, shift), config, rng)
    samples = benign
    if involvement > 0:
        cancer = _speckle((h, w), pitch, _shifted(config.cancer_texture, config, shift), config, rng)
        samples = np.where(cancer_region, cancer, benign)
    samples = samples + config.noise_level * rng.standard_normal((h, w))

    image = RFImage(samples.astype(np.float32), config.extent_mm[0], config.extent_mm[1], core_id)
    windows = grid_windows((h, w), *config.extent_mm, roi_spec)
    n_ax = max(win.axial_idx for win in windows) + 1
    n_lat = max(win.lateral_idx for win in windows) + 1
    roi_truth = np.zeros((n_ax, n_lat), dtype=bool)
    for win in windows:
        roi_truth[win.axial_idx, win.lateral_idx] = cancer_region[win.slices].mean() > 0.5

    return SyntheticCore(
        image=image,
        mask=NeedleMask(mask),
        label=label,
        involvement=float(involvement),
        gleason_surrogate=gleason_for(label, involvement),
        roi_truth=roi_truth,
        cancer_region=cancer_region,
    )


def core_seed(seed: int, index: int) -> np.random.SeedSequence:
    """Per-core RNG stream; serial and parallel generation agree."""
    return np.random.SeedSequence([seed, index])


def draw_core_label(seed: int, index: int, cancer_rate: float) -> tuple[str, float, np.random.SeedSequence]:
    label_seq, image_seq = core_seed(seed, index).spawn(2)
    rng = np.random.default_rng(label_seq)
    if rng.random() < cancer_rate:
        # involvement ~ U[0.4, 1.0]: the population left after the <=40% exclusion
        return CANCER, float(rng.uniform(0.4, 1.0)), image_seq
    return BENIGN, 0.0, image_seq


def generate_dataset(
    n_patients: int,
    cores_per_patient: int,
    cancer_rate: float,
    config: PhantomConfig,
    seed: int,
    out_dir: str | Path,
    roi_spec: ROISpec | None = None,
) -> Path:
    """Write ``cores/``, ``masks/`` and ``manifest.csv`` under ``out_dir``.

    Patients are assigned to centers round-robin.
    """
    if n_patients < 1 or cores_per_patient < 1:
        raise ValueError("counts must be >= 1")
    out_dir = Path(out_dir)
    (out_dir / "cores").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)

    rows = []
    index = 0
    for p in range(n_patients):
        patient_id = f"P{p:04d}"
        center_id = f"C{p % config.n_centers}"
        for c in range(cores_per_patient):
            core_id = f"{patient_id}_{c:02d}"
            label, inv, image_seq = draw_core_label(seed, index, cancer_rate)
            core = generate_core(config, label, inv, image_seq, core_id=core_id, roi_spec=roi_spec)
            image_path = Path("cores") / f"{core_id}.npz"
            mask_path = Path("masks") / f"{core_id}.npz"
            save_rf(out_dir / image_path, core.image)
            save_mask(out_dir / mask_path, core.mask, roi_truth=core.roi_truth)
            rows.append(
                dict(
                    core_id=core_id,
                    patient_id=patient_id,
                    center_id=center_id,
                    label=label,
                    involvement=f"{inv:.6f}",
                    gleason_surrogate=core.gleason_surrogate,
                    image_path=image_path.as_posix(),
                    mask_path=mask_path.as_posix(),
                )
            )
            index += 1
    write_manifest(out_dir / "manifest.csv", rows)
    log.info("wrote %d cores to %s", len(rows), out_dir)
    return out_dir / "manifest.csv"


def write_manifest(path: str | Path, rows: list[dict], extra_fields: tuple[str, ...] = ()) -> None:
    with open(path, "w", newline="") as f:
        f.write(f"# format_version={FORMAT_VERSION}\n")
        writer = csv.DictWriter(f, fieldnames=MANIFEST_FIELDS + list(extra_fields), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def read_manifest(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        lines = [line for line in f if not line.startswith("#")]
    rows = list(csv.DictReader(lines))
    for r in rows:
        r["involvement"] = float(r["involvement"])
        r["gleason_surrogate"] = int(r["gleason_surrogate"])
    return rows
