"""Synthetic multi-modal phantom cases with analytically known geometry.

Stands in for license-gated clinical data: a brain ellipsoid spanning the
volume, with a nested tumor (necrotic core inside an enhancing rim inside
an edema shell) rasterized into a raw mask using the acquisition
convention (necrosis 1, edema 2, enhancing 4, background 0). Each tissue
gets a distinct mean intensity per modality plus seeded Gaussian noise,
so the full NIfTI -> preprocess -> train path can be exercised end to end.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SpecInfeasible
from .nifti import volume_from_array, write_volume
from .pipeline import MultiModalCase
from .rng import make_rng

RAW_NECROSIS, RAW_EDEMA, RAW_ENHANCING = 1, 2, 4

# per-modality mean intensity by tissue, arbitrary units
INTENSITY = {
    "flair": {"brain": 300.0, "edema": 850.0, "enhancing": 600.0, "necrosis": 450.0},
    "t1ce": {"brain": 400.0, "edema": 450.0, "enhancing": 900.0, "necrosis": 200.0},
    "t2": {"brain": 350.0, "edema": 700.0, "enhancing": 500.0, "necrosis": 900.0},
}


@dataclass(frozen=True)
class PhantomSpec:
    extent: int = 32
    brain_radius_frac: float = 0.5          # of extent; 0.5 touches all faces
    tumor_radius_frac: tuple = (0.28, 0.38)  # edema shell radius range, of extent
    tumor_center_frac: tuple = (0.40, 0.60)  # per-axis center range, of extent
    enhancing_frac: float = 0.75             # enhancing radius / tumor radius
    necrosis_frac: float = 0.45              # necrotic core radius / tumor radius
    noise_sigma: float = 12.0
    min_tumor_fraction: float = 0.01
    seed: int = 0
    intensity: dict = field(default_factory=lambda: INTENSITY)

    def validate(self):
        if self.extent < 8:
            raise SpecInfeasible(f"extent {self.extent} too small")
        r_lo, r_hi = self.tumor_radius_frac
        if not 0 < r_lo <= r_hi:
            raise SpecInfeasible(f"bad tumor radius range {self.tumor_radius_frac}")
        if r_hi >= self.brain_radius_frac:
            raise SpecInfeasible(
                f"tumor radius {r_hi * self.extent:g} voxels cannot fit inside a "
                f"brain of radius {self.brain_radius_frac * self.extent:g}")
        if not 0 < self.necrosis_frac < self.enhancing_frac < 1:
            raise SpecInfeasible(
                "sub-regions must nest: 0 < necrosis_frac < enhancing_frac < 1")
        if not 0 <= self.min_tumor_fraction < 1:
            raise SpecInfeasible(f"bad min_tumor_fraction {self.min_tumor_fraction}")
        return self


def _ellipsoid_mask(extent: int, center, radii) -> np.ndarray:
    idx = np.arange(extent, dtype=np.float64)
    zz = ((idx - center[0]) / radii[0]) ** 2
    yy = ((idx - center[1]) / radii[1]) ** 2
    xx = ((idx - center[2]) / radii[2]) ** 2
    return zz[:, None, None] + yy[None, :, None] + xx[None, None, :] <= 1.0


def rasterize_phantom(spec: PhantomSpec, rng: np.random.Generator):
    """Sample one phantom geometry; returns (raw labels, tissue masks)."""
    e = spec.extent
    c = (e - 1) / 2.0
    brain_r = spec.brain_radius_frac * e
    brain = _ellipsoid_mask(e, (c, c, c), (brain_r,) * 3)

    lo, hi = spec.tumor_radius_frac
    c_lo, c_hi = spec.tumor_center_frac
    for _ in range(64):
        r = rng.uniform(lo, hi) * e
        center = rng.uniform(c_lo, c_hi, size=3) * e
        # conservative containment test, per axis
        if all(abs(center[a] - c) + r <= brain_r for a in range(3)):
            tumor = _ellipsoid_mask(e, center, (r,) * 3)
            frac = tumor.sum() / float(e ** 3)
            if frac >= spec.min_tumor_fraction:
                break
    else:
        raise SpecInfeasible(
            f"could not place a tumor of radius {lo * e:g}..{hi * e:g} with "
            f"fraction >= {spec.min_tumor_fraction} inside the brain")

    enhancing = _ellipsoid_mask(e, center, (r * spec.enhancing_frac,) * 3)
    necrosis = _ellipsoid_mask(e, center, (r * spec.necrosis_frac,) * 3)

    labels = np.zeros((e, e, e), dtype=np.uint8)
    labels[tumor] = RAW_EDEMA
    labels[enhancing] = RAW_ENHANCING
    labels[necrosis] = RAW_NECROSIS
    masks = {
        "brain": brain & ~tumor,
        "edema": tumor & ~enhancing,
        "enhancing": enhancing & ~necrosis,
        "necrosis": necrosis,
    }
    return labels, masks


def _render_modality(spec: PhantomSpec, masks: dict, modality: str,
                     rng: np.random.Generator) -> np.ndarray:
    e = spec.extent
    vol = np.zeros((e, e, e), dtype=np.float64)
    means = spec.intensity[modality]
    for tissue, mask in masks.items():
        vol[mask] = means[tissue]
    if spec.noise_sigma > 0:
        inside = masks["brain"] | masks["edema"] | masks["enhancing"] | masks["necrosis"]
        noise = rng.normal(0.0, spec.noise_sigma, size=vol.shape)
        vol[inside] += noise[inside]
    return np.clip(vol, 0.0, None).astype(np.float32)


def generate_phantoms(spec: PhantomSpec, n: int, out_dir) -> list:
    """Write n phantom cases (three modalities + raw mask, gzipped NIfTI)."""
    spec.validate()
    out_dir = Path(out_dir)
    cases = []
    for i in range(n):
        case_id = f"phantom_{i:03d}"
        rng = make_rng(spec.seed, "phantom", i)
        labels, masks = rasterize_phantom(spec, rng)
        case_dir = out_dir / case_id
        paths = {}
        for modality in ("flair", "t1ce", "t2"):
            vol = _render_modality(spec, masks, modality, rng)
            path = case_dir / f"{case_id}_{modality}.nii.gz"
            write_volume(volume_from_array(vol, datatype_code=16), path)
            paths[modality] = path
        seg_path = case_dir / f"{case_id}_seg.nii.gz"
        write_volume(volume_from_array(labels, datatype_code=2), seg_path)
        cases.append(MultiModalCase(
            case_id=case_id,
            flair_path=paths["flair"],
            t1ce_path=paths["t1ce"],
            t2_path=paths["t2"],
            seg_path=seg_path,
        ))
    return cases
