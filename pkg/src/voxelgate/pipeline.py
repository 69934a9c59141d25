"""Multi-modal preprocessing: scaling, stacking, cropping, label remap,
near-empty-mask exclusion, and the 6:2:2 dataset split.

A case enters as three co-registered modality volumes (FLAIR, T1CE, T2)
plus an optional segmentation mask, and leaves as a [0,1]-scaled rank-4
stack cropped to its content box, persisted as VSEG1 blobs with a text
sidecar. Cases whose cropped mask covers less than 1% of the voxels are
filtered out.
"""

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import nifti, vseg
from .errors import (
    BoxOutOfRange,
    DuplicateIds,
    EmptyContent,
    NonFiniteInput,
    ShapeMismatch,
    UnexpectedLabel,
)
from .rng import make_rng

CHANNEL_ORDER = ("flair", "t1ce", "t2")
DEFAULT_REMAP = {0: 0, 1: 1, 2: 2, 4: 3}
MASK_KEEP_FRACTION = 0.01


@dataclass
class MultiModalCase:
    case_id: str
    flair_path: Path
    t1ce_path: Path
    t2_path: Path
    seg_path: Optional[Path] = None

    def modality_paths(self):
        return (self.flair_path, self.t1ce_path, self.t2_path)


@dataclass
class StackedCase:
    case_id: str
    image: np.ndarray                      # (3, L, W, S) float32 in [0, 1]
    labels: Optional[np.ndarray] = None    # (L, W, S) uint8 in {0,1,2,3}
    meta: dict = field(default_factory=dict)


@dataclass
class DatasetSplit:
    train: tuple
    validation: tuple
    test: tuple
    seed: int


def minmax_scale(volume: np.ndarray) -> np.ndarray:
    """Rescale to [0, 1]; a constant volume maps to all zeros."""
    volume = np.asarray(volume)
    if not np.all(np.isfinite(volume)):
        raise NonFiniteInput("volume contains NaN/Inf")
    lo = float(volume.min())
    hi = float(volume.max())
    out = np.asarray(volume, dtype=np.float32)
    if hi == lo:
        return np.zeros_like(out)
    return (out - np.float32(lo)) / np.float32(hi - lo)


def stack_modalities(flair: np.ndarray, t1ce: np.ndarray, t2: np.ndarray) -> np.ndarray:
    if not (flair.shape == t1ce.shape == t2.shape):
        raise ShapeMismatch(
            f"modality extents differ: {flair.shape} / {t1ce.shape} / {t2.shape}")
    return np.stack([flair, t1ce, t2], axis=0).astype(np.float32)


def content_bounding_box(image: np.ndarray, threshold: float = 0.0) -> tuple:
    """Smallest box (lo/hi per spatial axis, hi exclusive) holding every
    voxel where any channel exceeds the threshold."""
    if image.ndim != 4:
        raise ShapeMismatch(f"expected (C, L, W, S) image, got shape {image.shape}")
    occupied = (image > threshold).any(axis=0)
    if not occupied.any():
        raise EmptyContent(f"no voxel exceeds threshold {threshold}")
    box = []
    for axis in range(3):
        other = tuple(i for i in range(3) if i != axis)
        hits = np.where(occupied.any(axis=other))[0]
        box.extend((int(hits[0]), int(hits[-1]) + 1))
    return tuple(box)


def crop_case(case: StackedCase, box: tuple) -> StackedCase:
    l0, l1, w0, w1, s0, s1 = box
    extents = case.image.shape[1:]
    for lo, hi, n in ((l0, l1, extents[0]), (w0, w1, extents[1]), (s0, s1, extents[2])):
        if not (0 <= lo < hi <= n):
            raise BoxOutOfRange(f"box {box} outside extents {extents}")
    image = case.image[:, l0:l1, w0:w1, s0:s1].copy()
    labels = None
    if case.labels is not None:
        labels = case.labels[l0:l1, w0:w1, s0:s1].copy()
    meta = dict(case.meta)
    meta["crop_box"] = ",".join(str(v) for v in box)
    return StackedCase(case_id=case.case_id, image=image, labels=labels, meta=meta)


def remap_labels(raw: np.ndarray, table: dict = None) -> np.ndarray:
    """Map raw mask values onto contiguous class ids (default 0,1,2,4 -> 0..3)."""
    table = DEFAULT_REMAP if table is None else table
    raw = np.asarray(raw)
    present = np.unique(raw)
    unexpected = [int(v) for v in present if int(v) not in table]
    if unexpected:
        raise UnexpectedLabel(f"raw mask contains unexpected values {unexpected}")
    out = np.zeros(raw.shape, dtype=np.uint8)
    for src, dst in table.items():
        out[raw == src] = dst
    return out


def mask_fraction(labels: np.ndarray) -> float:
    labels = np.asarray(labels)
    return float(np.count_nonzero(labels)) / labels.size


def split_dataset(case_ids, seed: int) -> DatasetSplit:
    """Deterministic 6:2:2 split: floor(0.6n) train, floor(0.2n) validation,
    remainder test."""
    ids = list(case_ids)
    if len(set(ids)) != len(ids):
        raise DuplicateIds("case ids are not unique")
    ordered = sorted(ids)
    perm = make_rng(seed, "split").permutation(len(ordered))
    shuffled = [ordered[i] for i in perm]
    n = len(shuffled)
    n_train = int(np.floor(0.6 * n))
    n_val = int(np.floor(0.2 * n))
    return DatasetSplit(
        train=tuple(shuffled[:n_train]),
        validation=tuple(shuffled[n_train:n_train + n_val]),
        test=tuple(shuffled[n_train + n_val:]),
        seed=seed,
    )


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def preprocess_case(case: MultiModalCase, out_dir=None, remap_table: dict = None,
                    keep_fraction: float = MASK_KEEP_FRACTION) -> Optional[StackedCase]:
    """Run the full per-case pipeline; returns None for filtered-out cases.

    Steps: per-modality min-max scaling, stacking (FLAIR, T1CE, T2),
    label remapping, cropping to the image content box, then exclusion
    when the cropped mask covers less than ``keep_fraction`` of the
    voxels. With ``out_dir`` set the result is persisted as VSEG1 blobs
    plus a sidecar.
    """
    volumes = [nifti.read_volume(p) for p in case.modality_paths()]
    shapes = {v.data.shape for v in volumes}
    if len(shapes) != 1:
        raise ShapeMismatch(f"{case.case_id}: modality extents differ: "
                            + " / ".join(str(v.data.shape) for v in volumes))
    scaled = [minmax_scale(v.data) for v in volumes]
    image = stack_modalities(*scaled)

    labels = None
    if case.seg_path is not None:
        seg = nifti.read_volume(case.seg_path)
        if seg.data.shape != image.shape[1:]:
            raise ShapeMismatch(
                f"{case.case_id}: mask extents {seg.data.shape} != image {image.shape[1:]}")
        raw = np.rint(seg.data).astype(np.int64)
        labels = remap_labels(raw, remap_table)

    meta = {
        "case_id": case.case_id,
        "channels": ",".join(CHANNEL_ORDER),
        "source_checksums": ";".join(
            f"{p.name}:{_sha256(Path(p))}"
            for p in (*case.modality_paths(),
                      *( [case.seg_path] if case.seg_path else [] ))),
    }
    stacked = StackedCase(case_id=case.case_id, image=image, labels=labels, meta=meta)
    box = content_bounding_box(stacked.image)
    stacked = crop_case(stacked, box)

    if stacked.labels is not None and mask_fraction(stacked.labels) < keep_fraction:
        return None
    if out_dir is not None:
        save_stacked_case(stacked, Path(out_dir) / case.case_id)
    return stacked


def save_stacked_case(case: StackedCase, case_dir) -> None:
    case_dir = Path(case_dir)
    case_dir.mkdir(parents=True, exist_ok=True)
    vseg.save_array(case.image.astype(np.float32), case_dir / "image.vseg")
    if case.labels is not None:
        vseg.save_array(case.labels.astype(np.uint8), case_dir / "labels.vseg")
    meta = dict(case.meta)
    meta.setdefault("case_id", case.case_id)
    vseg.save_sidecar(meta, case_dir / "meta.txt")


def load_stacked_case(case_dir) -> StackedCase:
    case_dir = Path(case_dir)
    meta = vseg.load_sidecar(case_dir / "meta.txt")
    labels_path = case_dir / "labels.vseg"
    return StackedCase(
        case_id=meta.get("case_id", case_dir.name),
        image=vseg.load_array(case_dir / "image.vseg"),
        labels=vseg.load_array(labels_path) if labels_path.exists() else None,
        meta=meta,
    )


def find_cases(root) -> list:
    """Discover <case_id>/<case_id>_<modality>.nii[.gz] style case folders."""
    root = Path(root)
    cases = []
    for entry in sorted(p for p in root.iterdir() if p.is_dir()):
        found = {}
        for key in (*CHANNEL_ORDER, "seg"):
            for suffix in (".nii.gz", ".nii"):
                candidate = entry / f"{entry.name}_{key}{suffix}"
                if candidate.exists():
                    found[key] = candidate
                    break
        if all(k in found for k in CHANNEL_ORDER):
            cases.append(MultiModalCase(
                case_id=entry.name,
                flair_path=found["flair"],
                t1ce_path=found["t1ce"],
                t2_path=found["t2"],
                seg_path=found.get("seg"),
            ))
    return cases
