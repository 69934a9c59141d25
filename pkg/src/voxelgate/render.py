"""Axial slice overlays as binary PPM images.

The FLAIR channel provides the grayscale background; segmentation classes
paint fixed colors on top (necrosis blue, edema goldenrod, enhancing
green). When both ground truth and prediction exist they render
side by side, truth on the left.
"""

from pathlib import Path

import numpy as np

from .errors import BadContainer, ShapeMismatch, SliceOutOfRange

CLASS_COLORS = {
    1: (0, 0, 255),      # necrosis
    2: (218, 165, 32),   # edema (invaded tissue)
    3: (0, 128, 0),      # enhancing tumor
}


def overlay_slice(gray: np.ndarray, labels=None) -> np.ndarray:
    """Grayscale [0,1] slice plus optional label overlay -> (L, W, 3) uint8."""
    if gray.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D slice, got shape {gray.shape}")
    base = np.clip(np.rint(gray * 255.0), 0, 255).astype(np.uint8)
    rgb = np.repeat(base[:, :, None], 3, axis=2)
    if labels is not None:
        if labels.shape != gray.shape:
            raise ShapeMismatch(f"labels {labels.shape} != slice {gray.shape}")
        for cls, color in CLASS_COLORS.items():
            rgb[labels == cls] = color
    return rgb


def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary PPM (P6), maxval 255."""
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ShapeMismatch(f"expected (H, W, 3) uint8, got {rgb.shape} {rgb.dtype}")
    h, w = rgb.shape[:2]
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + rgb.tobytes(order="C"))


def read_ppm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6":
        raise BadContainer(f"{path}: not a binary PPM")
    w, h = (int(v) for v in parts[1].split())
    if parts[2] != b"255":
        raise BadContainer(f"{path}: unsupported maxval {parts[2]!r}")
    data = np.frombuffer(parts[3][: w * h * 3], dtype=np.uint8)
    if data.size < w * h * 3:
        raise BadContainer(f"{path}: truncated pixel data")
    return data.reshape(h, w, 3).copy()


def render_case_slice(image: np.ndarray, slice_index: int,
                      truth=None, pred=None) -> np.ndarray:
    """Compose one axial slice: [truth |] prediction (or plain background).

    ``image`` is the preprocessed (3, L, W, S) stack; the slice index runs
    along the last axis.
    """
    n_slices = image.shape[3]
    if not 0 <= slice_index < n_slices:
        raise SliceOutOfRange(f"slice {slice_index} outside 0..{n_slices - 1}")
    gray = image[0, :, :, slice_index]
    panels = []
    if truth is not None:
        panels.append(overlay_slice(gray, truth[:, :, slice_index]))
    if pred is not None:
        panels.append(overlay_slice(gray, pred[:, :, slice_index]))
    if not panels:
        panels.append(overlay_slice(gray))
    return panels[0] if len(panels) == 1 else np.concatenate(panels, axis=1)
