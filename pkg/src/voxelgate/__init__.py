"""voxelgate: 3D attention U-Net toolkit for volumetric brain tumor segmentation."""

__version__ = "0.1.0"

from .tensor import Tensor  # noqa: F401
