"""Semi-supervised 3D segmentation with rectified pseudo supervision and voxel contrast."""

__version__ = "0.1.0"
