"""Multi-hypothesis transformer for lifting 2D pose sequences to 3D, written on a small numpy autodiff core."""

__version__ = "0.1.0"
