"""Object detection with an overlapping-patch vision transformer backbone,
built on a small numpy reverse-mode autodiff engine."""

__version__ = "0.1.0"
