"""Learning point-to-point correspondences from cycle consistency, on a small numpy autodiff engine."""

__version__ = "0.1.0"
