"""Audio-driven 3D singing-head motion: CVAE generator, data protocol, fitting and metrics."""

__version__ = "0.1.0"
