"""Joint depth, scattering and camera-motion estimation from short hazy clips."""

__version__ = "0.1.0"
