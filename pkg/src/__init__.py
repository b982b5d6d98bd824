"""videodepth-toy: video depth estimation with camera-pose embedding, on a numpy autodiff engine."""

__version__ = "0.1.0"
