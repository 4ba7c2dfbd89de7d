"""Continual audio-video pretraining with localized patch selection."""

from avcl.tensor import Tensor, NumericError, ShapeError, backward, no_grad

__all__ = ["Tensor", "NumericError", "ShapeError", "backward", "no_grad"]
__version__ = "0.1.0"
