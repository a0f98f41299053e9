"""Pyramid axial-transformer segmentation network on a small numpy autodiff core."""

from .model import PMTrans, PMTransConfig, build_pmtrans
from .tensor import ConfigError, ContractError, ShapeError, Tensor

__all__ = ["PMTrans", "PMTransConfig", "build_pmtrans", "Tensor", "ConfigError", "ContractError", "ShapeError"]
__version__ = "0.1.0"
