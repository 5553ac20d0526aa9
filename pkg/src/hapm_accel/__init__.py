"""Model of a systolic-array CNN accelerator with hardware-aware group pruning."""
from .config import AccelConfig, LayerGeometry
from .tensor_core import ACT_FMT, WEIGHT_FMT, FixedPointFormat, Tensor3, Tensor4

__all__ = ["AccelConfig", "LayerGeometry", "FixedPointFormat", "Tensor3", "Tensor4", "ACT_FMT", "WEIGHT_FMT"]
__version__ = "0.1.0"
