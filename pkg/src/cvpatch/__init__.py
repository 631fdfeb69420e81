"""Complex-valued networks for image patch matching (CCN and CTN)."""

from .ctensor import ComplexTensor
from .models import CCN, CTN, ModelConfig, build_model

__all__ = ["ComplexTensor", "ModelConfig", "CCN", "CTN", "build_model"]
__version__ = "0.1.0"
