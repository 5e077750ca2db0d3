"""defectscan: reconstruction-free surface-defect detection.

Train a small diffusion U-Net on normal image patches, score new images in a
single forward pass via the predicted-noise map, extract edge-energy
features, and classify with an isolation forest.
"""

__version__ = "0.1.0"

from .autodiff import GradientTape, Tensor, backward
from .errors import (ConfigurationError, ContractError, DefectscanError,
                     DimensionError, NumericsError, StateError)

__all__ = [
    "Tensor", "GradientTape", "backward",
    "DefectscanError", "ConfigurationError", "ContractError",
    "DimensionError", "NumericsError", "StateError",
    "__version__",
]
