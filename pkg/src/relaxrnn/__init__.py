"""Relaxed parameter sharing for recurrent networks: shiftLSTM-K and
mixLSTM-K with baselines, a synthetic conditional-shift benchmark, and the
training, evaluation and interpretation tools around them."""

from .errors import ContractError, DataFormatError, NumericError, RelaxError
from .models import ModelSpec, ModelState, forward, init_model, load_model, save_model
from .numerics import Rng

__version__ = "0.1.0"

__all__ = [
    "ContractError", "DataFormatError", "NumericError", "RelaxError",
    "ModelSpec", "ModelState", "forward", "init_model", "load_model", "save_model",
    "Rng", "__version__",
]
