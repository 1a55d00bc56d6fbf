"""Dense network data: parameters, forward tapes and optimizer state."""
import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class Activation(enum.Enum):
    """Activation applied after a layer."""

    RELU = "relu"
    IDENTITY = "identity"


@dataclass
class MlpParams:
    """Weights stored (in, out) per layer so that y = x @ W + b."""

    widths: tuple
    weights: list
    biases: list
    activations: tuple

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def dtype(self) -> np.dtype:
        return self.weights[0].dtype

    def named_arrays(self, prefix: str = "") -> dict:
        """Name -> array references, in layer order."""
        arrays = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            arrays[f"{prefix}w{i}"] = w
            arrays[f"{prefix}b{i}"] = b
        return arrays

    def copy(self) -> "MlpParams":
        return MlpParams(
            widths=tuple(self.widths),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            activations=tuple(self.activations),
        )

    def zeros_like(self) -> "MlpParams":
        return MlpParams(
            widths=tuple(self.widths),
            weights=[np.zeros_like(w) for w in self.weights],
            biases=[np.zeros_like(b) for b in self.biases],
            activations=tuple(self.activations),
        )

    def __repr__(self):
        return f"<MlpParams {'-'.join(str(w) for w in self.widths)}>"


@dataclass
class GradientTape:
    """Everything backward needs from one forward call."""

    widths: tuple
    inputs: np.ndarray
    pre_activations: list
    activations: list

    @property
    def batch_size(self) -> int:
        return self.inputs.shape[0]


@dataclass
class OptimState:
    """Adaptive-moment accumulators keyed by parameter name."""

    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.99
    epsilon: float = 1e-15
    step: int = 0
    first_moments: dict = field(default_factory=dict)
    second_moments: dict = field(default_factory=dict)
    rejected_steps: int = 0
    last_diagnostics: Optional[dict] = None

    def __repr__(self):
        return f"<OptimState step={self.step} lr={self.lr:.2e} tensors={len(self.first_moments)}>"
