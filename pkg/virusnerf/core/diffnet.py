"""Dense MLP with explicit reverse-mode gradients and an Adam-style optimizer."""
import logging
import math
from typing import Sequence

import numpy as np

from virusnerf.core.utils import (
    InvalidArgumentError,
    NonFiniteGradientError,
    count_nonfinite,
)
from virusnerf.models.network import Activation, GradientTape, MlpParams, OptimState

logger = logging.getLogger(__name__)

# Uniform init bound of every weight and bias
INIT_BOUND = 1.0 / math.sqrt(32.0)


def mlp_init(
    widths: Sequence[int],
    seed: int,
    dtype=np.float32,
    output_activation: Activation = Activation.IDENTITY,
) -> MlpParams:
    """
    Create an MLP with rectified-linear hidden layers.

    Args:
        widths: Layer sizes, input first
        seed: Generator seed
        dtype: Parameter dtype (float32 for training, float64 for checks)
        output_activation: Activation of the last layer

    Returns:
        MlpParams with every entry uniform in [-1/sqrt(32), 1/sqrt(32)]
    """
    widths = tuple(int(w) for w in widths)
    if len(widths) < 2 or any(w <= 0 for w in widths):
        raise InvalidArgumentError(f"widths must have >= 2 positive entries, got {widths}")

    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for n_in, n_out in zip(widths[:-1], widths[1:]):
        weights.append(rng.uniform(-INIT_BOUND, INIT_BOUND, size=(n_in, n_out)).astype(dtype))
        biases.append(rng.uniform(-INIT_BOUND, INIT_BOUND, size=n_out).astype(dtype))

    activations = tuple([Activation.RELU] * (len(widths) - 2) + [output_activation])
    return MlpParams(widths=widths, weights=weights, biases=biases, activations=activations)


def mlp_forward(params: MlpParams, inputs: np.ndarray) -> tuple[np.ndarray, GradientTape]:
    """Run a batch (B, widths[0]) through the network."""
    inputs = np.asarray(inputs)
    if inputs.ndim != 2 or inputs.shape[1] != params.widths[0]:
        raise InvalidArgumentError(
            f"input width mismatch: expected (B, {params.widths[0]}), got {inputs.shape}"
        )

    pre_activations, activations = [], []
    x = inputs
    for w, b, act in zip(params.weights, params.biases, params.activations):
        z = x @ w + b
        x = np.maximum(z, 0) if act is Activation.RELU else z
        pre_activations.append(z)
        activations.append(x)

    tape = GradientTape(
        widths=tuple(params.widths),
        inputs=inputs,
        pre_activations=pre_activations,
        activations=activations,
    )
    return x, tape


def mlp_backward(
    params: MlpParams, tape: GradientTape, output_grads: np.ndarray
) -> tuple[MlpParams, np.ndarray]:
    """
    Back-propagate dL/doutputs through a recorded forward pass.

    Returns:
        (parameter gradients shaped like params, dL/dinputs)
    """
    if tuple(tape.widths) != tuple(params.widths):
        raise InvalidArgumentError(
            f"tape widths {tape.widths} do not match params {params.widths}"
        )
    output_grads = np.asarray(output_grads)
    if output_grads.shape != tape.activations[-1].shape:
        raise InvalidArgumentError(
            f"output_grads shape {output_grads.shape} != outputs {tape.activations[-1].shape}"
        )

    grads = params.zeros_like()
    delta = output_grads
    for layer in reversed(range(params.depth)):
        if params.activations[layer] is Activation.RELU:
            delta = delta * (tape.pre_activations[layer] > 0)
        layer_input = tape.inputs if layer == 0 else tape.activations[layer - 1]
        grads.weights[layer] = (layer_input.T @ delta).astype(params.weights[layer].dtype, copy=False)
        grads.biases[layer] = delta.sum(axis=0).astype(params.biases[layer].dtype, copy=False)
        delta = delta @ params.weights[layer].T

    return grads, delta


def learning_rate_at(step: int, total_steps: int, lr_start: float, lr_end: float) -> float:
    """Exponential decay from lr_start at step 0 to lr_end at total_steps."""
    if total_steps <= 0:
        return lr_start
    fraction = min(max(step / total_steps, 0.0), 1.0)
    return lr_start * (lr_end / lr_start) ** fraction


def optim_step(state: OptimState, params: dict, grads: dict) -> OptimState:
    """
    Apply one adaptive-moment update in place.

    Args:
        state: Optimizer state; moments are created lazily per name
        params: Name -> parameter array (updated in place)
        grads: Name -> gradient array, same keys and shapes

    Raises:
        NonFiniteGradientError: when any gradient has NaN/inf; nothing is updated
    """
    missing = set(params) ^ set(grads)
    if missing:
        raise InvalidArgumentError(f"params/grads keys differ: {sorted(missing)}")
    for name in params:
        if params[name].shape != np.shape(grads[name]):
            raise InvalidArgumentError(
                f"{name}: grad shape {np.shape(grads[name])} != param {params[name].shape}"
            )

    bad = count_nonfinite((name, np.asarray(g)) for name, g in grads.items())
    if bad:
        state.rejected_steps += 1
        state.last_diagnostics = bad
        logger.warning("Rejected optimizer step", extra={"nonfinite": bad, "step": state.step})
        raise NonFiniteGradientError(bad)

    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    step_size = state.lr / bc1

    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        if name not in state.first_moments:
            state.first_moments[name] = np.zeros_like(p)
            state.second_moments[name] = np.zeros_like(p)
        m = state.first_moments[name]
        v = state.second_moments[name]

        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)

        denom = np.sqrt(v / bc2) + state.epsilon
        p -= (step_size * m / denom).astype(p.dtype, copy=False)

    return state

