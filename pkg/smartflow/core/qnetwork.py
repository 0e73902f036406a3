"""Numpy multi-layer perceptron used as the Q-function approximator.

Weights are float64 ``(fan_in, fan_out)`` matrices; hidden layers use ReLU,
the output layer is linear. Everything is deterministic for a fixed seed.
"""
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from smartflow.core.exceptions import CheckpointError, ContractViolation

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
CHECKPOINT_KIND = "smartflow.qnetwork"


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_grad(z: np.ndarray) -> np.ndarray:
    return (z > 0.0).astype(np.float64)


class QNetwork:
    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]):
        if len(weights) != len(biases) or not weights:
            raise ContractViolation("a network needs matching, non-empty weight and bias lists")
        for idx, (weight, bias) in enumerate(zip(weights, biases)):
            if weight.ndim != 2 or bias.shape != (weight.shape[1],):
                raise ContractViolation(f"layer {idx}: bias shape {bias.shape} does not fit weight {weight.shape}")
            if idx and weights[idx - 1].shape[1] != weight.shape[0]:
                raise ContractViolation(f"layer {idx}: input size {weight.shape[0]} does not chain")
        self.weights = [np.array(weight, dtype=np.float64) for weight in weights]
        self.biases = [np.array(bias, dtype=np.float64) for bias in biases]

    @classmethod
    def initialize(
        cls, input_size: int, output_size: int, hidden_sizes: Sequence[int], seed: int
    ) -> "QNetwork":
        """Uniform fan-in initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
        rng = np.random.default_rng(seed)
        sizes = [input_size, *hidden_sizes, output_size]
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(weights, biases)

    @classmethod
    def zeros_like(cls, other: "QNetwork") -> "QNetwork":
        return cls([np.zeros_like(w) for w in other.weights], [np.zeros_like(b) for b in other.biases])

    @property
    def input_size(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_size(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def layer_shapes(self) -> List[Tuple[int, int]]:
        return [tuple(weight.shape) for weight in self.weights]

    def parameters(self) -> List[np.ndarray]:
        """Weights and biases interleaved; gradients come back in the same order."""
        params = []
        for weight, bias in zip(self.weights, self.biases):
            params.extend([weight, bias])
        return params

    def copy(self) -> "QNetwork":
        return QNetwork([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(param)) for param in self.parameters())

    def _forward_cache(self, x: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray], List[np.ndarray]]:
        activations = [x]
        pre_activations = []
        out = x
        last = len(self.weights) - 1
        for idx, (weight, bias) in enumerate(zip(self.weights, self.biases)):
            z = out @ weight + bias
            pre_activations.append(z)
            out = z if idx == last else relu(z)
            activations.append(out)
        return out, activations, pre_activations

    def forward(self, state_vec: np.ndarray) -> np.ndarray:
        """Q-values for one observation ``(input_size,)`` or a batch ``(B, input_size)``."""
        x = np.asarray(state_vec, dtype=np.float64)
        if x.shape[-1] != self.input_size or x.ndim not in (1, 2):
            raise ContractViolation(f"expected input of size {self.input_size}, got shape {x.shape}")
        out, _, _ = self._forward_cache(x)
        return out

    def td_loss_and_grads(
        self, states: np.ndarray, actions: np.ndarray, targets: np.ndarray
    ) -> Tuple[float, List[np.ndarray]]:
        """Mean squared error between Q(s_k, a_k) and y_k, plus its gradients.

        Returns:
          loss, gradients ordered like ``parameters()``
        """
        states = np.asarray(states, dtype=np.float64)
        if states.ndim != 2 or states.shape[1] != self.input_size:
            raise ContractViolation(f"expected a batch of size-{self.input_size} inputs, got {states.shape}")
        batch = states.shape[0]
        rows = np.arange(batch)
        q_values, activations, pre_activations = self._forward_cache(states)
        errors = q_values[rows, actions] - targets
        loss = float(np.mean(errors ** 2))

        delta = np.zeros_like(q_values)
        delta[rows, actions] = 2.0 * errors / batch
        grads: List[np.ndarray] = []
        for idx in range(len(self.weights) - 1, -1, -1):
            grad_w = activations[idx].T @ delta
            grad_b = delta.sum(axis=0)
            grads[:0] = [grad_w, grad_b]
            if idx:
                delta = (delta @ self.weights[idx].T) * relu_grad(pre_activations[idx - 1])
        return loss, grads

    def to_dict(self) -> Dict[str, Any]:
        return {
            "layer_shapes": [list(shape) for shape in self.layer_shapes],
            "weights": [weight.tolist() for weight in self.weights],
            "biases": [bias.tolist() for bias in self.biases],
        }


class Adam:
    """Adaptive moment estimation with the usual defaults."""

    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if learning_rate <= 0:
            raise ContractViolation("learning_rate must be positive")
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: Optional[List[np.ndarray]] = None
        self._v: Optional[List[np.ndarray]] = None

    def step(self, params: List[np.ndarray], grads: List[np.ndarray]):
        if self._m is None:
            self._m = [np.zeros_like(param) for param in params]
            self._v = [np.zeros_like(param) for param in params]
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for param, grad, m, v in zip(params, grads, self._m, self._v):
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            param -= self.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + self.eps)


class SGD:
    def __init__(self, learning_rate: float):
        if learning_rate <= 0:
            raise ContractViolation("learning_rate must be positive")
        self.learning_rate = learning_rate

    def step(self, params: List[np.ndarray], grads: List[np.ndarray]):
        for param, grad in zip(params, grads):
            param -= self.learning_rate * grad


def save_checkpoint(
    net: QNetwork,
    path: Union[Path, str],
    config: Optional[Dict[str, Any]] = None,
    station_ids: Optional[List[str]] = None,
):
    """Writes a self-describing JSON checkpoint (format version, shapes, weights, config echo).

    Floats are written with ``repr`` precision, so loading reproduces them bit for bit.
    """
    document = {
        "kind": CHECKPOINT_KIND,
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "n_stations": net.input_size - 1,
        "station_ids": station_ids,
        "config": config or {},
        **net.to_dict(),
    }
    with open(path, "w", encoding="utf-8") as file:
        json.dump(document, file, sort_keys=True)
        file.write("\n")
    logger.info("Checkpoint saved to %s", path)


def load_checkpoint(path: Union[Path, str], expected_stations: Optional[int] = None) -> QNetwork:
    """Reads a checkpoint written by ``save_checkpoint``.

    Args:
      path: checkpoint file
      expected_stations: when given, the network must take N+1 inputs and emit N*(N-1) outputs

    Raises:
      CheckpointError: unreadable/corrupt file, unknown version, or shape mismatch
    """
    try:
        with open(path, "r", encoding="utf-8") as file:
            document = json.load(file)
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint '{path}': {exc}") from exc

    if not isinstance(document, dict) or document.get("kind") != CHECKPOINT_KIND:
        raise CheckpointError(f"'{path}' is not a network checkpoint")
    if document.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {document.get('format_version')!r} is not supported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    try:
        weights = [np.array(w, dtype=np.float64) for w in document["weights"]]
        biases = [np.array(b, dtype=np.float64) for b in document["biases"]]
        shapes = [tuple(shape) for shape in document["layer_shapes"]]
        net = QNetwork(weights, biases)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint '{path}' is corrupt: {exc}") from exc
    if net.layer_shapes != shapes:
        raise CheckpointError(f"checkpoint '{path}' declares shapes {shapes} but holds {net.layer_shapes}")

    if expected_stations is not None:
        want_in, want_out = expected_stations + 1, expected_stations * (expected_stations - 1)
        if (net.input_size, net.output_size) != (want_in, want_out):
            raise CheckpointError(
                f"checkpoint was trained for {net.input_size - 1} stations, "
                f"the current network has {expected_stations}"
            )
    return net
