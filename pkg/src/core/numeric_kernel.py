"""
Numeric Kernel

Dense float64 substrate for the rest of the bench: matrix validation, row
softmax, linear layers, the 2-layer MLP used for positional and alignment
networks, seeded initialization and the central finite-difference oracle.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, ConfigurationError, NonFiniteEvaluation

DTYPE = np.float64

ACTIVATIONS = ("relu", "identity")

DEFAULT_FD_STEP = 1e-5

LAYER_NORM_EPSILON = 1e-5

#=============================================================================
# DENSE MATRICES
#=============================================================================

def as_dense_matrix(values, name="matrix", allow_neg_inf=False):
    """
    Coerce values to a finite 2-D float64 array.

    Args:
        values: array-like of shape (rows, cols)
        name: label used in error messages
        allow_neg_inf: permit -inf entries (attention masks)

    Returns:
        np.ndarray: validated copy-free view when already float64
    """
    matrix = np.asarray(values, dtype=DTYPE)
    if matrix.ndim != 2:
        raise ContractViolation(f"{name} must be 2-D, got shape {matrix.shape}")
    if allow_neg_inf:
        bad = np.isnan(matrix) | (matrix == np.inf)
    else:
        bad = ~np.isfinite(matrix)
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise ContractViolation(f"{name} has non-finite entry at ({row}, {col})")
    return matrix


def as_vector(values, name="vector"):
    """Coerce values to a finite 1-D float64 array."""
    vector = np.asarray(values, dtype=DTYPE)
    if vector.ndim != 1:
        raise ContractViolation(f"{name} must be 1-D, got shape {vector.shape}")
    if not np.all(np.isfinite(vector)):
        raise ContractViolation(f"{name} has non-finite entries")
    return vector


def softmax_rows(matrix):
    """
    Row-wise softmax stabilized by subtracting each row's maximum.

    -inf entries are treated as masked and receive zero weight. A row must keep
    at least one finite entry.
    """
    logits = as_dense_matrix(matrix, name="logits", allow_neg_inf=True)
    row_max = logits.max(axis=1, keepdims=True)
    if np.any(np.isneginf(row_max)):
        raise ContractViolation("softmax row is fully masked")
    exponentials = np.exp(logits - row_max)
    return exponentials / exponentials.sum(axis=1, keepdims=True)


def relu(values):
    return np.maximum(values, 0.0)


def layer_norm(matrix, epsilon=LAYER_NORM_EPSILON):
    """Parameter-free layer normalization over the last axis."""
    mean = matrix.mean(axis=-1, keepdims=True)
    variance = matrix.var(axis=-1, keepdims=True)
    return (matrix - mean) / np.sqrt(variance + epsilon)


def apply_activation(values, activation):
    if activation == "relu":
        return relu(values)
    if activation == "identity":
        return values
    raise ConfigurationError(f"unknown activation '{activation}'")

#=============================================================================
# LAYERS
#=============================================================================

@dataclass(frozen=True)
class LinearLayer:
    """y = W x + b with W of shape (out_dim, in_dim)."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        weight = as_dense_matrix(self.weight, name="weight")
        bias = as_vector(self.bias, name="bias")
        if bias.shape[0] != weight.shape[0]:
            raise ContractViolation(
                f"bias length {bias.shape[0]} does not match weight rows {weight.shape[0]}"
            )
        object.__setattr__(self, "weight", weight)
        object.__setattr__(self, "bias", bias)

    @property
    def in_dim(self):
        return self.weight.shape[1]

    @property
    def out_dim(self):
        return self.weight.shape[0]


@dataclass(frozen=True)
class Mlp2:
    """Two linear layers with an activation between them."""

    layer1: LinearLayer
    layer2: LinearLayer
    activation: str = "relu"

    def __post_init__(self):
        if self.layer1.out_dim != self.layer2.in_dim:
            raise ContractViolation(
                f"hidden width mismatch: layer1 emits {self.layer1.out_dim}, "
                f"layer2 expects {self.layer2.in_dim}"
            )
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation '{self.activation}'")

    @property
    def in_dim(self):
        return self.layer1.in_dim

    @property
    def hidden_dim(self):
        return self.layer1.out_dim

    @property
    def out_dim(self):
        return self.layer2.out_dim


def linear_forward(x, layer):
    """
    Apply a linear layer to a vector or to a batch of row vectors.

    Args:
        x: shape (in_dim,) or (n, in_dim)
        layer: LinearLayer

    Returns:
        np.ndarray: shape (out_dim,) or (n, out_dim)
    """
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim not in (1, 2) or x.shape[-1] != layer.in_dim:
        raise ContractViolation(
            f"linear layer expects trailing dimension {layer.in_dim}, got shape {x.shape}"
        )
    return x @ layer.weight.T + layer.bias


def mlp2_forward(x, mlp):
    """layer2(activation(layer1(x))) for a vector or a batch of row vectors."""
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[-1:] != (mlp.in_dim,):
        raise ContractViolation(f"MLP expects input dimension {mlp.in_dim}, got shape {x.shape}")
    hidden = apply_activation(linear_forward(x, mlp.layer1), mlp.activation)
    return linear_forward(hidden, mlp.layer2)

#=============================================================================
# INITIALIZATION
#=============================================================================

def init_linear(in_dim, out_dim, rng):
    """Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)] for weight and bias."""
    if in_dim < 1 or out_dim < 1:
        raise ContractViolation(f"layer dimensions must be positive, got {in_dim}->{out_dim}")
    bound = 1.0 / math.sqrt(in_dim)
    weight = rng.uniform(-bound, bound, size=(out_dim, in_dim))
    bias = rng.uniform(-bound, bound, size=out_dim)
    return LinearLayer(weight=weight, bias=bias)


def init_mlp2(in_dim, hidden_dim, out_dim, rng, activation="relu"):
    """Build a seeded Mlp2. rng is a numpy Generator, or an int seed."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    layer1 = init_linear(in_dim, hidden_dim, rng)
    layer2 = init_linear(hidden_dim, out_dim, rng)
    return Mlp2(layer1=layer1, layer2=layer2, activation=activation)


def zero_linear(in_dim, out_dim, bias_value=0.0):
    return LinearLayer(weight=np.zeros((out_dim, in_dim)), bias=np.full(out_dim, float(bias_value)))


def identity_linear(dim):
    return LinearLayer(weight=np.eye(dim), bias=np.zeros(dim))


def constant_mlp2(in_dim, hidden_dim, out_dim, value, activation="relu"):
    """An Mlp2 whose output is `value` for every input (zero weights, output bias = value)."""
    return Mlp2(
        layer1=zero_linear(in_dim, hidden_dim),
        layer2=zero_linear(hidden_dim, out_dim, bias_value=value),
        activation=activation,
    )

#=============================================================================
# GRADIENT ORACLE
#=============================================================================

def finite_diff_grad(f, x, h=DEFAULT_FD_STEP):
    """
    Central finite-difference gradient of a scalar function.

    Args:
        f: callable taking a 1-D float64 array and returning a scalar
        x: evaluation point
        h: step, must be positive

    Returns:
        np.ndarray: (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate

    Raises:
        NonFiniteEvaluation: f returned nan/inf at a shifted point
    """
    if not h > 0.0:
        raise ContractViolation(f"finite-difference step must be positive, got {h}")
    x = np.array(x, dtype=DTYPE).ravel()
    gradient = np.empty_like(x)
    for index in range(x.size):
        shifted = x.copy()
        shifted[index] = x[index] + h
        forward = float(f(shifted))
        if not math.isfinite(forward):
            raise NonFiniteEvaluation(index, forward)
        shifted[index] = x[index] - h
        backward = float(f(shifted))
        if not math.isfinite(backward):
            raise NonFiniteEvaluation(index, backward)
        gradient[index] = (forward - backward) / (2.0 * h)
    return gradient


def relative_error(analytic, numeric, floor=1.0):
    """Max |a - n| / max(floor, |n|) over all coordinates."""
    analytic = np.asarray(analytic, dtype=DTYPE)
    numeric = np.asarray(numeric, dtype=DTYPE)
    scale = np.maximum(floor, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / scale))
