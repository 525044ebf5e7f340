"""
Decoder

Anchor-point object queries refined by global cross-attention over the
sampled tokens, with per-layer 3D box and class predictions.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ContractViolation
from .numeric_kernel import (
    Mlp2,
    LinearLayer,
    identity_linear,
    init_linear,
    init_mlp2,
    layer_norm,
    linear_forward,
    mlp2_forward,
    softmax_rows,
    zero_linear,
)

LOG_SIZE_LIMIT = 20.0

#=============================================================================
# TYPES
#=============================================================================

@dataclass(frozen=True)
class AnchorQuerySet:
    """Learnable 3D reference points in the unit cube with zero-initialized content."""

    anchors: np.ndarray
    content: np.ndarray
    position_mlp: Mlp2

    @property
    def count(self):
        return self.anchors.shape[0]

    @property
    def positional(self):
        return mlp2_forward(self.anchors, self.position_mlp)

    def initial_state(self):
        return self.content + self.positional


@dataclass(frozen=True)
class AttentionWeights:
    query: LinearLayer
    key: LinearLayer
    value: LinearLayer
    output: LinearLayer


@dataclass(frozen=True)
class DecoderLayerWeights:
    cross: AttentionWeights
    feed_forward: Mlp2
    self_attention: AttentionWeights = None


@dataclass(frozen=True)
class HeadWeights:
    center: LinearLayer
    size: LinearLayer
    yaw: LinearLayer
    classes: LinearLayer

    @property
    def class_count(self):
        return self.classes.out_dim


@dataclass(frozen=True)
class DecoderWeights:
    layers: tuple
    head: HeadWeights


@dataclass(frozen=True)
class DecoderOptions:
    scale_attention: bool = True
    self_attention: bool = True
    layer_norm: bool = True
    center_offset_range: float = 0.2


@dataclass(frozen=True)
class Box3DPrediction:
    center: tuple
    size: tuple
    yaw: float
    class_logits: tuple

    @property
    def label(self):
        return int(np.argmax(self.class_logits))


@dataclass
class PredictionSet:
    """Box predictions of every query after one layer, as arrays."""

    centers: np.ndarray
    sizes: np.ndarray
    yaws: np.ndarray
    class_logits: np.ndarray

    def class_probabilities(self):
        return softmax_rows(self.class_logits)

    def boxes(self):
        return [
            Box3DPrediction(
                center=tuple(float(x) for x in center),
                size=tuple(float(x) for x in size),
                yaw=float(yaw),
                class_logits=tuple(float(x) for x in logits),
            )
            for center, size, yaw, logits in zip(self.centers, self.sizes, self.yaws, self.class_logits)
        ]


@dataclass
class DecoderTrace:
    states: list = field(default_factory=list)
    attentions: list = field(default_factory=list)
    predictions: list = field(default_factory=list)

    @property
    def layer_count(self):
        return len(self.attentions)

#=============================================================================
# INITIALIZATION
#=============================================================================

def init_anchor_queries(count, d_model, seed, activation="relu"):
    """Uniform anchors in [0, 1]^3, zero content, positional embedding from an Mlp2(3 -> d -> d)."""
    if count < 1:
        raise ContractViolation(f"query count must be at least 1, got {count}")
    rng = np.random.default_rng(seed)
    anchors = rng.uniform(0.0, 1.0, size=(count, 3))
    position_mlp = init_mlp2(3, d_model, d_model, rng, activation=activation)
    return AnchorQuerySet(anchors=anchors, content=np.zeros((count, d_model)), position_mlp=position_mlp)


def init_attention_weights(d_model, rng):
    return AttentionWeights(*(init_linear(d_model, d_model, rng) for _ in range(4)))


def identity_attention_weights(d_model):
    return AttentionWeights(*(identity_linear(d_model) for _ in range(4)))


def init_decoder_weights(d_model, d_ff, layer_count, class_count, seed, activation="relu"):
    """Seeded weights for every layer and the shared prediction head."""
    rng = np.random.default_rng(seed)
    layers = []
    for _ in range(layer_count):
        layers.append(DecoderLayerWeights(
            cross=init_attention_weights(d_model, rng),
            feed_forward=init_mlp2(d_model, d_ff, d_model, rng, activation=activation),
            self_attention=init_attention_weights(d_model, rng),
        ))
    head = HeadWeights(
        center=init_linear(d_model, 3, rng),
        size=init_linear(d_model, 3, rng),
        yaw=init_linear(d_model, 2, rng),
        classes=init_linear(d_model, class_count, rng),
    )
    return DecoderWeights(layers=tuple(layers), head=head)


def identity_decoder_layer(d_model, d_ff):
    """Identity projections and a zero feed-forward block: q' = q + softmax(q k^T) v."""
    return DecoderLayerWeights(
        cross=identity_attention_weights(d_model),
        feed_forward=Mlp2(zero_linear(d_model, d_ff), zero_linear(d_ff, d_model)),
        self_attention=identity_attention_weights(d_model),
    )


def zero_head(d_model, class_count):
    return HeadWeights(
        center=zero_linear(d_model, 3),
        size=zero_linear(d_model, 3),
        yaw=zero_linear(d_model, 2),
        classes=zero_linear(d_model, class_count),
    )

#=============================================================================
# ATTENTION
#=============================================================================

def attention(queries, keys, values, weights, scale=True, key_mask=None):
    """
    Single-head scaled dot-product attention.

    Returns:
        tuple: (attention matrix (n_q, n_k), attended values (n_q, d))
    """
    q = linear_forward(queries, weights.query)
    k = linear_forward(keys, weights.key)
    v = linear_forward(values, weights.value)
    logits = q @ k.T
    if scale:
        logits = logits / math.sqrt(q.shape[1])
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        if key_mask.shape != (k.shape[0],):
            raise ContractViolation(f"key mask needs {k.shape[0]} entries, got shape {key_mask.shape}")
        logits = np.where(key_mask[None, :], logits, -np.inf)
    weights_matrix = softmax_rows(logits)
    return weights_matrix, weights_matrix @ v


def cross_attention_layer(queries, keys, values, layer, scale=True, key_mask=None, normalize=False):
    """
    One decoder update: attention over tokens, residual add, feed-forward with residual.

    Args:
        queries: (n_q, d) query states
        keys, values: (n_tokens, d)
        layer: DecoderLayerWeights
        scale: divide logits by sqrt(d)
        key_mask: optional boolean mask; False columns get -inf logits
        normalize: apply parameter-free layer norm after each residual

    Returns:
        tuple: (updated queries, attention matrix, attended values)
    """
    queries = np.asarray(queries, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if keys.shape[0] == 0:
        raise ContractViolation("cross-attention needs at least one token")
    if keys.shape != values.shape:
        raise ContractViolation(f"keys {keys.shape} and values {values.shape} differ in shape")
    if queries.shape[1] != keys.shape[1]:
        raise ContractViolation(f"query width {queries.shape[1]} does not match key width {keys.shape[1]}")

    attention_matrix, attended = attention(queries, keys, values, layer.cross, scale, key_mask)
    updated = queries + linear_forward(attended, layer.cross.output)
    if normalize:
        updated = layer_norm(updated)
    updated = updated + mlp2_forward(updated, layer.feed_forward)
    if normalize:
        updated = layer_norm(updated)
    return updated, attention_matrix, attended


def self_attention_block(queries, layer, scale=True, normalize=False):
    _, attended = attention(queries, queries, queries, layer.self_attention, scale)
    updated = queries + linear_forward(attended, layer.self_attention.output)
    if normalize:
        updated = layer_norm(updated)
    return updated

#=============================================================================
# PREDICTION
#=============================================================================

def predict_boxes(states, anchors, head, roi, center_offset_range=0.2):
    """
    Map query states to 3D boxes.

    center = denormalize(anchor + (sigmoid(raw) - 0.5) * center_offset_range)
    size = exp(raw) with raw clipped to +-20
    yaw = atan2(sin, cos), folded into (-pi, pi]
    """
    raw_center = linear_forward(states, head.center)
    normalized_center = anchors + (expit(raw_center) - 0.5) * center_offset_range
    centers = roi.denormalize(normalized_center)
    sizes = np.exp(np.clip(linear_forward(states, head.size), -LOG_SIZE_LIMIT, LOG_SIZE_LIMIT))
    raw_yaw = linear_forward(states, head.yaw)
    yaws = np.arctan2(raw_yaw[:, 0], raw_yaw[:, 1])
    yaws = np.where(yaws <= -math.pi, math.pi, yaws)
    return PredictionSet(
        centers=centers,
        sizes=sizes,
        yaws=yaws,
        class_logits=linear_forward(states, head.classes),
    )


def decode(queries, keys, values, weights, roi, options=None, key_mask=None):
    """
    Run every decoder layer and predict boxes after each.

    Args:
        queries: AnchorQuerySet
        keys, values: (n_tokens, d) sampled token keys and values
        weights: DecoderWeights (layer count L = len(weights.layers))
        roi: Roi3D used to de-normalize anchor-relative centers
        options: DecoderOptions
        key_mask: optional boolean keep-mask over tokens

    Returns:
        DecoderTrace
    """
    options = options or DecoderOptions()
    if len(weights.layers) < 1:
        raise ContractViolation("decoder needs at least one layer")
    state = queries.initial_state()
    trace = DecoderTrace()
    for layer in weights.layers:
        if options.self_attention:
            if layer.self_attention is None:
                raise ContractViolation("self-attention enabled but layer has no self-attention weights")
            state = self_attention_block(state, layer, options.scale_attention, options.layer_norm)
        state, attention_matrix, _ = cross_attention_layer(
            state, keys, values, layer,
            scale=options.scale_attention,
            key_mask=key_mask,
            normalize=options.layer_norm,
        )
        trace.states.append(state)
        trace.attentions.append(attention_matrix)
        trace.predictions.append(
            predict_boxes(state, queries.anchors, weights.head, roi, options.center_offset_range)
        )
    return trace
