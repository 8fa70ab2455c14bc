"""Attention with self-adaptive control of its softmax temperature.

At every decoding step a scalar temperature is produced from the previous
context vector and the current decoder state::

    exponent    = tanh(ctx_weight . prev_context + state_weight . state)
    temperature = bound ** exponent

Because tanh maps into (-1, 1), the temperature always lies strictly inside
(1/bound, bound). Dividing the attention logits by it sharpens the
distribution (temperature < 1) or smooths it (temperature > 1), and the
whole path is differentiable, so the controller weights are learned jointly
with the rest of the model.

All operations are batched: vectors become (batch, dim) matrices and the
encoder memory is (batch, positions, dim).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

MASKED_SCORE = -1e30  # pre-softmax score for padding positions


@dataclass
class TemperatureController:
    """Learned map from (previous context, decoder state) to a temperature.

    ctx_weight is (1, context_dim), state_weight is (1, state_dim); bound
    must exceed 1 and caps the temperature range at (1/bound, bound).
    """

    ctx_weight: Tensor
    state_weight: Tensor
    bound: float = 4.0

    def __post_init__(self):
        if self.bound <= 1.0:
            raise ConfigError(f"temperature bound must exceed 1, got {self.bound}")


@dataclass
class AttentionParams:
    """Bilinear score weight, shape (state_dim, context_dim)."""

    score_weight: Tensor


@dataclass
class AttentionStep:
    """One step of attention: weights over source positions plus bookkeeping."""

    weights: Tensor      # (batch, positions), rows sum to 1
    temperature: Tensor  # (batch, 1), strictly inside (1/bound, bound)
    exponent: Tensor     # (batch, 1), strictly inside (-1, 1)
    context: Tensor      # (batch, context_dim)


def temperature_exponent(prev_context, decoder_state,
                         ctrl: TemperatureController) -> Tensor:
    """tanh of the controller affine map; one scalar per batch row."""
    prev_context = T.as_tensor(prev_context)
    decoder_state = T.as_tensor(decoder_state)
    if prev_context.shape[1] != ctrl.ctx_weight.shape[1]:
        raise ShapeError(f"context dim {prev_context.shape[1]} vs "
                         f"controller {ctrl.ctx_weight.shape}")
    if decoder_state.shape[1] != ctrl.state_weight.shape[1]:
        raise ShapeError(f"state dim {decoder_state.shape[1]} vs "
                         f"controller {ctrl.state_weight.shape}")
    pre = T.add(T.linear(prev_context, ctrl.ctx_weight),
                T.linear(decoder_state, ctrl.state_weight))
    return T.tanh(pre)


def temperature_from_exponent(exponent, bound: float) -> Tensor:
    """bound ** exponent, computed as exp(exponent * ln(bound))."""
    if bound <= 1.0:
        raise ConfigError(f"temperature bound must exceed 1, got {bound}")
    return T.exp(T.scale(exponent, math.log(bound)))


def attention_scores(decoder_state, encoder_states,
                     params: AttentionParams, mask=None) -> Tensor:
    """Bilinear scores state . W . memory_i, with masked positions sunk to -1e30."""
    decoder_state = T.as_tensor(decoder_state)
    encoder_states = T.as_tensor(encoder_states)
    proj = T.matmul(decoder_state, params.score_weight)  # (batch, context_dim)
    scores = T.rows_dot(encoder_states, proj)            # (batch, positions)
    if mask is not None:
        mask = np.asarray(mask, dtype=scores.data.dtype)
        if not mask.any(axis=1).all():
            raise ValueError("attention needs at least one unmasked position per row")
        scores = T.add(T.mul(scores, mask), (1.0 - mask) * MASKED_SCORE)
    return scores


def attend(decoder_state, encoder_states, prev_context, mask,
           ctrl: TemperatureController, params: AttentionParams,
           fixed_temperature: float | None = None) -> AttentionStep:
    """Full attention step: controller, temperature, weights, context.

    With ``fixed_temperature`` set the controller is bypassed and the given
    constant is used instead (the ablation used by the temperature sweep);
    the reported exponent is then log_bound(temperature).
    """
    scores = attention_scores(decoder_state, encoder_states, params, mask)
    batch = scores.shape[0]
    if fixed_temperature is None:
        exponent = temperature_exponent(prev_context, decoder_state, ctrl)
        temperature = temperature_from_exponent(exponent, ctrl.bound)
    else:
        if fixed_temperature <= 0:
            raise ConfigError(f"fixed temperature must be positive, got {fixed_temperature}")
        exponent = T.as_tensor(np.full((batch, 1), math.log(fixed_temperature, ctrl.bound)))
        temperature = T.as_tensor(np.full((batch, 1), float(fixed_temperature)))
    weights = T.softmax_with_temperature(scores, temperature)
    context = T.rows_mix(weights, encoder_states)
    return AttentionStep(weights=weights, temperature=temperature,
                         exponent=exponent, context=context)
