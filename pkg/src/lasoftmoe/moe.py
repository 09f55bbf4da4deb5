"""Soft mixture-of-experts layers.

Tokens ``x`` (n x d) are mixed into ``e * s`` slots by column-softmaxed
dispatch weights, each group of ``s`` slots is processed by its own expert,
and slot outputs are combined back into n tokens.  Two combine rules exist:

* ``MoEVariant.SOFTMAX``: row softmax over the same logits ``x @ phi``.
* ``MoEVariant.LINEAR_ATTN``: linear attention over the logits (queries,
  keys and values all equal to the logits, feature map ``elu + 1``, no
  normalizing denominator), then a per-token standardization squashed into
  (0, 1) by a sigmoid.

All functions accept an optional leading batch axis; the token axis is always
second to last.
"""

from __future__ import annotations

import enum
import math

from .layers import FeedForward, Linear, Module, swap_last
from .tensor import DimensionError, Tensor, concat, elu, parameter, rng, sigmoid, softmax

INSTANCE_NORM_EPS = 1e-5


class ContractViolation(ValueError):
    pass


class MoEVariant(str, enum.Enum):
    SOFTMAX = "softmoe"
    LINEAR_ATTN = "la_softmoe"


def _check(x: Tensor, w: Tensor, what: str) -> None:
    if x.shape[-1] != w.shape[-2]:
        raise DimensionError(f"{what}: {x.shape} does not conform with {w.shape}")


def slot_logits(x: Tensor, phi: Tensor) -> Tensor:
    _check(x, phi, "slot_logits")
    return x @ phi


def dispatch_weights(x: Tensor, phi: Tensor) -> Tensor:
    """Softmax of ``x @ phi`` over tokens, so every slot column sums to 1."""
    return softmax(slot_logits(x, phi), axis=-2)


def mix_slots(x: Tensor, d_weights: Tensor) -> Tensor:
    """Slots ``D^T x``; each slot is a convex combination of the input tokens."""
    if x.shape[-2] != d_weights.shape[-2]:
        raise DimensionError(f"mix_slots: tokens {x.shape} vs dispatch weights {d_weights.shape}")
    return swap_last(d_weights) @ x


def apply_experts(slots: Tensor, experts) -> Tensor:
    """Run expert ``i`` on the ``i``-th contiguous group of slots."""
    e = len(experts)
    m = slots.shape[-2]
    if e == 0 or m % e:
        raise ContractViolation(f"{m} slots cannot be split evenly among {e} experts")
    s = m // e
    lead = (slice(None),) * (slots.ndim - 2)
    outs = [expert(slots[lead + (slice(i * s, (i + 1) * s),)]) for i, expert in enumerate(experts)]
    return outs[0] if e == 1 else concat(outs, axis=-2)


def combine_weights_softmax(logits: Tensor) -> Tensor:
    return softmax(logits, axis=-1)


def combine_softmax(x: Tensor, phi: Tensor, y_tilde: Tensor) -> Tensor:
    c = combine_weights_softmax(slot_logits(x, phi))
    _check(c, y_tilde, "combine")
    return c @ y_tilde


def linear_attention(z: Tensor) -> Tensor:
    """``phi(z) (phi(z)^T z)`` with ``phi = elu + 1``; rows are sequence positions."""
    fz = elu(z) + 1.0
    return fz @ (swap_last(fz) @ z)


def instance_norm_squash(c_raw: Tensor, eps: float = INSTANCE_NORM_EPS) -> Tensor:
    """Standardize each row across its slot weights, then map into (0, 1)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    centered = c_raw - c_raw.mean(axis=-1, keepdims=True)
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return sigmoid(centered / (var + eps) ** 0.5)


def combine_weights_linear(logits: Tensor, eps: float = INSTANCE_NORM_EPS) -> Tensor:
    return instance_norm_squash(linear_attention(logits), eps)


class ExpertNet(FeedForward):
    """Expert: affine(d -> 4d) -> GELU -> affine(4d -> d)."""

    def __init__(self, d: int, seed: int, stream: str, hidden: int | None = None):
        super().__init__(d, hidden or 4 * d, seed, stream)


class SoftMoEParams(Module):
    """Slot parameters, experts and the input/output projections of one MoE branch."""

    def __init__(
        self,
        d_model: int,
        experts: int,
        slots: int,
        seed: int,
        stream: str = "moe",
        d: int | None = None,
        variant: MoEVariant | str = MoEVariant.LINEAR_ATTN,
    ):
        if experts < 1 or slots < 1 or d_model < 1:
            raise ValueError("experts, slots and width must all be >= 1")
        d = d or d_model
        self.e = experts
        self.s = slots
        self.variant = MoEVariant(variant)
        # N(0, 1/d) keeps initial dispatch logits O(1)
        self.phi = parameter(rng(seed, stream, "phi").normal(0.0, 1.0 / math.sqrt(d), size=(d, experts * slots)))
        self.experts = [ExpertNet(d, seed, f"{stream}.expert{i}") for i in range(experts)]
        self.in_proj = Linear(d_model, d, seed, stream + ".in_proj")
        self.out_proj = Linear(d, d_model, seed, stream + ".out_proj")

    def __call__(self, x: Tensor) -> Tensor:
        return soft_moe_forward(x, self, self.variant)


def soft_moe_forward(x: Tensor, params: SoftMoEParams, variant: MoEVariant | str | None = None) -> Tensor:
    variant = MoEVariant(variant or params.variant)
    if x.shape[-2] < 1:
        raise DimensionError("soft_moe_forward needs at least one token")
    h = params.in_proj(x)
    logits = slot_logits(h, params.phi)
    slots = mix_slots(h, softmax(logits, axis=-2))
    y_tilde = apply_experts(slots, params.experts)
    if variant is MoEVariant.SOFTMAX:
        c = combine_weights_softmax(logits)
    else:
        c = combine_weights_linear(logits)
    return params.out_proj(c @ y_tilde)


def soft_moe_weights(x: Tensor, params: SoftMoEParams, variant: MoEVariant | str | None = None):
    """Return ``(dispatch, combine)`` weights for inspection."""
    variant = MoEVariant(variant or params.variant)
    logits = slot_logits(params.in_proj(x), params.phi)
    combine = combine_weights_softmax(logits) if variant is MoEVariant.SOFTMAX else combine_weights_linear(logits)
    return softmax(logits, axis=-2), combine
