"""Mixer blocks: token mixing then channel mixing, each pre-normalized over
channels and wrapped in a skip connection.

A block bound to S tokens and C channels computes

    U = X + W2 @ gelu(W1 @ norm1(X))          (mix across tokens)
    Y = U + gelu(norm2(U) @ W3^T) @ W4^T      (mix across channels, per token)

with biases on every linear layer (zero biases recover the bias-free form).
Stacks flagged ``variable_tokens`` accept shorter inputs by slicing the
token-mixing weights to their leading block, which keeps one parameter set
usable across sequence lengths.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ShapeError
from .tensor import Parameter, Tensor

LN_EPS = ops.LN_EPS


@dataclass
class MixerBlockParams:
    """Weights of one block, bound to a token count and channel count."""

    tokens: int
    channels: int
    token_hidden: int
    channel_hidden: int
    w1: Parameter  # (token_hidden, tokens)
    b1: Parameter  # (1, token_hidden)
    w2: Parameter  # (tokens, token_hidden)
    b2: Parameter  # (1, tokens)
    w3: Parameter  # (channel_hidden, channels)
    b3: Parameter  # (1, channel_hidden)
    w4: Parameter  # (channels, channel_hidden)
    b4: Parameter  # (1, channels)
    norm1_gamma: Parameter
    norm1_beta: Parameter
    norm2_gamma: Parameter
    norm2_beta: Parameter

    def parameters(self):
        yield self.w1
        yield self.b1
        yield self.w2
        yield self.b2
        yield self.w3
        yield self.b3
        yield self.w4
        yield self.b4
        yield self.norm1_gamma
        yield self.norm1_beta
        yield self.norm2_gamma
        yield self.norm2_beta


@dataclass
class MixerStack:
    """Blocks applied in order; all bound to the same token/channel counts."""

    blocks: list = field(default_factory=list)
    variable_tokens: bool = False

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def parameters(self):
        for blk in self.blocks:
            yield from blk.parameters()


def _uniform(rng, shape, fan_in, name):
    bound = float(np.sqrt(1.0 / fan_in))
    return Parameter(Tensor(rng.uniform(-bound, bound, size=shape)), name)


def _zeros_param(shape, name):
    return Parameter(Tensor(np.zeros(shape)), name)


def init_mixer_block(
    tokens: int,
    channels: int,
    rng,
    name: str,
    token_hidden: int | None = None,
    channel_ratio: int = 4,
) -> MixerBlockParams:
    """Initialize one block: uniform +/-sqrt(1/fan_in) weights, zero biases,
    unit-gamma/zero-beta norms.  Hidden widths default to max(S, 4) for the
    token MLP and 4*C for the channel MLP."""
    s_h = token_hidden if token_hidden is not None else max(tokens, 4)
    c_h = channel_ratio * channels
    return MixerBlockParams(
        tokens=tokens,
        channels=channels,
        token_hidden=s_h,
        channel_hidden=c_h,
        w1=_uniform(rng, (s_h, tokens), tokens, f"{name}.w1"),
        b1=_zeros_param((1, s_h), f"{name}.b1"),
        w2=_uniform(rng, (tokens, s_h), s_h, f"{name}.w2"),
        b2=_zeros_param((1, tokens), f"{name}.b2"),
        w3=_uniform(rng, (c_h, channels), channels, f"{name}.w3"),
        b3=_zeros_param((1, c_h), f"{name}.b3"),
        w4=_uniform(rng, (channels, c_h), c_h, f"{name}.w4"),
        b4=_zeros_param((1, channels), f"{name}.b4"),
        norm1_gamma=Parameter(Tensor(np.ones((1, channels))), f"{name}.norm1_gamma"),
        norm1_beta=_zeros_param((1, channels), f"{name}.norm1_beta"),
        norm2_gamma=Parameter(Tensor(np.ones((1, channels))), f"{name}.norm2_gamma"),
        norm2_beta=_zeros_param((1, channels), f"{name}.norm2_beta"),
    )


def init_mixer_stack(
    depth: int,
    tokens: int,
    channels: int,
    rng,
    name: str,
    token_hidden: int | None = None,
    channel_ratio: int = 4,
    variable_tokens: bool = False,
) -> MixerStack:
    blocks = [
        init_mixer_block(tokens, channels, rng, f"{name}.block{i}",
                         token_hidden=token_hidden, channel_ratio=channel_ratio)
        for i in range(depth)
    ]
    return MixerStack(blocks=blocks, variable_tokens=variable_tokens)


def mixer_block_forward(p: MixerBlockParams, x: Tensor,
                        allow_token_slicing: bool = False) -> Tensor:
    """Apply one block; output shape equals input shape (S x C)."""
    s, c = x.data.shape
    if c != p.channels:
        raise ShapeError(f"mixer block bound to {p.channels} channels, input has {c}")
    if s != p.tokens and not (allow_token_slicing and s < p.tokens):
        raise ShapeError(f"mixer block bound to {p.tokens} tokens, input has {s}")

    w1, w2, b2 = p.w1.value, p.w2.value, p.b2.value
    if s < p.tokens:
        # leading S x hidden block of the token-mixing weights
        w1 = ops.slice_(w1, 1, 0, s)
        w2 = ops.slice_(w2, 0, 0, s)
        b2 = ops.slice_(b2, 1, 0, s)

    h = ops.layer_norm(x, p.norm1_gamma.value, p.norm1_beta.value, LN_EPS)
    u = ops.add(x, ops.mlp2(h, w1, p.b1.value, w2, b2, transpose_io=True))

    h2 = ops.layer_norm(u, p.norm2_gamma.value, p.norm2_beta.value, LN_EPS)
    return ops.add(u, ops.mlp2(h2, p.w3.value, p.b3.value,
                               p.w4.value, p.b4.value))


def mixer_stack_forward(stack: MixerStack, x: Tensor) -> Tensor:
    """Apply all blocks in order; depth 0 is the identity."""
    for blk in stack.blocks:
        x = mixer_block_forward(blk, x, allow_token_slicing=stack.variable_tokens)
    return x
