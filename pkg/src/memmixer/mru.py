"""The memory recurrent unit: one clip-step of memory-conditioned fusion.

Per clip, the incoming memory token is squeezed through two bottleneck MLPs
into an audio-context and a video-context token.  Each context token is
concatenated with the clip's feature tokens (context first when running
forward, features first when running backward), position embeddings are
added, and a per-modality mixer stack runs.  A fresh learnable CLS token is
prepended to the mixed audio+video tokens for the multimodal stack; its
output row summarizes the clip.  Finally (memory, CLS) pass through the
memory mixer and row 0 becomes the next memory token.

The memory token is the only channel that carries information between
clips; ``zero_bottlenecks`` severs it for tests and ablations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .mixer import MixerStack, init_mixer_stack, mixer_stack_forward, _uniform, _zeros_param
from .tensor import Parameter, Tensor


@dataclass
class ClipFeatures:
    """Feature tokens of one clip: audio (S_a, C) and video (S_v, C)."""

    audio: Tensor
    video: Tensor

    @classmethod
    def from_arrays(cls, audio, video) -> "ClipFeatures":
        return cls(audio=Tensor(audio), video=Tensor(video))


@dataclass
class BottleneckParams:
    """Two-layer squeeze/expand MLP (C -> C/r -> C) with a GELU between."""

    channels: int
    reduction: int
    w_down: Parameter  # (C/r, C)
    b_down: Parameter  # (1, C/r)
    w_up: Parameter    # (C, C/r)
    b_up: Parameter    # (1, C)

    def parameters(self):
        yield self.w_down
        yield self.b_down
        yield self.w_up
        yield self.b_up


def init_bottleneck(channels: int, reduction: int, rng, name: str) -> BottleneckParams:
    if channels % reduction != 0:
        raise ConfigError(
            f"bottleneck: channels ({channels}) not divisible by reduction ({reduction})"
        )
    hidden = channels // reduction
    return BottleneckParams(
        channels=channels,
        reduction=reduction,
        w_down=_uniform(rng, (hidden, channels), channels, f"{name}.w_down"),
        b_down=_zeros_param((1, hidden), f"{name}.b_down"),
        w_up=_uniform(rng, (channels, hidden), hidden, f"{name}.w_up"),
        b_up=_zeros_param((1, channels), f"{name}.b_up"),
    )


def bottleneck_extract(p: BottleneckParams, mem: Tensor) -> Tensor:
    """up(gelu(down(mem))) for a (1, C) memory token."""
    if mem.data.shape != (1, p.channels):
        raise ShapeError(f"bottleneck expects (1, {p.channels}), got {mem.data.shape}")
    return ops.mlp2(mem, p.w_down.value, p.b_down.value,
                    p.w_up.value, p.b_up.value)


@dataclass
class MruParams:
    """All learnable pieces of the memory recurrent unit."""

    channels: int
    s_audio: int
    s_video: int
    audio_bottleneck: BottleneckParams
    video_bottleneck: BottleneckParams
    pe_audio: Parameter          # (S_a + 1, C)
    pe_video: Parameter          # (S_v + 1, C)
    audio_mixer: MixerStack      # S_a + 1 tokens
    video_mixer: MixerStack      # S_v + 1 tokens
    multimodal_mixer: MixerStack # S_a + S_v + 3 tokens
    memory_mixer: MixerStack     # 2 tokens
    cls_token: Parameter         # (1, C)
    initial_memory: Parameter    # (1, C)

    def parameters(self):
        yield from self.audio_bottleneck.parameters()
        yield from self.video_bottleneck.parameters()
        yield self.pe_audio
        yield self.pe_video
        yield from self.audio_mixer.parameters()
        yield from self.video_mixer.parameters()
        yield from self.multimodal_mixer.parameters()
        yield from self.memory_mixer.parameters()
        yield self.cls_token
        yield self.initial_memory


@dataclass
class MruState:
    """Recurrent state: the (1, C) memory token after the latest step."""

    mem: Tensor


def _token_param(rng, shape, name, scale=0.02):
    return Parameter(Tensor(rng.normal(0.0, scale, size=shape)), name)


def init_mru(
    channels: int,
    s_audio: int,
    s_video: int,
    rng,
    name: str = "mru",
    audio_depth: int = 1,
    video_depth: int = 1,
    multimodal_depth: int = 2,
    memory_depth: int = 1,
    bottleneck_reduction: int = 4,
    channel_ratio: int = 4,
) -> MruParams:
    if s_audio < 1 or s_video < 1:
        raise ConfigError("token counts must be >= 1 per clip")
    fused_tokens = s_audio + s_video + 3
    return MruParams(
        channels=channels,
        s_audio=s_audio,
        s_video=s_video,
        audio_bottleneck=init_bottleneck(channels, bottleneck_reduction, rng,
                                         f"{name}.audio_bottleneck"),
        video_bottleneck=init_bottleneck(channels, bottleneck_reduction, rng,
                                         f"{name}.video_bottleneck"),
        pe_audio=_token_param(rng, (s_audio + 1, channels), f"{name}.pe_audio"),
        pe_video=_token_param(rng, (s_video + 1, channels), f"{name}.pe_video"),
        audio_mixer=init_mixer_stack(audio_depth, s_audio + 1, channels, rng,
                                     f"{name}.audio_mixer", channel_ratio=channel_ratio),
        video_mixer=init_mixer_stack(video_depth, s_video + 1, channels, rng,
                                     f"{name}.video_mixer", channel_ratio=channel_ratio),
        multimodal_mixer=init_mixer_stack(multimodal_depth, fused_tokens, channels, rng,
                                          f"{name}.multimodal_mixer",
                                          channel_ratio=channel_ratio),
        memory_mixer=init_mixer_stack(memory_depth, 2, channels, rng,
                                      f"{name}.memory_mixer", channel_ratio=channel_ratio),
        cls_token=_token_param(rng, (1, channels), f"{name}.cls_token"),
        initial_memory=_token_param(rng, (1, channels), f"{name}.initial_memory"),
    )


def initial_state(params: MruParams) -> MruState:
    return MruState(mem=params.initial_memory.value)


def mru_step(
    params: MruParams,
    state: MruState,
    clip: ClipFeatures,
    back: bool = False,
    zero_bottlenecks: bool = False,
):
    """Advance the memory by one clip; returns (new_state, cls_out).

    ``back`` swaps the concatenation order so the memory-derived context
    token trails the features instead of leading them (the backward sweep
    uses the same weights and the same 0..S position indices).
    ``zero_bottlenecks`` replaces both extracted context tokens with zeros,
    making cls_out independent of the incoming state.
    """
    c = params.channels
    if state.mem.data.shape != (1, c):
        raise ShapeError(f"memory token must be (1, {c}), got {state.mem.data.shape}")
    if clip.audio.data.shape != (params.s_audio, c):
        raise ShapeError(
            f"clip audio {clip.audio.data.shape} != bound ({params.s_audio}, {c})"
        )
    if clip.video.data.shape != (params.s_video, c):
        raise ShapeError(
            f"clip video {clip.video.data.shape} != bound ({params.s_video}, {c})"
        )

    if zero_bottlenecks:
        a_prev = Tensor(np.zeros((1, c)))
        v_prev = Tensor(np.zeros((1, c)))
    else:
        a_prev = bottleneck_extract(params.audio_bottleneck, state.mem)
        v_prev = bottleneck_extract(params.video_bottleneck, state.mem)

    if back:
        a_seq = ops.concat([clip.audio, a_prev], axis=0)
        v_seq = ops.concat([clip.video, v_prev], axis=0)
    else:
        a_seq = ops.concat([a_prev, clip.audio], axis=0)
        v_seq = ops.concat([v_prev, clip.video], axis=0)
    a_seq = ops.add(a_seq, params.pe_audio.value)
    v_seq = ops.add(v_seq, params.pe_video.value)

    a_mix = mixer_stack_forward(params.audio_mixer, a_seq)
    v_mix = mixer_stack_forward(params.video_mixer, v_seq)

    fused = ops.concat([params.cls_token.value, a_mix, v_mix], axis=0)
    fused = mixer_stack_forward(params.multimodal_mixer, fused)
    cls_out = ops.slice_(fused, 0, 0, 1)

    mem_seq = ops.concat([state.mem, cls_out], axis=0)
    mem_seq = mixer_stack_forward(params.memory_mixer, mem_seq)
    new_mem = ops.slice_(mem_seq, 0, 0, 1)

    return MruState(mem=new_mem), cls_out
