"""Full scoring model: bidirectional memory sweep, CLS aggregation, and the
dual-token head, plus the three ablation fusion structures.

Variants:

* ``mru_bid`` - memory recurrent unit swept forward and backward with shared
  weights; per-clip CLS outputs and final memories are averaged across the
  two directions.
* ``mru`` - forward sweep only.
* ``mixer_mem`` - one plain depth-2 mixer per clip over
  (memory, CLS, audio, video) tokens; row 0 becomes the next memory.
* ``mixer`` - all clips flattened into a single depth-2 mixer; no memory,
  scoring from the CLS row only.

For every memory-bearing variant the per-clip CLS tokens plus position
embeddings pass through the CLS mixer, the outputs are mean-pooled, and the
head scores the pooled vector, the final memory, or their concatenation
depending on the scoring-token mode.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .mixer import MixerStack, init_mixer_stack, mixer_stack_forward, _uniform, _zeros_param
from .mru import (
    ClipFeatures,
    MruParams,
    MruState,
    _token_param,
    init_mru,
    initial_state,
    mru_step,
)
from .tensor import Parameter, Tensor


class FusionVariant(enum.Enum):
    MIXER = "mixer"
    MIXER_MEM = "mixer_mem"
    MRU = "mru"
    MRU_BID = "mru_bid"


class ScoringTokenMode(enum.Enum):
    CLS_ONLY = "cls"
    MEM_ONLY = "mem"
    BOTH = "both"


@dataclass
class ScoreVector:
    """K named, finite score values."""

    values: np.ndarray
    labels: tuple

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        self.labels = tuple(self.labels)
        if len(self.values) != len(self.labels):
            raise ShapeError(
                f"{len(self.values)} scores vs {len(self.labels)} labels"
            )
        if not np.isfinite(self.values).all():
            raise ShapeError("scores must be finite")

    def __len__(self) -> int:
        return len(self.values)

    def as_dict(self) -> dict:
        return {k: float(v) for k, v in zip(self.labels, self.values)}


@dataclass
class MixerDepths:
    audio: int = 1
    video: int = 1
    multimodal: int = 2
    memory: int = 1
    cls: int = 1

    def as_dict(self) -> dict:
        return {"audio": self.audio, "video": self.video,
                "multimodal": self.multimodal, "memory": self.memory,
                "cls": self.cls}


@dataclass
class ModelConfig:
    channels: int = 32
    s_audio: int = 4
    s_video: int = 6
    t_max: int = 16
    heads: int = 2
    variant: FusionVariant = FusionVariant.MRU_BID
    scoring: ScoringTokenMode = ScoringTokenMode.BOTH
    depths: MixerDepths = field(default_factory=MixerDepths)
    bottleneck_reduction: int = 4
    channel_ratio: int = 4
    score_labels: tuple = ()

    def __post_init__(self):
        if isinstance(self.variant, str):
            self.variant = FusionVariant(self.variant)
        if isinstance(self.scoring, str):
            self.scoring = ScoringTokenMode(self.scoring)
        if isinstance(self.depths, dict):
            self.depths = MixerDepths(**self.depths)
        if not self.score_labels:
            self.score_labels = tuple(f"head{i + 1}" for i in range(self.heads))
        self.score_labels = tuple(self.score_labels)
        if self.channels < 1 or self.s_audio < 1 or self.s_video < 1:
            raise ConfigError("channels and token counts must be >= 1")
        if self.t_max < 1:
            raise ConfigError("t_max must be >= 1")
        if self.heads < 1:
            raise ConfigError("need at least one score head")
        if len(self.score_labels) != self.heads:
            raise ConfigError(
                f"{self.heads} heads but {len(self.score_labels)} score labels"
            )

    def as_dict(self) -> dict:
        return {
            "channels": self.channels,
            "s_audio": self.s_audio,
            "s_video": self.s_video,
            "t_max": self.t_max,
            "heads": self.heads,
            "variant": self.variant.value,
            "scoring": self.scoring.value,
            "depths": self.depths.as_dict(),
            "bottleneck_reduction": self.bottleneck_reduction,
            "channel_ratio": self.channel_ratio,
            "score_labels": list(self.score_labels),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ModelParams:
    """Parameters of one built model; fields unused by the variant are None."""

    config: ModelConfig
    mru: MruParams | None = None
    clip_stack: MixerStack | None = None   # mixer_mem: per-clip depth-2 stack
    pe_clip: Parameter | None = None
    flat_stack: MixerStack | None = None   # mixer: one stack over all clips
    pe_flat: Parameter | None = None
    cls_token: Parameter | None = None     # mixer / mixer_mem only
    initial_memory: Parameter | None = None
    pe_cls: Parameter | None = None        # (t_max, C)
    cls_mixer: MixerStack | None = None
    head_w: Parameter | None = None        # (K, head_width)
    head_b: Parameter | None = None        # (1, K)

    def parameters(self):
        if self.mru is not None:
            yield from self.mru.parameters()
        for p in (self.cls_token, self.initial_memory, self.pe_clip, self.pe_flat):
            if p is not None:
                yield p
        for stack in (self.clip_stack, self.flat_stack, self.cls_mixer):
            if stack is not None:
                yield from stack.parameters()
        if self.pe_cls is not None:
            yield self.pe_cls
        yield self.head_w
        yield self.head_b

    def named_parameters(self):
        for p in self.parameters():
            yield p.name, p

    @property
    def head_width(self) -> int:
        return self.head_w.value.data.shape[1]


def head_input_width(config: ModelConfig) -> int:
    if config.scoring is ScoringTokenMode.BOTH:
        return 2 * config.channels
    return config.channels


def build_model(config: ModelConfig, seed: int) -> ModelParams:
    """Construct and initialize all parameters for the configured variant."""
    if config.variant is FusionVariant.MIXER and config.scoring is not ScoringTokenMode.CLS_ONLY:
        # the flat variant has no memory token to score from
        config = replace(config, scoring=ScoringTokenMode.CLS_ONLY)
    rng = np.random.default_rng(seed)
    c = config.channels
    d = config.depths
    params = ModelParams(config=config)

    if config.variant in (FusionVariant.MRU, FusionVariant.MRU_BID):
        params.mru = init_mru(
            c, config.s_audio, config.s_video, rng,
            audio_depth=d.audio, video_depth=d.video,
            multimodal_depth=d.multimodal, memory_depth=d.memory,
            bottleneck_reduction=config.bottleneck_reduction,
            channel_ratio=config.channel_ratio,
        )
    elif config.variant is FusionVariant.MIXER_MEM:
        tokens = 2 + config.s_audio + config.s_video
        params.initial_memory = _token_param(rng, (1, c), "clip_stack.initial_memory")
        params.cls_token = _token_param(rng, (1, c), "clip_stack.cls_token")
        params.pe_clip = _token_param(rng, (tokens, c), "clip_stack.pe")
        params.clip_stack = init_mixer_stack(
            2, tokens, c, rng, "clip_stack", channel_ratio=config.channel_ratio
        )
    else:  # flat mixer
        tokens = 1 + config.t_max * (config.s_audio + config.s_video)
        params.cls_token = _token_param(rng, (1, c), "flat_stack.cls_token")
        params.pe_flat = _token_param(rng, (tokens, c), "flat_stack.pe")
        params.flat_stack = init_mixer_stack(
            2, tokens, c, rng, "flat_stack",
            channel_ratio=config.channel_ratio, variable_tokens=True,
        )

    if config.variant is not FusionVariant.MIXER:
        params.pe_cls = _token_param(rng, (config.t_max, c), "pe_cls")
        params.cls_mixer = init_mixer_stack(
            d.cls, config.t_max, c, rng, "cls_mixer",
            channel_ratio=config.channel_ratio, variable_tokens=True,
        )

    width = head_input_width(config)
    params.head_w = _uniform(rng, (config.heads, width), width, "head.w")
    params.head_b = _zeros_param((1, config.heads), "head.b")
    return params


def _check_clips(params: ModelParams, clips) -> int:
    if not clips:
        raise ShapeError("need at least one clip")
    t = len(clips)
    if t > params.config.t_max:
        raise ConfigError(
            f"video has {t} clips but the model is bound to t_max={params.config.t_max}"
        )
    return t


def run_direction(params: ModelParams, clips, back: bool = False,
                  zero_bottlenecks: bool = False):
    """One recurrent sweep; returns (cls_by_position, final_memory).

    The backward sweep processes the last clip first, but the returned CLS
    list is always indexed by original clip position.
    """
    if params.mru is None:
        raise ConfigError(f"variant {params.config.variant.value} has no recurrent sweep")
    _check_clips(params, clips)
    state = initial_state(params.mru)
    cls_by_pos = [None] * len(clips)
    order = range(len(clips) - 1, -1, -1) if back else range(len(clips))
    for pos in order:
        state, cls_out = mru_step(params.mru, state, clips[pos], back=back,
                                  zero_bottlenecks=zero_bottlenecks)
        cls_by_pos[pos] = cls_out
    return cls_by_pos, state.mem


def _head(params: ModelParams, pooled, mem):
    mode = params.config.scoring
    if mode is ScoringTokenMode.BOTH:
        head_in = ops.concat([pooled, mem], axis=1)
    elif mode is ScoringTokenMode.CLS_ONLY:
        head_in = pooled
    else:
        head_in = mem
    return ops.linear(head_in, params.head_w.value, params.head_b.value,
                      transpose_w=True)


def _aggregate(params: ModelParams, cls_list, mem):
    t = len(cls_list)
    seq = ops.concat(cls_list, axis=0) if t > 1 else cls_list[0]
    pe = ops.slice_(params.pe_cls.value, 0, 0, t) if t < params.config.t_max \
        else params.pe_cls.value
    seq = ops.add(seq, pe)
    mixed = mixer_stack_forward(params.cls_mixer, seq)
    pooled = ops.mean(mixed, axis=0)
    return _head(params, pooled, mem)


def _forward_mixer_mem(params: ModelParams, clips):
    mem = params.initial_memory.value
    cls_list = []
    for clip in clips:
        if clip.audio.data.shape != (params.config.s_audio, params.config.channels):
            raise ShapeError(f"clip audio {clip.audio.data.shape} out of contract")
        if clip.video.data.shape != (params.config.s_video, params.config.channels):
            raise ShapeError(f"clip video {clip.video.data.shape} out of contract")
        x = ops.concat([mem, params.cls_token.value, clip.audio, clip.video], axis=0)
        x = ops.add(x, params.pe_clip.value)
        x = mixer_stack_forward(params.clip_stack, x)
        mem = ops.slice_(x, 0, 0, 1)
        cls_list.append(ops.slice_(x, 0, 1, 2))
    return _aggregate(params, cls_list, mem)


def _forward_mixer_flat(params: ModelParams, clips):
    parts = [params.cls_token.value]
    for clip in clips:
        parts.append(clip.audio)
        parts.append(clip.video)
    x = ops.concat(parts, axis=0)
    n = x.data.shape[0]
    bound = params.pe_flat.value.data.shape[0]
    if n > bound:
        raise ConfigError(f"{n} tokens exceed the flat mixer bound of {bound}")
    pe = ops.slice_(params.pe_flat.value, 0, 0, n) if n < bound else params.pe_flat.value
    x = ops.add(x, pe)
    x = mixer_stack_forward(params.flat_stack, x)
    cls = ops.slice_(x, 0, 0, 1)
    return _head(params, cls, None)


def forward_scores(params: ModelParams, clips, zero_bottlenecks: bool = False) -> Tensor:
    """Differentiable forward pass; returns the (1, K) score tensor."""
    variant = params.config.variant
    _check_clips(params, clips)
    if variant is FusionVariant.MRU_BID:
        f_cls, f_mem = run_direction(params, clips, back=False,
                                     zero_bottlenecks=zero_bottlenecks)
        b_cls, b_mem = run_direction(params, clips, back=True,
                                     zero_bottlenecks=zero_bottlenecks)
        cls_list = [ops.scale(ops.add(f, b), 0.5) for f, b in zip(f_cls, b_cls)]
        mem = ops.scale(ops.add(f_mem, b_mem), 0.5)
        return _aggregate(params, cls_list, mem)
    if variant is FusionVariant.MRU:
        cls_list, mem = run_direction(params, clips, back=False,
                                      zero_bottlenecks=zero_bottlenecks)
        return _aggregate(params, cls_list, mem)
    if variant is FusionVariant.MIXER_MEM:
        return _forward_mixer_mem(params, clips)
    return _forward_mixer_flat(params, clips)


def forward_video(params: ModelParams, clips, zero_bottlenecks: bool = False) -> ScoreVector:
    """Score one video; plain (non-differentiable) public entry point."""
    out = forward_scores(params, clips, zero_bottlenecks=zero_bottlenecks)
    return ScoreVector(values=out.data[0].copy(), labels=params.config.score_labels)


def incremental_trace(params: ModelParams, clips,
                      zero_bottlenecks: bool = False) -> np.ndarray:
    """Per-clip score deltas: row t is score(clips[:t+1]) - score(clips[:t]).

    Row 0 is the score of the first clip alone; the rows telescope to the
    full-sequence score.
    """
    t_total = _check_clips(params, clips)
    deltas = np.zeros((t_total, params.config.heads), dtype=np.float64)
    prev = np.zeros(params.config.heads, dtype=np.float64)
    for t in range(1, t_total + 1):
        cur = forward_scores(params, clips[:t], zero_bottlenecks=zero_bottlenecks)
        cur = cur.data[0].astype(np.float64)
        deltas[t - 1] = cur - prev
        prev = cur
    return deltas


def count_flops(params: ModelParams, clips) -> int:
    """Multiply-accumulate count of one forward pass over ``clips``."""
    with ops.count_macs() as tally:
        forward_scores(params, clips)
    return tally.count
