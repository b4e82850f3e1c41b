"""memmixer: a from-scratch multimodal mixer engine with a recurrent memory
token for scoring long audio-visual sequences.

The package bundles a small reverse-mode tensor core, mixer blocks, the
memory recurrent unit, four fusion variants with a dual-token scoring head,
binary feature containers, a planted-signal synthetic benchmark, Adam
training, and rank-correlation metrics.
"""

from .errors import (
    ConfigError,
    ContainerFormatError,
    DataError,
    EngineError,
    NonFiniteError,
    ShapeError,
    TapeError,
    UndefinedMetricError,
)
from .tensor import (
    Parameter,
    Tape,
    Tensor,
    backward,
    get_precision,
    precision,
    set_finite_checks,
    set_precision,
    zero_grads,
)
from .gradcheck import GradCheckReport, grad_check
from .mixer import MixerBlockParams, MixerStack, init_mixer_stack, mixer_stack_forward
from .mru import ClipFeatures, MruParams, MruState, bottleneck_extract, mru_step
from .model import (
    FusionVariant,
    ModelConfig,
    ModelParams,
    ScoreVector,
    ScoringTokenMode,
    build_model,
    count_flops,
    forward_scores,
    forward_video,
    incremental_trace,
    run_direction,
)
from .data import (
    ClipSpec,
    SynthConfig,
    load_dataset,
    read_container,
    read_manifest,
    segment_stream,
    synth_generate,
    token_segments,
    write_container,
    write_manifest,
)
from .train import (
    AdamState,
    LossReport,
    TrainConfig,
    adam_step,
    load_checkpoint,
    multi_head_mse,
    save_checkpoint,
    train_loop,
)
from .metrics import (
    EvalReport,
    RankingReport,
    evaluate_predictions,
    mse,
    ranking_report,
    spearman,
)

__version__ = "0.1.0"
