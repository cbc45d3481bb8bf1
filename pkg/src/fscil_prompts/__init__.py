"""Prompt tuning of a frozen dual encoder for few-shot class-incremental learning."""

from .classifier import (
    ClassRegistry,
    Prediction,
    classify,
    encode_class_prototypes,
    zero_shot_classify,
)
from .data import SyntheticDataset, benchmark_layout, synthesize_dataset
from .encoders import (
    DualEncoderBundle,
    EncoderSpec,
    LayerForwardHook,
    build_toy_bundle,
    count_parameters,
    encode_image,
    encode_text,
    pretrain_toy_alignment,
)
from .estimator import PromptTunedClassifier
from .exceptions import (
    CapacityError,
    ConfigurationError,
    DataError,
    FSCILError,
    InvariantError,
    NumericError,
    ProtocolError,
)
from .prompts import GPromptBank, PromptPlan, compile_plan, init_prompts, load_bank, project_prompts, save_bank
from .protocol import (
    SessionMetrics,
    SessionStream,
    build_session_stream,
    cumulative_accuracy,
    run_fscil,
    summarize,
    validate_stream,
)
from .trainer import (
    OptimizerConfig,
    RegularizerState,
    alpha,
    finite_difference_check,
    scale_prompt_gradients,
    train_session,
)

__version__ = "0.1.0"
