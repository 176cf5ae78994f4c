"""Staged fine-tuning engine for residual convnets.

Modules cover the full pipeline: an autodiff tensor engine (`tensor`,
`ops`), residual network construction with replaceable heads (`layers`),
the manifest-driven image pipeline and synthetic dataset (`data`), grouped
Adam with the learning-rate range test (`optim`), the three-stage
progressive-resizing protocol with checkpoints (`trainer`, `checkpoint`),
screening metrics (`metrics`), and the CLI plus local HTTP service
(`cli`, `server`).
"""

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, \
    save_checkpoint
from .data import (
    AugmentPolicy,
    Batch,
    BatchStream,
    CLASS_NAMES,
    DatasetManifest,
    IMAGENET_STATS,
    NormalizationStats,
    gen_synthetic,
    load_manifest,
)
from .errors import ConfigError, ContractError, DimensionError, StagewiseError
from .layers import (
    Model,
    ResNetConfig,
    assign_layer_groups,
    build_resnet,
    replace_head,
    set_frozen,
)
from .metrics import (
    ConfusionMatrix,
    EvalReport,
    accuracy,
    confusion_matrix,
    evaluate,
    per_class_metrics,
)
from .optim import (
    Adam,
    LrCurve,
    LrFindConfig,
    discriminative_lrs,
    lr_range_test,
)
from .tensor import Tensor
from .trainer import (
    ProtocolConfig,
    RunState,
    StagePlan,
    StepPlan,
    TrainingDiverged,
    default_protocol,
    desk_protocol,
    run_protocol,
)

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "AugmentPolicy",
    "Batch",
    "BatchStream",
    "CLASS_NAMES",
    "Checkpoint",
    "CheckpointError",
    "ConfigError",
    "ConfusionMatrix",
    "ContractError",
    "DatasetManifest",
    "DimensionError",
    "EvalReport",
    "IMAGENET_STATS",
    "LrCurve",
    "LrFindConfig",
    "Model",
    "NormalizationStats",
    "ProtocolConfig",
    "ResNetConfig",
    "RunState",
    "StagePlan",
    "StagewiseError",
    "StepPlan",
    "Tensor",
    "TrainingDiverged",
    "accuracy",
    "assign_layer_groups",
    "build_resnet",
    "confusion_matrix",
    "default_protocol",
    "desk_protocol",
    "discriminative_lrs",
    "evaluate",
    "gen_synthetic",
    "load_checkpoint",
    "load_manifest",
    "lr_range_test",
    "per_class_metrics",
    "replace_head",
    "run_protocol",
    "save_checkpoint",
    "set_frozen",
    "__version__",
]
