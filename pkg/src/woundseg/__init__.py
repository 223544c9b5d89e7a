"""woundseg: lightweight residual-attention segmentation on a
self-contained numpy autodiff engine."""

from .tensor import (
    NumericError,
    Parameter,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    backward,
    elementwise,
    from_array,
    scalar,
    set_debug_checks,
)
from .ops import (
    BatchNormState,
    Conv2dSpec,
    batchnorm2d,
    channel_attention,
    concat_channels,
    conv2d,
    gelu,
    maxpool2d,
    relu,
    sigmoid,
    spatial_attention,
    transpose_conv2d,
)
from .model import (
    ConfigError,
    Model,
    ModelConfig,
    ResAttnBlock,
    default_config,
    flops_count,
    model_forward,
    param_count,
    reduced_config,
    vanilla_unet_config,
)
from .optim import Lamb, xavier_init
from .losses import bce_loss, binarize, binarize_array, dice_loss, seg_loss
from .metrics import (
    ConfusionCounts,
    MetricsReport,
    compute_metrics,
    count_confusion,
    metrics_from_counts,
)
from .data import (
    DIHEDRAL_TRANSFORMS,
    AugmentConfig,
    DataError,
    DihedralTransform,
    PatchGrid,
    Sample,
    augment_train,
    extract_patches,
    load_sample,
    majority_vote,
    pair_files,
    predict_probabilities,
    save_image_png,
    save_mask_png,
    stitch_patches,
    tta_predict,
)
from .synth import generate_dataset, make_corpus, make_sample
from .checkpoint import (
    Checkpoint,
    CheckpointError,
    load_model,
    read_checkpoint,
    resume_optimizer,
    save_model,
    write_checkpoint,
)
from .config import (
    RunConfig,
    load_run_config,
    run_config_from_kv,
    run_config_to_kv,
    save_run_config,
)
from .train import TrainResult, build_patch_pool, train, validation_dice

__all__ = [
    "AugmentConfig", "BatchNormState", "Checkpoint", "CheckpointError",
    "ConfigError", "ConfusionCounts", "Conv2dSpec", "DIHEDRAL_TRANSFORMS",
    "DataError", "DihedralTransform", "Lamb", "MetricsReport", "Model",
    "ModelConfig", "NumericError", "Parameter", "PatchGrid", "ResAttnBlock",
    "RunConfig", "Sample", "ShapeError", "Tape", "TapeError", "Tensor",
    "TrainResult", "augment_train", "backward", "batchnorm2d", "bce_loss",
    "binarize", "binarize_array", "build_patch_pool", "channel_attention",
    "compute_metrics", "concat_channels", "conv2d", "count_confusion",
    "default_config", "dice_loss", "elementwise", "extract_patches",
    "flops_count", "from_array", "gelu", "generate_dataset", "load_model",
    "load_run_config", "load_sample", "majority_vote", "make_corpus",
    "make_sample", "maxpool2d", "metrics_from_counts", "model_forward",
    "pair_files", "param_count", "predict_probabilities", "read_checkpoint",
    "reduced_config", "relu", "resume_optimizer", "run_config_from_kv",
    "run_config_to_kv", "save_image_png", "save_mask_png", "save_model",
    "save_run_config", "scalar", "seg_loss", "set_debug_checks", "sigmoid",
    "spatial_attention", "stitch_patches", "train", "transpose_conv2d",
    "tta_predict", "validation_dice", "vanilla_unet_config",
    "write_checkpoint", "xavier_init",
]

__version__ = "0.1.0"
