"""Modality-conditioned masked autoencoder for multi-modal 3D volumes."""

from . import errors
from .corpus import (
    CaseManifest,
    RawVolume,
    Session,
    load_manifest,
    load_session,
    read_volume,
    save_manifest,
    scan_corpus,
    write_volume,
)
from .evaluation import (
    AvailabilityConfig,
    MetricRow,
    availability_matrix_eval,
    default_availability_configs,
    dice,
    hd95,
    impute_modality,
    sensitivity_specificity,
)
from .modality_embed import (
    EmbeddingCache,
    EmbeddingSource,
    embed_modality,
    load_embedding_table,
    normalize_modality_name,
)
from .network import (
    NetConfig,
    cln,
    decode,
    encode,
    head_classify,
    head_segment,
    init_params,
)
from .objectives import (
    LossReport,
    gradcheck,
    loss_cov,
    loss_mae,
    loss_total,
    loss_var,
    warmup_lambdas,
)
from .preprocess import (
    PreparedSession,
    PreprocessConfig,
    Volume,
    crop_or_pad,
    divisible_pad,
    evaluation_config,
    normalize_intensity,
    preprocess_session,
    rand_adjust_contrast,
    rand_affine,
    rand_bias_field,
    rand_flip,
    rand_gaussian_noise,
    sanitize,
)
from .tokenizer import (
    BatchConfig,
    MaskPlan,
    PatchSet,
    TokenBatch,
    assemble_batch,
    patchify,
    positional_code,
    sample_mask,
)
from .training import (
    Checkpoint,
    ManifestSource,
    OptimState,
    RunConfig,
    SynthSource,
    SynthSpec,
    adamw_step,
    finetune,
    load_checkpoint,
    lr_schedule,
    pretrain_loop,
    save_checkpoint,
    synth_corpus,
    synth_session,
)

__version__ = "0.1.0"
