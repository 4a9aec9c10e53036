"""DCAP few-shot learning: numpy-facing ops plus the training pipeline.

Array arguments are converted to float64 C-contiguous arrays. Feature maps
are [N, d, h, w]; attention weights are [N, h*w].
"""

from ._dcap import (
    Checkpoint,
    ConfigError,
    Dataset,
    DegenerateCentroidError,
    DivergenceError,
    IngestError,
    InvariantViolation,
    RunConfig,
    SamplingError,
    ShapeError,
    analyze,
    att_pool,
    ce_loss,
    centroids,
    cosine_matrix,
    dense_logits,
    descriptor_norm_stats,
    entropy_reg,
    episode_protocol_checks,
    eval_manifest,
    evaluate,
    gap,
    identity_checks,
    meta_finetune,
    meta_global_ce,
    meta_loss,
    nc_classify_tau,
    nc_logits,
    neighbor_consistency,
    objective_gradient_checks,
    pretrain,
    pretrain_loss,
    primitive_gradient_checks,
    smooth_label,
)

__version__ = "0.1.0"
