"""Generalized zero-shot audio-visual recognition the easy way: optimize
class embeddings for separability on the unit sphere, then align fused
audio-visual representations to them with a supervised contrastive loss."""

from .avla import (
    FusionModel,
    TrainConfig,
    build_model,
    contrastive_loss,
    fuse_audio_visual,
    load_model,
    predict,
    save_model,
    similarity_scores,
    train_alignment,
)
from .ceo import (
    CeoConfig,
    CeoResult,
    ClassEmbeddingOptimizer,
    joint_objective,
    loss_semantic_proximity,
    loss_semantic_rank,
    loss_separability,
    nearest_neighbor_report,
    optimize_class_embeddings,
    pairwise_distances,
)
from .evaluation import (
    EvalReport,
    confusion_matrix,
    evaluate,
    harmonic_mean,
    mean_class_accuracy,
)
from .numerics import (
    AdamState,
    GradCheckReport,
    adam_step,
    attention_forward,
    finite_diff_check,
    project_to_sphere,
)
from .store import (
    ClassSplit,
    EmbeddingBank,
    FeatureDataset,
    StoreError,
    load_embedding_bank,
    load_feature_dataset,
    save_embedding_bank,
    save_feature_dataset,
)
from .synthdata import SynthConfig, generate_benchmark

__version__ = "0.1.0"
