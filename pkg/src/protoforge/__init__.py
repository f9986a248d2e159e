"""protoforge: class-prototype refinement on the unit hypersphere.

Refines a K x d prototype matrix against a fidelity-plus-soft-orthonormality
objective (directly, via the closed-form SVD projection, or through a small
LoRA-adapted text encoder) and verifies the underlying scatter/likelihood
identities on synthetic data and realistic evaluation streams.
"""

from .corelinalg import EmbeddingMatrix, SvdFactors, frobenius_sq, gram, matrix, normalize_rows, svd
from .diagnostics import (
    AssignmentMatrix,
    GeometryMetrics,
    ScatterReport,
    between_vs_offdiag,
    cosine_assign,
    gaussian_nll,
    geometry_metrics,
    huygens,
)
from .encoder import (
    EncoderParams,
    LoraAdapter,
    TokenSequence,
    default_adapters,
    encode,
    encoder_init,
    lora_init,
    tokenize,
    trainable_fraction,
)
from .evalharness import (
    StreamConfig,
    StreamTask,
    SyntheticSpec,
    evaluate_over_tasks,
    generate_synthetic,
    sample_batch_tasks,
    sample_online_stream,
    zero_shot_accuracy,
)
from .objective import (
    EncoderObjective,
    LossReport,
    ObjectiveConfig,
    grad_check,
    lambda_at,
    loss,
    loss_grad_x,
)
from .prototype import (
    PrototypeSet,
    TemplateSet,
    average_prototypes,
    build_prototypes,
    expand_templates,
)
from .solvers import (
    RefinementResult,
    TrainConfig,
    solve_mean,
    solve_procrustes,
    solve_soft_direct,
    solve_soft_lora,
)

__version__ = "0.1.0"
