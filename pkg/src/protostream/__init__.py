"""Continual class discovery over embedding streams.

Unlabeled unit-norm feature vectors arrive task by task; the engine models
each task with many fine-grained Gaussian prototypes balanced by entropic
optimal transport, aligns a cosine classifier to the prototype structure
through a mutual-information objective, and preserves earlier classes by
replaying from stored prototype statistics while pushing new classes away
from old centers.
"""

from .classifier import (
    ClassCenters,
    JointTable,
    Projector,
    align_loss,
    class_given_proto,
    class_posterior,
    head_grads,
    init_projector,
    joint_table,
    mutual_information,
)
from .data import (
    FeatureBatch,
    StreamManifest,
    batch_iter,
    l2_normalize,
    load_manifest,
    read_features,
    read_features_unlabeled,
    save_manifest,
    synth_stream,
    write_features,
)
from .errors import (
    BadMagicError,
    FormatError,
    GenerationError,
    NumericalError,
    TruncatedFileError,
    ValidationError,
    VersionMismatchError,
)
from .evaluation import (
    SessionReport,
    clustering_accuracy,
    forgetting_score,
    hungarian,
    predict_clusters,
)
from .memory import (
    ExemplarMemory,
    PrototypeMemory,
    ProtoStat,
    consolidate_task,
    old_loss,
    reduct_loss,
    sample_old,
    sep_loss,
)
from .prototypes import PrototypeSet, init_prototypes, log_posterior, proto_grads, proto_loss
from .sinkhorn import AssignmentPlan, sinkhorn_balanced, to_per_sample_targets
from .trainer import (
    AdamState,
    TrainConfig,
    TrainerState,
    adam_step,
    grad_check,
    load_checkpoint,
    run_stream,
    save_checkpoint,
    train_task,
)

__version__ = "0.1.0"
