"""hicaps: hierarchical multi-label image classification with capsule routing.

A small numpy-backed library: a reverse-mode autodiff tensor engine, capsule
layers with routing by agreement, class-hierarchy handling, dataset loaders,
and the training loop that ties them together.  See the demos/ scripts for
guided tours of each piece.
"""

from .tensor import Tensor, tensor, precision, ShapeError, GraphError
from .capsule import squash, route, PrimaryCapsuleLayer, SecondaryCapsuleLayer
from .hierarchy import (
    LabelTree,
    HierarchyError,
    bundled_tree,
    load_tree,
    parse_tree,
    format_tree,
    validate,
    consistency_rate,
)
from .model import (
    ModelConfig,
    HierarchicalCapsNet,
    ForwardOutput,
    config_for,
    fingerprint,
    margin_loss,
    reconstruction_loss,
    total_loss,
    save_checkpoint,
    load_checkpoint,
    read_checkpoint,
    CheckpointError,
)
from .data import (
    Dataset,
    Batch,
    DataError,
    load_idx,
    load_cifar,
    load_dataset,
    compute_stats,
    normalize,
    mixup,
    iter_batches,
)
from .train import (
    AdamState,
    adam_init,
    adam_step,
    lr_at,
    lambdas_at,
    TrainSchedule,
    schedule_for,
    RunMetrics,
    evaluate,
    train_run,
    TrainingDiverged,
)

__version__ = "0.1.0"
