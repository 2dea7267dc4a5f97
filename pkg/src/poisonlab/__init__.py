"""Desk-scale backdoor poisoning lab for binary image classifiers."""

from .data import (
    Dataset,
    LabeledSample,
    SyntheticConfig,
    generate_synthetic,
    load_dataset_cache,
    load_image_folder,
    save_dataset_cache,
    split_dataset,
)
from .errors import (
    FolderStructureError,
    FormatError,
    ImageDecodeError,
    NumericError,
    PoisonLabError,
    TrainingError,
    ValidationError,
)
from .poisoning import (
    MixedTrainingSet,
    PoisonPlan,
    build_poisoned_set,
    mix_training_set,
    mixing_ratio,
    rebuild_mixed_set,
)
from .selection import (
    CorrectnessLedger,
    FusConfig,
    SamplePool,
    eligible_indices,
    forgetting_score,
    fus_select,
    load_pool,
    save_pool,
    select_random,
)
from .train_eval import (
    CompactCnnSpec,
    EpochRecord,
    TorchImageClassifier,
    TrainConfig,
    compute_asr,
    compute_ba,
    input_gradient,
    load_checkpoint,
    predict_batch,
    record_target_correctness,
    save_checkpoint,
    train_classifier,
)
from .triggers import (
    AugmentConfig,
    PgdConfig,
    Trigger,
    apply_trigger,
    augment_sample,
    load_trigger,
    make_blended_trigger,
    make_patch_trigger,
    optimize_trigger,
    pgd_step,
    project_linf,
    save_trigger,
)

__version__ = "0.1.0"
