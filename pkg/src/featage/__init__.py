"""Feature-space age progression for face embeddings.

Transforms deep face-embedding vectors to a target age with a small
age-conditioned linear encoder/decoder (or a mean-feature interpolation
baseline) and measures the effect on longitudinal identification:
verification TAR@FAR, closed-set rank-1/CMC, and open-set rank-1 under the
youngest-enrolled / oldest-probed protocol.
"""

from .errors import ConfigError, DataFormatError, FeatageError, ValidationError
from .interp import (
    AttributeVector,
    MeanFeatureTable,
    attribute_vector,
    interpolate,
    interpolate_raw,
    mean_features,
    parse_mean_table,
    serialize_mean_table,
)
from .metrics import (
    AgingDirection,
    EvalReport,
    HeatmapResult,
    ScoreMatrix,
    cmc,
    evaluate,
    far_threshold,
    heatmap,
    mate_ranks,
    open_set_rank1,
    rank1_closed,
    score,
    score_matrix,
    tar_at_far,
)
from .model import (
    AdamState,
    AgeProgressionModel,
    LinearLayer,
    ModelSpec,
    TrainConfig,
    TrainResult,
    TrainingPairSet,
    adam_step,
    build_pairs,
    gradients,
    init_adam_state,
    init_model,
    load_model,
    loss,
    save_model,
    train,
)
from .store import (
    EmbeddingRecord,
    GalleryProbeSplit,
    LongitudinalDataset,
    add_distractors,
    build_youngest_oldest,
    load_dataset,
    make_record,
    merge_datasets,
    parse_dataset,
    save_dataset,
    serialize_dataset,
    split_folds,
)
from .synth import (
    NOISELESS_FIXTURE,
    STANDARD_FIXTURE,
    GroundTruth,
    SyntheticConfig,
    generate,
    oracle_aged,
    parse_ground_truth,
    serialize_ground_truth,
)

__version__ = "0.1.0"
