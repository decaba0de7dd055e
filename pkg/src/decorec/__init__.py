"""Popularity-debiased recommendation: conformity-aware deconfounded training
with a temporal-forecasting intervention at inference."""

from .backbone import (
    LIGHTGCN,
    MF,
    ModelParams,
    PropagatedEmbeddings,
    build_adjacency,
    conformity,
    consistency_score,
    init_params,
    item_mlp,
    load_checkpoint,
    matching_score,
    predict_score,
    propagate,
    save_checkpoint,
    softplus,
)
from .corpus import (
    EmptyDatasetError,
    Interaction,
    ParseError,
    SplitDataset,
    SynthConfig,
    SynthGroundTruth,
    TimeGrid,
    chronological_split,
    generate_synthetic,
    load_interactions,
    load_interactions_mapped,
    read_split,
    write_split,
)
from .evaluation import BiasReport, MetricsReport, bias_report, metrics, popular_items
from .forecast import InterventionPlan, build_intervention, ma_slope, moving_average
from .inference import (
    ELIMINATE_P,
    GRID_VALUES,
    INTERVENED,
    NO_INTERVENTION,
    RankingResult,
    rank_users,
    score_all,
    top_k,
)
from .popstats import (
    PersonalPopularityTable,
    PopularityTable,
    avg_local_popularity,
    high_pop_threshold,
    local_popularity,
    personal_popularity,
    window_steps_from_seconds,
)
from .training import (
    DECONFOUNDED,
    IPS,
    PLAIN,
    AdamState,
    Batch,
    TrainConfig,
    TrainReport,
    adam_step,
    bpr_quality_loss,
    sample_negative,
    train,
)

__version__ = "0.1.0"
