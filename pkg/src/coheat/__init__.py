"""Cold-start bundle recommendation via dual graph views, popularity-gated
score coalescence, curriculum heating, and contrastive view regularization."""

from .corpus import (
    DatasetBundle,
    InteractionTable,
    PopularityIndex,
    ScenarioSplit,
    gen_synthetic,
    load_dataset,
    load_pairs,
    load_split,
    popularity_counts,
    save_dataset,
    save_split,
    split_scenario,
    write_pairs,
)
from .bigraph import (
    LayerStack,
    NormalizedBigraph,
    aggregate_layers,
    build_normalized,
    propagate,
    propagate_adjoint,
    propagate_final,
)
from .model import (
    CurriculumState,
    ModelParams,
    ViewEmbeddings,
    build_pooling,
    compute_views,
    gamma,
    inference_psi,
    init_params,
    load_checkpoint,
    pair_scores,
    predict,
    rank_topk,
    save_checkpoint,
    schedule_psi,
    temperature,
)
from .objective import (
    Gradients,
    LossBreakdown,
    TrainBatch,
    align_loss,
    analytic_gradients,
    au_loss,
    batch_objective,
    bpr_loss,
    finite_diff_check,
    finite_diff_gradients,
    normalize_rows,
    run_gradcheck,
    total_loss,
    uniform_loss,
)
from .metrics import EvalReport, evaluate, ndcg_at_k, random_recall_expectation, recall_at_k
from .trainer import (
    AdamState,
    TrainConfig,
    TrainHistory,
    edge_dropout,
    memory_bytes,
    optimizer_step,
    sample_batch,
    train,
)
from .errors import CoheatError, ConfigError, DataError, NumericalError

__version__ = "0.1.0"
