"""Curriculum-heated training loop: sampling, dropout, Adam, model selection.

Each epoch recomputes the schedule temperature, redraws edge dropout for the
interaction graphs (never for bundle-item affiliations), iterates uniformly
sampled ranking triplets with analytic gradients, then scores the validation
split on the full graphs. The returned parameters come from the epoch with
the best validation recall.
"""

from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .bigraph import build_normalized
from .corpus import DatasetBundle, InteractionTable, ScenarioSplit, make_table, popularity_counts
from .errors import ConfigError, DataError, NumericalError
from .metrics import CANDIDATE_POLICIES, evaluate
from .model import (
    CurriculumState,
    ModelParams,
    build_pooling,
    compute_views,
    inference_psi,
    init_params,
    schedule_psi,
)
from .objective import Gradients, LossBreakdown, TrainBatch, batch_objective

_VARIANTS = ("full", "no_pc", "ch_ant", "ch_fix", "no_au")
_DROPOUT_SCOPES = ("both", "ub", "ui", "none")

HISTORY_HEADER = "epoch,psi,loss_total,loss_bpr,loss_align,loss_uniform,loss_l2,val_recall20,val_ndcg20"


@dataclass
class TrainConfig:
    d: int = 64
    K: int = 2
    learning_rate: float = 0.001
    lambda1: float = 0.5
    lambda2: float = 0.0001
    epsilon: float = 1e4
    epochs: int = 100
    batch_size: int = 2048
    edge_dropout_rate: float = 0.2
    seed: int = 0
    variant: str = "full"
    l2_form: str = "squared"
    dropout_scope: str = "both"
    candidate_policy: str = "default"
    eval_k: int = 20
    gamma_override: float | None = None
    deterministic_reduction: bool = True

    def __post_init__(self):
        if self.d < 1:
            raise ConfigError(f"embedding width must be >= 1, got {self.d}")
        if self.K < 0:
            raise ConfigError(f"layer count must be >= 0, got {self.K}")
        if self.epsilon <= 1.0:
            raise ConfigError(f"maximum temperature must exceed 1, got {self.epsilon}")
        if not (0.0 <= self.edge_dropout_rate < 1.0):
            raise ConfigError(f"edge dropout rate must be in [0, 1), got {self.edge_dropout_rate}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if self.batch_size < 2:
            raise ConfigError(f"batch size must be >= 2, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.variant not in _VARIANTS:
            raise ConfigError(f"variant must be one of {_VARIANTS}, got {self.variant!r}")
        if self.l2_form not in ("squared", "norm"):
            raise ConfigError(f"l2_form must be 'squared' or 'norm', got {self.l2_form!r}")
        if self.dropout_scope not in _DROPOUT_SCOPES:
            raise ConfigError(f"dropout_scope must be one of {_DROPOUT_SCOPES}")
        if self.candidate_policy not in CANDIDATE_POLICIES:
            raise ConfigError(f"candidate_policy must be one of {CANDIDATE_POLICIES}")
        if self.eval_k < 1:
            raise ConfigError(f"eval_k must be >= 1, got {self.eval_k}")
        if self.gamma_override is not None and not (0.0 <= self.gamma_override <= 1.0):
            raise ConfigError("gamma_override must lie in [0, 1]")

    @classmethod
    def from_sources(cls, config_path: str | Path | None = None, overrides: dict | None = None) -> "TrainConfig":
        """Precedence: explicit overrides > config file > defaults."""
        values: dict = {}
        if config_path is not None:
            path = Path(config_path)
            if not path.exists():
                raise DataError(f"config file not found: {path}")
            loaded = json.loads(path.read_text())
            if not isinstance(loaded, dict):
                raise ConfigError(f"{path}: config must be a JSON object")
            known = {f.name for f in dataclasses.fields(cls)}
            unknown = set(loaded) - known
            if unknown:
                raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
            values.update(loaded)
        for key, val in (overrides or {}).items():
            if val is not None:
                values[key] = val
        return cls(**values)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def effective_gamma_override(self) -> float | None:
        # the no-coalescence ablation pins the blend to a half everywhere
        return 0.5 if self.variant == "no_pc" else self.gamma_override

    def effective_lambda1(self) -> float:
        return 0.0 if self.variant == "no_au" else self.lambda1


@dataclass
class AdamState:
    """First/second-moment accumulators with bias correction."""

    m: Gradients
    v: Gradients
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ModelParams) -> "AdamState":
        return cls(m=Gradients.zeros_like(params), v=Gradients.zeros_like(params))

    def nbytes(self) -> int:
        return sum(t.nbytes for t in self.m.tables()) + sum(t.nbytes for t in self.v.tables())


def optimizer_step(
    params: ModelParams, grads: Gradients, state: AdamState, learning_rate: float
) -> tuple[ModelParams, AdamState]:
    """One adaptive-moment update in place; rejects non-finite gradients."""
    for name, g_t in grads.named_tables():
        if not np.isfinite(g_t).all():
            raise NumericalError(f"non-finite gradient in table {name}; step rejected")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for p_t, g_t, m_t, v_t in zip(params.tables(), grads.tables(), state.m.tables(), state.v.tables()):
        m_t *= b1
        m_t += (1.0 - b1) * g_t
        v_t *= b2
        v_t += (1.0 - b2) * g_t * g_t
        p_t -= learning_rate * (m_t / bc1) / (np.sqrt(v_t / bc2) + state.eps)
    return params, state


def memory_bytes(params: ModelParams, state: AdamState) -> int:
    """Accounting for the Theta((U+B+I)*d) footprint contract."""
    return params.nbytes() + state.nbytes()


def sample_batch(
    train_ub: InteractionTable,
    b_count: int,
    warm_bundles: np.ndarray,
    batch_size: int,
    rng: np.random.Generator,
    pair_set: frozenset[tuple[int, int]] | None = None,
    resample_cap: int = 100,
) -> TrainBatch:
    """Uniform positives from the training pairs; per-positive negative drawn
    uniformly from warm bundles, rejection-resampled off the user's positives."""
    if len(train_ub) == 0:
        raise DataError("cannot sample from an empty training table")
    if warm_bundles.size == 0:
        raise DataError("no warm bundles available for negative sampling")
    if pair_set is None:
        pair_set = train_ub.pair_set()
    idx = rng.integers(0, len(train_ub), size=batch_size)
    chosen = train_ub.pairs[idx]
    users, pos, neg = [], [], []
    for u, b_pos in chosen.tolist():
        for _ in range(resample_cap):
            b_neg = int(warm_bundles[rng.integers(0, warm_bundles.size)])
            if (u, b_neg) not in pair_set:
                users.append(u)
                pos.append(b_pos)
                neg.append(b_neg)
                break
        else:
            warnings.warn(f"user {u} interacts with every warm bundle; triplet skipped")
    return TrainBatch(
        users=np.asarray(users, dtype=np.int64),
        pos=np.asarray(pos, dtype=np.int64),
        neg=np.asarray(neg, dtype=np.int64),
    )


def edge_dropout(edges: InteractionTable, rate: float, rng: np.random.Generator) -> InteractionTable:
    """Keep each edge independently with probability 1-rate."""
    if not (0.0 <= rate < 1.0):
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0 or len(edges) == 0:
        return edges
    keep = rng.random(len(edges)) >= rate
    return make_table(edges.pairs[keep], edges.n_left, edges.n_right)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    psi: float
    losses: LossBreakdown
    val_recall: float
    val_ndcg: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0  # 1-based; 0 means "initial parameters kept"

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [HISTORY_HEADER]
        for r in self.records:
            l = r.losses
            lines.append(
                f"{r.epoch},{r.psi!r},{l.total!r},{l.bpr!r},{l.align!r},"
                f"{l.uniform!r},{l.l2!r},{r.val_recall!r},{r.val_ndcg!r}"
            )
        path.write_text("\n".join(lines) + "\n")


def _mean_breakdown(parts: list[LossBreakdown]) -> LossBreakdown:
    return LossBreakdown(
        bpr=float(np.mean([p.bpr for p in parts])),
        align=float(np.mean([p.align for p in parts])),
        uniform=float(np.mean([p.uniform for p in parts])),
        au=float(np.mean([p.au for p in parts])),
        l2=float(np.mean([p.l2 for p in parts])),
        total=float(np.mean([p.total for p in parts])),
    )


def train(
    data: DatasetBundle,
    split: ScenarioSplit,
    config: TrainConfig,
    epoch_callback: Callable[[int, float, ModelParams], None] | None = None,
) -> tuple[ModelParams, TrainHistory]:
    """Run the full loop and return (best-validation params, history)."""
    if len(split.train) == 0:
        raise DataError("training split is empty")
    rng = np.random.default_rng(config.seed)
    params = init_params(data.u_count, data.b_count, data.i_count, config.d, rng)
    state = AdamState.for_params(params)
    history = TrainHistory()
    if config.epochs == 0:
        return params, history

    popularity = popularity_counts(split.train)
    pooling = build_pooling(data.bi)
    full_ub_graph = build_normalized(split.train)
    full_ui_graph = build_normalized(data.ui)
    pair_set = split.train.pair_set()
    n_batches = -(-len(split.train) // config.batch_size)
    lam1 = config.effective_lambda1()
    g_override = config.effective_gamma_override()
    drop_ub = config.dropout_scope in ("both", "ub")
    drop_ui = config.dropout_scope in ("both", "ui")

    best_params = params.copy()
    best_recall = -np.inf
    for t in range(1, config.epochs + 1):
        psi = schedule_psi(config.variant, t, config.epochs, config.epsilon)
        curriculum = CurriculumState(t=t, T=config.epochs, epsilon=config.epsilon, psi=psi)
        ub_graph = full_ub_graph
        ui_graph = full_ui_graph
        if config.edge_dropout_rate > 0.0:
            if drop_ub:
                ub_graph = build_normalized(edge_dropout(split.train, config.edge_dropout_rate, rng))
            if drop_ui:
                ui_graph = build_normalized(edge_dropout(data.ui, config.edge_dropout_rate, rng))

        epoch_parts: list[LossBreakdown] = []
        for i in range(n_batches):
            batch = sample_batch(
                split.train, data.b_count, split.warm_bundles, config.batch_size, rng, pair_set
            )
            try:
                breakdown, grads = batch_objective(
                    params, ub_graph, ui_graph, pooling, batch, curriculum, popularity,
                    lam1, config.lambda2, config.K, config.l2_form, g_override,
                )
            except NumericalError as exc:
                raise NumericalError(f"epoch {t}, batch {i}: {exc}") from exc
            if not np.isfinite(breakdown.total):
                raise NumericalError(f"non-finite loss at epoch {t}, batch {i}")
            params, state = optimizer_step(params, grads, state, config.learning_rate)
            epoch_parts.append(breakdown)

        # model selection scores validation under the inference-time
        # temperature so the selected epoch matches the reporting protocol
        ve = compute_views(params, full_ub_graph, full_ui_graph, pooling, config.K)
        eval_curriculum = CurriculumState(
            t=config.epochs, T=config.epochs, epsilon=config.epsilon,
            psi=inference_psi(config.variant, config.epsilon),
        )
        report = evaluate(
            ve, popularity, eval_curriculum, split,
            k=config.eval_k, partition="val", policy=config.candidate_policy,
            gamma_override=g_override,
        )
        history.records.append(
            EpochRecord(
                epoch=t, psi=psi, losses=_mean_breakdown(epoch_parts),
                val_recall=report.recall, val_ndcg=report.ndcg,
            )
        )
        if report.recall > best_recall:
            best_recall = report.recall
            best_params = params.copy()
            history.best_epoch = t
        if epoch_callback is not None:
            epoch_callback(t, psi, params)

    return best_params, history
