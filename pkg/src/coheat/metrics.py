"""Recall@k, nDCG@k, and the per-scenario evaluation protocols.

Binary relevance, base-2 log discount, 1-based positions. Users with no
positives in the evaluated partition are skipped, not scored zero.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .corpus import PopularityIndex, ScenarioSplit
from .errors import ConfigError, DataError
from .model import CurriculumState, ViewEmbeddings, rank_topk

CANDIDATE_POLICIES = ("default", "cold-only", "all-masked")


def recall_at_k(ranked, relevant: set[int], k: int) -> float:
    """|top-k hits| / |relevant|."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if not relevant:
        raise DataError("recall undefined for an empty relevant set")
    hits = sum(1 for b in list(ranked)[:k] if b in relevant)
    return hits / len(relevant)


def ndcg_at_k(ranked, relevant: set[int], k: int) -> float:
    """DCG over hit positions 1/log2(p+1), normalized by the ideal prefix."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if not relevant:
        raise DataError("ndcg undefined for an empty relevant set")
    dcg = 0.0
    for p, b in enumerate(list(ranked)[:k], start=1):
        if b in relevant:
            dcg += 1.0 / math.log2(p + 1)
    idcg = 0.0
    for p in range(1, min(k, len(relevant)) + 1):
        idcg += 1.0 / math.log2(p + 1)
    return dcg / idcg


@dataclass(frozen=True)
class EvalReport:
    scenario: str
    partition: str
    k: int
    recall: float
    ndcg: float
    users_evaluated: int
    candidate_policy: dict

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(asdict(self), indent=2)
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            Path(path).write_text(text)
        return text

    def history_csv_row(self, epoch: int = 0, psi: float = float("nan")) -> str:
        # column layout matches the trainer history file
        return f"{epoch},{psi!r},,,,,,{self.recall!r},{self.ndcg!r}"


def _resolve_policy(scenario: str, policy: str) -> str:
    if policy not in CANDIDATE_POLICIES:
        raise ConfigError(f"candidate policy must be one of {CANDIDATE_POLICIES}, got {policy!r}")
    if policy != "default":
        return policy
    return "cold-only" if scenario == "cold" else "all-masked"


def evaluate(
    ve: ViewEmbeddings,
    popularity: PopularityIndex,
    curriculum: CurriculumState,
    split: ScenarioSplit,
    k: int = 20,
    partition: str = "test",
    policy: str = "default",
    gamma_override: float | None = None,
) -> EvalReport:
    """Rank per user under the scenario's candidate policy and average metrics.

    cold-only ranks the bundles without training interactions (nothing to
    mask); all-masked ranks every bundle minus the user's training positives.
    """
    if partition not in ("val", "test"):
        raise ConfigError(f"partition must be 'val' or 'test', got {partition!r}")
    table = split.val if partition == "val" else split.test
    resolved = _resolve_policy(split.scenario, policy)

    relevant_by_user: dict[int, set[int]] = {}
    for u, b in table.pairs.tolist():
        relevant_by_user.setdefault(u, set()).add(b)
    if not relevant_by_user:
        raise DataError(f"no evaluable user in partition {partition!r}")

    b_count = popularity.n.shape[0]
    if resolved == "cold-only":
        candidates = np.asarray(split.cold_bundles, dtype=np.int64)
        mask = None
    else:
        candidates = np.arange(b_count, dtype=np.int64)
        mask = split.train.pair_set()
    if candidates.size == 0:
        raise DataError(f"empty candidate set under policy {resolved!r}")

    recalls, ndcgs = [], []
    for u in sorted(relevant_by_user):
        rel = relevant_by_user[u]
        ranked = rank_topk(
            ve, popularity, curriculum, u, candidates, mask, k, gamma_override=gamma_override
        )
        recalls.append(recall_at_k(ranked.tolist(), rel, k))
        ndcgs.append(ndcg_at_k(ranked.tolist(), rel, k))

    return EvalReport(
        scenario=split.scenario,
        partition=partition,
        k=k,
        recall=float(np.mean(recalls)),
        ndcg=float(np.mean(ndcgs)),
        users_evaluated=len(recalls),
        candidate_policy={
            "policy": resolved,
            "candidates": int(candidates.size),
            "masked_train_positives": mask is not None,
            "psi": curriculum.psi,
            "gamma_override": gamma_override,
        },
    )


def random_recall_expectation(
    split: ScenarioSplit, k: int, partition: str = "test", policy: str = "default"
) -> float:
    """Analytic E[recall@k] of a uniformly random ranking: mean over evaluated
    users of k / |candidate set for that user| (capped at 1)."""
    resolved = _resolve_policy(split.scenario, policy)
    table = split.val if partition == "val" else split.test
    users = np.unique(table.left_ids())
    if users.size == 0:
        raise DataError(f"no evaluable user in partition {partition!r}")
    b_count = split.train.n_right
    if resolved == "cold-only":
        n_cand = np.full(users.size, split.cold_bundles.size, dtype=np.float64)
    else:
        train_counts = np.zeros(split.train.n_left, dtype=np.int64)
        np.add.at(train_counts, split.train.left_ids(), 1)
        n_cand = (b_count - train_counts[users]).astype(np.float64)
    return float(np.mean(np.minimum(k / n_cand, 1.0)))
