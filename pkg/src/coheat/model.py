"""Embedding tables, the two graph views, and the coalesced prediction score.

The user-bundle view propagates over the user/bundle interaction graph; the
user-item view propagates over the user/item graph and mean-pools item rows
into bundle rows. The final score blends the two views' inner products with
a popularity weight gamma = tanh(n_b / psi) that an epoch-indexed temperature
psi = epsilon^(t/T) drives toward zero emphasis on the history view.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .bigraph import NormalizedBigraph, aggregate_layers, propagate
from .corpus import InteractionTable, PopularityIndex
from .errors import ConfigError, DataError, NumericalError

_CKPT_MAGIC = b"COHEAT1\x00"


@dataclass
class ModelParams:
    """The four trainable base tables; all float64, shared width d."""

    ub_user: np.ndarray  # U x d
    ub_bundle: np.ndarray  # B x d
    ui_user: np.ndarray  # U x d
    ui_item: np.ndarray  # I x d

    def __post_init__(self):
        widths = {t.shape[1] for t in self.tables()}
        if len(widths) != 1:
            raise DataError(f"embedding tables disagree on width: {sorted(widths)}")
        if self.ub_user.shape[0] != self.ui_user.shape[0]:
            raise DataError("user tables disagree on user count")
        for name, t in self.named_tables():
            if not np.isfinite(t).all():
                raise NumericalError(f"non-finite entries in table {name}")

    @property
    def d(self) -> int:
        return self.ub_user.shape[1]

    def tables(self) -> tuple[np.ndarray, ...]:
        return (self.ub_user, self.ub_bundle, self.ui_user, self.ui_item)

    def named_tables(self) -> tuple[tuple[str, np.ndarray], ...]:
        return (
            ("ub_user", self.ub_user),
            ("ub_bundle", self.ub_bundle),
            ("ui_user", self.ui_user),
            ("ui_item", self.ui_item),
        )

    def copy(self) -> "ModelParams":
        return ModelParams(*(t.copy() for t in self.tables()))

    def nbytes(self) -> int:
        return sum(t.nbytes for t in self.tables())


def init_params(u_count: int, b_count: int, i_count: int, d: int, rng: np.random.Generator) -> ModelParams:
    """Zero-mean Gaussian init with std 1/sqrt(d): initial inner products O(1)."""
    std = 1.0 / np.sqrt(d)
    return ModelParams(
        ub_user=rng.normal(0.0, std, size=(u_count, d)),
        ub_bundle=rng.normal(0.0, std, size=(b_count, d)),
        ui_user=rng.normal(0.0, std, size=(u_count, d)),
        ui_item=rng.normal(0.0, std, size=(i_count, d)),
    )


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    """Binary layout: magic 'COHEAT1\\0', four little-endian uint64 (U, B, I, d),
    then the four tables as row-major little-endian float64."""
    u = params.ub_user.shape[0]
    b = params.ub_bundle.shape[0]
    i = params.ui_item.shape[0]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<QQQQ", u, b, i, params.d))
        for t in params.tables():
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> ModelParams:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise DataError(f"{path}: bad checkpoint magic")
    u, b, i, d = struct.unpack_from("<QQQQ", raw, len(_CKPT_MAGIC))
    offset = len(_CKPT_MAGIC) + 32
    shapes = [(u, d), (b, d), (u, d), (i, d)]
    expected = offset + sum(r * c for r, c in shapes) * 8
    if len(raw) != expected:
        raise DataError(f"{path}: truncated checkpoint ({len(raw)} bytes, expected {expected})")
    tables = []
    for rows, cols in shapes:
        n = rows * cols * 8
        tables.append(np.frombuffer(raw[offset : offset + n], dtype="<f8").reshape(rows, cols).copy())
        offset += n
    return ModelParams(*tables)


def build_pooling(bi: InteractionTable) -> sp.csr_matrix:
    """B x I mean-pooling matrix: row b holds 1/|items(b)| on b's items."""
    sizes = np.bincount(bi.left_ids(), minlength=bi.n_left).astype(np.float64)
    empty = np.flatnonzero(sizes == 0)
    if empty.size:
        raise DataError(f"bundles without affiliated items: {empty.tolist()}")
    vals = 1.0 / sizes[bi.left_ids()]
    return sp.csr_matrix(
        (vals, (bi.left_ids(), bi.right_ids())), shape=(bi.n_left, bi.n_right), dtype=np.float64
    )


@dataclass(frozen=True)
class ViewEmbeddings:
    """Final (aggregated) embeddings of both views."""

    h_u: np.ndarray  # U x d, history view users
    h_b: np.ndarray  # B x d, history view bundles
    a_u: np.ndarray  # U x d, affiliation view users
    a_i: np.ndarray  # I x d, affiliation view items
    a_b: np.ndarray  # B x d, mean-pooled affiliation view bundles


def compute_views(
    params: ModelParams,
    ub_graph: NormalizedBigraph,
    ui_graph: NormalizedBigraph,
    pooling: sp.csr_matrix,
    K: int,
) -> ViewEmbeddings:
    h_u, h_b = aggregate_layers(propagate(ub_graph, params.ub_user, params.ub_bundle, K))
    a_u, a_i = aggregate_layers(propagate(ui_graph, params.ui_user, params.ui_item, K))
    a_b = pooling @ a_i
    return ViewEmbeddings(h_u=h_u, h_b=h_b, a_u=a_u, a_i=a_i, a_b=a_b)


def pair_scores(ve: ViewEmbeddings, u: int, b: int) -> tuple[float, float]:
    """Raw inner-product scores (h_ub, a_ub) of user u and bundle b."""
    if not (0 <= u < ve.h_u.shape[0]):
        raise DataError(f"user id {u} out of range [0, {ve.h_u.shape[0]})")
    if not (0 <= b < ve.h_b.shape[0]):
        raise DataError(f"bundle id {b} out of range [0, {ve.h_b.shape[0]})")
    return float(ve.h_u[u] @ ve.h_b[b]), float(ve.a_u[u] @ ve.a_b[b])


def temperature(t: float, T: float, epsilon: float) -> float:
    """psi = epsilon^(t/T), the heating schedule value at epoch t of T."""
    if epsilon <= 1.0:
        raise ConfigError(f"maximum temperature must exceed 1, got {epsilon}")
    if T <= 0:
        raise ConfigError(f"temperature horizon must be positive, got {T}")
    if not (0 <= t <= T):
        raise ConfigError(f"epoch {t} outside [0, {T}]")
    return float(epsilon ** (t / T))


@dataclass(frozen=True)
class CurriculumState:
    """Schedule position: epoch t of horizon T, max temperature, current psi."""

    t: float
    T: float
    epsilon: float
    psi: float

    @classmethod
    def at(cls, t: float, T: float, epsilon: float, variant: str = "full") -> "CurriculumState":
        psi = schedule_psi(variant, t, T, epsilon)
        return cls(t=t, T=T, epsilon=epsilon, psi=psi)


def schedule_psi(variant: str, t: float, T: float, epsilon: float) -> float:
    """Temperature at epoch t: the heating schedule, its reversal, or a constant."""
    if variant in ("full", "no_pc", "no_au"):
        return temperature(t, T, epsilon)
    if variant == "ch_ant":
        return temperature(T - t, T, epsilon)
    if variant == "ch_fix":
        if epsilon <= 1.0:
            raise ConfigError(f"maximum temperature must exceed 1, got {epsilon}")
        return float(epsilon)
    raise ConfigError(f"unknown variant {variant!r}")


def inference_psi(variant: str, epsilon: float) -> float:
    """Temperature used for scoring after training: the schedule's endpoint."""
    if variant == "ch_ant":
        return 1.0
    if epsilon <= 1.0:
        raise ConfigError(f"maximum temperature must exceed 1, got {epsilon}")
    return float(epsilon)


def gamma(n_b, psi):
    """Popularity weight tanh(n_b / psi); scalar or elementwise on arrays."""
    n_arr = np.asarray(n_b, dtype=np.float64)
    if np.any(n_arr < 0):
        raise ConfigError("interaction counts must be non-negative")
    if psi <= 0:
        raise ConfigError(f"temperature must be positive, got {psi}")
    out = np.tanh(n_arr / psi)
    return float(out) if np.isscalar(n_b) or n_arr.ndim == 0 else out


def predict(h_ub, a_ub, gamma_bt):
    """Coalesced score gamma*h_ub + (1-gamma)*a_ub.

    For gamma == 0 this returns a_ub bit-identically: the history term is an
    exact zero product and 1-gamma is exactly 1.
    """
    g = np.asarray(gamma_bt, dtype=np.float64)
    if np.any(g < 0) or np.any(g > 1):
        raise ConfigError("gamma must lie in [0, 1]")
    return gamma_bt * h_ub + (1.0 - gamma_bt) * a_ub


def rank_topk(
    ve: ViewEmbeddings,
    popularity: PopularityIndex,
    curriculum: CurriculumState,
    user: int,
    candidates: np.ndarray,
    mask: frozenset[tuple[int, int]] | set[tuple[int, int]] | None,
    k: int,
    gamma_override: float | None = None,
) -> np.ndarray:
    """Top-k candidate bundles for a user by coalesced score.

    Masked (user, bundle) training positives are removed from the candidate
    set before ranking. Ties break by ascending bundle id.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    cand = np.asarray(candidates, dtype=np.int64)
    if mask:
        keep = np.fromiter(((user, int(b)) not in mask for b in cand), dtype=bool, count=cand.size)
        cand = cand[keep]
    if cand.size == 0:
        raise DataError(f"empty candidate set for user {user}")
    if gamma_override is None:
        g = gamma(popularity.n[cand], curriculum.psi)
    else:
        g = np.full(cand.size, float(gamma_override))
    h_scores = ve.h_b[cand] @ ve.h_u[user]
    a_scores = ve.a_b[cand] @ ve.a_u[user]
    scores = predict(h_scores, a_scores, g)
    order = np.lexsort((cand, -scores))  # primary: score desc; tie: id asc
    return cand[order[:k]]
