"""Loss terms and their exact analytic gradients w.r.t. the base tables.

Everything downstream of the base tables is differentiated by hand: the
ranking loss and the blend feed plain product-rule terms, the contrastive
terms backpropagate through row normalization, mean pooling distributes a
bundle gradient equally over its items, and both views finish with the
adjoint of the linear propagation. The popularity weight gamma is schedule
data, not a parameter: no gradient flows into it.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .bigraph import NormalizedBigraph, build_normalized, propagate_adjoint
from .corpus import PopularityIndex, make_table, popularity_counts
from .errors import ConfigError, DataError, NumericalError
from .model import (
    CurriculumState,
    ModelParams,
    build_pooling,
    compute_views,
    gamma,
    init_params,
)

_L2_FORMS = ("squared", "norm")


@dataclass(frozen=True)
class TrainBatch:
    """Ranking triplets plus the deduplicated id lists they touch."""

    users: np.ndarray  # (m,) int64
    pos: np.ndarray  # (m,) positive bundles
    neg: np.ndarray  # (m,) negative bundles
    unique_users: np.ndarray = field(init=False)
    unique_bundles: np.ndarray = field(init=False)

    def __post_init__(self):
        if not (self.users.shape == self.pos.shape == self.neg.shape):
            raise DataError("triplet arrays must share shape")
        object.__setattr__(self, "unique_users", np.unique(self.users))
        object.__setattr__(self, "unique_bundles", np.unique(np.concatenate([self.pos, self.neg])))

    def __len__(self) -> int:
        return self.users.shape[0]


@dataclass(frozen=True)
class LossBreakdown:
    bpr: float
    align: float
    uniform: float
    au: float  # align + uniform
    l2: float
    total: float


@dataclass
class Gradients:
    """Same four-table shape as ModelParams."""

    ub_user: np.ndarray
    ub_bundle: np.ndarray
    ui_user: np.ndarray
    ui_item: np.ndarray

    def tables(self) -> tuple[np.ndarray, ...]:
        return (self.ub_user, self.ub_bundle, self.ui_user, self.ui_item)

    def named_tables(self) -> tuple[tuple[str, np.ndarray], ...]:
        return (
            ("ub_user", self.ub_user),
            ("ub_bundle", self.ub_bundle),
            ("ui_user", self.ui_user),
            ("ui_item", self.ui_item),
        )

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "Gradients":
        return cls(*(np.zeros_like(t) for t in params.tables()))


def normalize_rows(rows: np.ndarray, ids: np.ndarray | None = None) -> np.ndarray:
    """Scale each row to unit Euclidean norm; a zero row is a hard error."""
    rows = np.asarray(rows, dtype=np.float64)
    norms = np.linalg.norm(rows, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        which = ids[zero].tolist() if ids is not None else zero.tolist()
        raise NumericalError(f"zero-norm embedding rows (collapsed) for ids {which}")
    return rows / norms[:, None]


def _normalize_with_norms(rows: np.ndarray, ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    rows = np.asarray(rows, dtype=np.float64)
    norms = np.linalg.norm(rows, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise NumericalError(f"zero-norm embedding rows (collapsed) for ids {ids[zero].tolist()}")
    return rows / norms[:, None], norms


def _normalize_backward(grad_unit: np.ndarray, unit: np.ndarray, norms: np.ndarray) -> np.ndarray:
    # d(x/|x|) pullback: (g - (g.x_hat) x_hat) / |x|
    proj = np.sum(grad_unit * unit, axis=1, keepdims=True)
    return (grad_unit - proj * unit) / norms[:, None]


def align_loss(hu_n: np.ndarray, au_n: np.ndarray, hb_n: np.ndarray, ab_n: np.ndarray) -> float:
    """Mean squared distance between the views, users plus bundles."""
    total = 0.0
    if hu_n.shape[0]:
        total += float(np.mean(np.sum((hu_n - au_n) ** 2, axis=1)))
    if hb_n.shape[0]:
        total += float(np.mean(np.sum((hb_n - ab_n) ** 2, axis=1)))
    return total


def _uniform_term(x: np.ndarray) -> float:
    # log of the mean Gaussian kernel over ordered distinct-row pairs
    n = x.shape[0]
    sq = np.sum(x * x, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.fill_diagonal(d2, 0.0)
    w = np.exp(-2.0 * np.maximum(d2, 0.0))
    np.fill_diagonal(w, 0.0)
    return float(np.log(w.sum() / (n * (n - 1))))


def uniform_loss(hu_n: np.ndarray, au_n: np.ndarray, hb_n: np.ndarray, ab_n: np.ndarray) -> float:
    """Four log-mean-kernel terms: users and bundles, each view.

    A family with fewer than two unique rows contributes 0 with a warning.
    """
    total = 0.0
    for label, x in (("user", hu_n), ("user", au_n), ("bundle", hb_n), ("bundle", ab_n)):
        if x.shape[0] < 2:
            warnings.warn(f"uniformity term skipped: fewer than 2 unique {label}s in batch")
            continue
        total += _uniform_term(x)
    return total


def au_loss(align: float, uniform: float) -> float:
    return align + uniform


def bpr_loss(pos_scores: np.ndarray, neg_scores: np.ndarray) -> float:
    """Mean -ln sigma(pos - neg) via the stable softplus form."""
    pos_scores = np.asarray(pos_scores, dtype=np.float64)
    neg_scores = np.asarray(neg_scores, dtype=np.float64)
    if not (np.isfinite(pos_scores).all() and np.isfinite(neg_scores).all()):
        raise NumericalError("non-finite prediction scores in ranking loss")
    x = pos_scores - neg_scores
    return float(np.mean(np.logaddexp(0.0, -x)))


def l2_term(params: ModelParams, form: str = "squared") -> float:
    """Parameter penalty: half squared Frobenius norm, or the plain norm."""
    if form not in _L2_FORMS:
        raise ConfigError(f"l2_form must be one of {_L2_FORMS}, got {form!r}")
    sq = sum(float(np.sum(t * t)) for t in params.tables())
    return 0.5 * sq if form == "squared" else float(np.sqrt(sq))


def total_loss(
    bpr: float,
    align: float,
    uniform: float,
    lambda1: float,
    lambda2: float,
    params: ModelParams,
    l2_form: str = "squared",
) -> LossBreakdown:
    if lambda1 < 0 or lambda2 < 0:
        raise ConfigError("loss weights must be non-negative")
    au = au_loss(align, uniform)
    l2 = l2_term(params, l2_form)
    return LossBreakdown(
        bpr=bpr, align=align, uniform=uniform, au=au, l2=l2,
        total=bpr + lambda1 * au + lambda2 * l2,
    )


def _gamma_for(
    bundles: np.ndarray,
    popularity: PopularityIndex,
    curriculum: CurriculumState,
    gamma_override: float | None,
) -> np.ndarray:
    if gamma_override is not None:
        return np.full(bundles.shape[0], float(gamma_override))
    return gamma(popularity.n[bundles], curriculum.psi)


def _forward_backward(
    params: ModelParams,
    ub_graph: NormalizedBigraph,
    ui_graph: NormalizedBigraph,
    pooling: sp.csr_matrix,
    batch: TrainBatch,
    curriculum: CurriculumState,
    popularity: PopularityIndex,
    lambda1: float,
    lambda2: float,
    K: int,
    l2_form: str = "squared",
    gamma_override: float | None = None,
    want_grads: bool = True,
) -> tuple[LossBreakdown, Gradients | None]:
    ve = compute_views(params, ub_graph, ui_graph, pooling, K)
    m = len(batch)
    if m == 0:
        raise DataError("empty training batch")
    users, pos, neg = batch.users, batch.pos, batch.neg
    g_pos = _gamma_for(pos, popularity, curriculum, gamma_override)
    g_neg = _gamma_for(neg, popularity, curriculum, gamma_override)

    hu_rows = ve.h_u[users]
    au_rows = ve.a_u[users]
    y_pos = g_pos * np.sum(hu_rows * ve.h_b[pos], axis=1) + (1.0 - g_pos) * np.sum(
        au_rows * ve.a_b[pos], axis=1
    )
    y_neg = g_neg * np.sum(hu_rows * ve.h_b[neg], axis=1) + (1.0 - g_neg) * np.sum(
        au_rows * ve.a_b[neg], axis=1
    )
    bpr = bpr_loss(y_pos, y_neg)

    align = uniform = 0.0
    norm_cache = None
    if lambda1 > 0.0:
        uu, ub = batch.unique_users, batch.unique_bundles
        hu_n, hu_r = _normalize_with_norms(ve.h_u[uu], uu)
        au_n, au_r = _normalize_with_norms(ve.a_u[uu], uu)
        hb_n, hb_r = _normalize_with_norms(ve.h_b[ub], ub)
        ab_n, ab_r = _normalize_with_norms(ve.a_b[ub], ub)
        align = align_loss(hu_n, au_n, hb_n, ab_n)
        uniform = uniform_loss(hu_n, au_n, hb_n, ab_n)
        norm_cache = (hu_n, hu_r, au_n, au_r, hb_n, hb_r, ab_n, ab_r)

    breakdown = total_loss(bpr, align, uniform, lambda1, lambda2, params, l2_form)
    if not want_grads:
        return breakdown, None

    # ranking-loss pullback: d mean softplus(-(y+ - y-)) / d y+ = -sigma(-x)/m
    x = y_pos - y_neg
    c = -expit(-x) / m

    G_hu = np.zeros_like(ve.h_u)
    G_hb = np.zeros_like(ve.h_b)
    G_au = np.zeros_like(ve.a_u)
    G_ab = np.zeros_like(ve.a_b)
    cg_p = (c * g_pos)[:, None]
    cg_n = (c * g_neg)[:, None]
    ca_p = (c * (1.0 - g_pos))[:, None]
    ca_n = (c * (1.0 - g_neg))[:, None]
    np.add.at(G_hu, users, cg_p * ve.h_b[pos] - cg_n * ve.h_b[neg])
    np.add.at(G_hb, pos, cg_p * hu_rows)
    np.add.at(G_hb, neg, -cg_n * hu_rows)
    np.add.at(G_au, users, ca_p * ve.a_b[pos] - ca_n * ve.a_b[neg])
    np.add.at(G_ab, pos, ca_p * au_rows)
    np.add.at(G_ab, neg, -ca_n * au_rows)

    if lambda1 > 0.0:
        uu, ub = batch.unique_users, batch.unique_bundles
        hu_n, hu_r, au_n, au_r, hb_n, hb_r, ab_n, ab_r = norm_cache
        g_hu_n = np.zeros_like(hu_n)
        g_au_n = np.zeros_like(au_n)
        g_hb_n = np.zeros_like(hb_n)
        g_ab_n = np.zeros_like(ab_n)
        if uu.size:
            diff = (2.0 * lambda1 / uu.size) * (hu_n - au_n)
            g_hu_n += diff
            g_au_n -= diff
        if ub.size:
            diff = (2.0 * lambda1 / ub.size) * (hb_n - ab_n)
            g_hb_n += diff
            g_ab_n -= diff
        for x_n, g_n in ((hu_n, g_hu_n), (au_n, g_au_n), (hb_n, g_hb_n), (ab_n, g_ab_n)):
            if x_n.shape[0] >= 2:
                g_n += lambda1 * _uniform_term_grad(x_n)
        np.add.at(G_hu, uu, _normalize_backward(g_hu_n, hu_n, hu_r))
        np.add.at(G_au, uu, _normalize_backward(g_au_n, au_n, au_r))
        np.add.at(G_hb, ub, _normalize_backward(g_hb_n, hb_n, hb_r))
        np.add.at(G_ab, ub, _normalize_backward(g_ab_n, ab_n, ab_r))

    # pooling adjoint: a bundle's gradient splits equally over its items
    G_ai = pooling.T @ G_ab

    grads = Gradients.zeros_like(params)
    grads.ub_user, grads.ub_bundle = propagate_adjoint(ub_graph, G_hu, G_hb, K)
    grads.ui_user, grads.ui_item = propagate_adjoint(ui_graph, G_au, G_ai, K)

    if lambda2 > 0.0:
        if l2_form == "squared":
            for g_t, p_t in zip(grads.tables(), params.tables()):
                g_t += lambda2 * p_t
        else:
            r = l2_term(params, "norm")
            if r > 0.0:
                for g_t, p_t in zip(grads.tables(), params.tables()):
                    g_t += (lambda2 / r) * p_t
    return breakdown, grads


def _uniform_term_grad(x: np.ndarray) -> np.ndarray:
    # d/dx_i log S with S the mean kernel over ordered distinct pairs:
    # -(8 / (S n(n-1))) * sum_{j != i} w_ij (x_i - x_j)
    n = x.shape[0]
    sq = np.sum(x * x, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.fill_diagonal(d2, 0.0)
    w = np.exp(-2.0 * np.maximum(d2, 0.0))
    np.fill_diagonal(w, 0.0)
    s_total = w.sum()
    rowsum = w.sum(axis=1)
    return (-8.0 / s_total) * (rowsum[:, None] * x - w @ x)


def batch_objective(
    params: ModelParams,
    ub_graph: NormalizedBigraph,
    ui_graph: NormalizedBigraph,
    pooling: sp.csr_matrix,
    batch: TrainBatch,
    curriculum: CurriculumState,
    popularity: PopularityIndex,
    lambda1: float,
    lambda2: float,
    K: int,
    l2_form: str = "squared",
    gamma_override: float | None = None,
) -> tuple[LossBreakdown, Gradients]:
    """Loss breakdown and analytic gradients in one forward/backward pass."""
    breakdown, grads = _forward_backward(
        params, ub_graph, ui_graph, pooling, batch, curriculum, popularity,
        lambda1, lambda2, K, l2_form, gamma_override, want_grads=True,
    )
    return breakdown, grads


def analytic_gradients(
    params: ModelParams,
    ub_graph: NormalizedBigraph,
    ui_graph: NormalizedBigraph,
    pooling: sp.csr_matrix,
    batch: TrainBatch,
    curriculum: CurriculumState,
    popularity: PopularityIndex,
    lambda1: float,
    lambda2: float,
    K: int,
    l2_form: str = "squared",
    gamma_override: float | None = None,
) -> Gradients:
    _, grads = _forward_backward(
        params, ub_graph, ui_graph, pooling, batch, curriculum, popularity,
        lambda1, lambda2, K, l2_form, gamma_override, want_grads=True,
    )
    return grads


def batch_loss_only(
    params: ModelParams,
    ub_graph: NormalizedBigraph,
    ui_graph: NormalizedBigraph,
    pooling: sp.csr_matrix,
    batch: TrainBatch,
    curriculum: CurriculumState,
    popularity: PopularityIndex,
    lambda1: float,
    lambda2: float,
    K: int,
    l2_form: str = "squared",
    gamma_override: float | None = None,
) -> LossBreakdown:
    breakdown, _ = _forward_backward(
        params, ub_graph, ui_graph, pooling, batch, curriculum, popularity,
        lambda1, lambda2, K, l2_form, gamma_override, want_grads=False,
    )
    return breakdown


def finite_diff_gradients(
    loss_fn: Callable[[ModelParams], float], params: ModelParams, step: float
) -> Gradients:
    """Central differences of a scalar loss over every table coordinate."""
    if step <= 0:
        raise ConfigError(f"finite-difference step must be positive, got {step}")
    grads = Gradients.zeros_like(params)
    work = params.copy()
    for g_t, w_t in zip(grads.tables(), work.tables()):
        flat_w = w_t.reshape(-1)
        flat_g = g_t.reshape(-1)
        for idx in range(flat_w.size):
            orig = flat_w[idx]
            flat_w[idx] = orig + step
            up = loss_fn(work)
            flat_w[idx] = orig - step
            down = loss_fn(work)
            flat_w[idx] = orig
            flat_g[idx] = (up - down) / (2.0 * step)
    return grads


def _relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> np.ndarray:
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    mask = np.abs(analytic) > floor
    out = np.zeros_like(analytic)
    out[mask] = np.abs(analytic[mask] - numeric[mask]) / scale[mask]
    return out[mask]


def finite_diff_check(
    params: ModelParams,
    ub_graph: NormalizedBigraph,
    ui_graph: NormalizedBigraph,
    pooling: sp.csr_matrix,
    batch: TrainBatch,
    curriculum: CurriculumState,
    popularity: PopularityIndex,
    lambda1: float,
    lambda2: float,
    K: int,
    step: float = 1e-5,
    grad_floor: float = 1e-8,
    l2_form: str = "squared",
    gamma_override: float | None = None,
) -> dict:
    """Compare analytic gradients of the total loss against central differences.

    Returns per-table max/mean relative error over coordinates whose analytic
    gradient magnitude exceeds grad_floor.
    """
    analytic = analytic_gradients(
        params, ub_graph, ui_graph, pooling, batch, curriculum, popularity,
        lambda1, lambda2, K, l2_form, gamma_override,
    )

    def loss_fn(p: ModelParams) -> float:
        return batch_loss_only(
            p, ub_graph, ui_graph, pooling, batch, curriculum, popularity,
            lambda1, lambda2, K, l2_form, gamma_override,
        ).total

    numeric = finite_diff_gradients(loss_fn, params, step)
    report: dict = {
        "step": step,
        "grad_floor": grad_floor,
        "dims": {
            "users": params.ub_user.shape[0],
            "bundles": params.ub_bundle.shape[0],
            "items": params.ui_item.shape[0],
            "d": params.d,
            "K": K,
        },
        "tables": {},
    }
    overall = 0.0
    for (name, a_t), (_, n_t) in zip(analytic.named_tables(), numeric.named_tables()):
        errs = _relative_errors(a_t, n_t, grad_floor)
        max_err = float(errs.max()) if errs.size else 0.0
        report["tables"][name] = {
            "max_rel_err": max_err,
            "mean_rel_err": float(errs.mean()) if errs.size else 0.0,
            "checked_coords": int(errs.size),
        }
        overall = max(overall, max_err)
    report["max_rel_err"] = overall
    return report


def builtin_instance(seed: int = 0) -> dict:
    """The built-in 5-user/4-bundle/6-item gradcheck instance.

    Random sparse graphs, every bundle with at least one item, a handful of
    valid ranking triplets, and a mid-schedule temperature so the popularity
    weights are strictly inside (0, 1).
    """
    rng = np.random.default_rng(seed)
    u_count, b_count, i_count, d, K = 5, 4, 6, 8, 2

    ub_rows = {(int(u), int(b)) for u, b in zip(rng.integers(0, u_count, 9), rng.integers(0, b_count, 9))}
    ub = make_table(sorted(ub_rows), u_count, b_count)
    ui_rows = {(int(u), int(i)) for u, i in zip(rng.integers(0, u_count, 12), rng.integers(0, i_count, 12))}
    ui = make_table(sorted(ui_rows), u_count, i_count)
    bi_rows = set()
    for b in range(b_count):
        items = rng.choice(i_count, size=int(rng.integers(1, 4)), replace=False)
        bi_rows.update((b, int(i)) for i in items)
    bi = make_table(sorted(bi_rows), b_count, i_count)

    pair_set = ub.pair_set()
    warm = np.unique(ub.right_ids())
    users, pos, neg = [], [], []
    pairs = ub.pairs
    for _ in range(32):
        if len(users) >= 6:
            break
        u, b_pos = pairs[rng.integers(0, len(ub))]
        b_neg = warm[rng.integers(0, warm.size)]
        if (int(u), int(b_neg)) not in pair_set:
            users.append(int(u))
            pos.append(int(b_pos))
            neg.append(int(b_neg))
    batch = TrainBatch(
        users=np.asarray(users, dtype=np.int64),
        pos=np.asarray(pos, dtype=np.int64),
        neg=np.asarray(neg, dtype=np.int64),
    )

    return {
        "params": init_params(u_count, b_count, i_count, d, rng),
        "ub_graph": build_normalized(ub),
        "ui_graph": build_normalized(ui),
        "pooling": build_pooling(bi),
        "batch": batch,
        "curriculum": CurriculumState.at(t=5, T=10, epsilon=1e2),
        "popularity": popularity_counts(ub),
        "lambda1": 0.5,
        "lambda2": 1e-4,
        "K": K,
    }


def run_gradcheck(seed: int = 0, step: float = 1e-5, out_path: str | Path | None = None) -> dict:
    """Run the built-in instance through finite_diff_check; optional JSON dump."""
    inst = builtin_instance(seed)
    report = finite_diff_check(
        inst["params"], inst["ub_graph"], inst["ui_graph"], inst["pooling"],
        inst["batch"], inst["curriculum"], inst["popularity"],
        inst["lambda1"], inst["lambda2"], inst["K"], step=step,
    )
    report["seed"] = seed
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(json.dumps(report, indent=2))
    return report
