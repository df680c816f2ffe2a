"""Symmetric-normalized bipartite graphs and linear K-layer propagation.

The propagation alternates sides: layer-k left rows are coefficient-weighted
sums of layer-(k-1) right rows and vice versa, with edge coefficients
1/(sqrt(deg_left) * sqrt(deg_right)). Aggregation weights layer k by 1/(k+1).
The whole map is linear, so the exact adjoint is propagation through the
transposed operator with the same layer weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .corpus import InteractionTable


@dataclass(frozen=True)
class NormalizedBigraph:
    """CSR adjacency in both directions; transpose stored explicitly because
    adjoint propagation sits on the training hot path."""

    l2r: sp.csr_matrix  # (n_left, n_right)
    r2l: sp.csr_matrix  # (n_right, n_left)
    n_left: int
    n_right: int


@dataclass(frozen=True)
class LayerStack:
    """Per-layer embeddings for both sides, layers 0..K (K+1 entries)."""

    left: list[np.ndarray]
    right: list[np.ndarray]

    @property
    def depth(self) -> int:
        return len(self.left) - 1


def build_normalized(edges: InteractionTable) -> NormalizedBigraph:
    """Edge (l, r) gets coefficient 1/(sqrt(deg(l)) * sqrt(deg(r))).

    Isolated nodes simply have empty rows; no degree ever divides by zero
    because an edge gives both endpoints degree >= 1.
    """
    l = edges.left_ids()
    r = edges.right_ids()
    deg_l = np.bincount(l, minlength=edges.n_left).astype(np.float64)
    deg_r = np.bincount(r, minlength=edges.n_right).astype(np.float64)
    coeff = 1.0 / np.sqrt(deg_l[l] * deg_r[r]) if len(edges) else np.zeros(0)
    l2r = sp.csr_matrix((coeff, (l, r)), shape=(edges.n_left, edges.n_right), dtype=np.float64)
    r2l = sp.csr_matrix(l2r.T)
    return NormalizedBigraph(l2r=l2r, r2l=r2l, n_left=edges.n_left, n_right=edges.n_right)


def _check_inputs(g: NormalizedBigraph, left0: np.ndarray, right0: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    left0 = np.asarray(left0, dtype=np.float64)
    right0 = np.asarray(right0, dtype=np.float64)
    if left0.ndim != 2 or right0.ndim != 2 or left0.shape[1] != right0.shape[1]:
        raise ValueError(
            f"embedding width mismatch: left {left0.shape}, right {right0.shape}"
        )
    if left0.shape[0] != g.n_left or right0.shape[0] != g.n_right:
        raise ValueError(
            f"row-count mismatch: graph is {g.n_left}x{g.n_right}, "
            f"got left {left0.shape[0]} rows, right {right0.shape[0]} rows"
        )
    return left0, right0


def propagate(g: NormalizedBigraph, left0: np.ndarray, right0: np.ndarray, K: int) -> LayerStack:
    """Run K alternating propagation layers in double precision."""
    left0, right0 = _check_inputs(g, left0, right0)
    lefts, rights = [left0], [right0]
    for _ in range(K):
        lefts.append(g.l2r @ rights[-1])
        rights.append(g.r2l @ lefts[-2])
    return LayerStack(left=lefts, right=rights)


def _layer_weights(K: int, weights: Sequence[float] | None) -> np.ndarray:
    if weights is None:
        return 1.0 / (np.arange(K + 1, dtype=np.float64) + 1.0)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (K + 1,):
        raise ValueError(f"expected {K + 1} layer weights, got shape {w.shape}")
    return w


def aggregate_layers(
    stack: LayerStack, weights: Sequence[float] | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Combine layers as sum_k stack[k] * w_k with default w_k = 1/(k+1)."""
    w = _layer_weights(stack.depth, weights)
    left = sum(w[k] * stack.left[k] for k in range(stack.depth + 1))
    right = sum(w[k] * stack.right[k] for k in range(stack.depth + 1))
    return left, right


def propagate_final(
    g: NormalizedBigraph,
    left0: np.ndarray,
    right0: np.ndarray,
    K: int,
    weights: Sequence[float] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    return aggregate_layers(propagate(g, left0, right0, K), weights)


def propagate_adjoint(
    g: NormalizedBigraph,
    grad_final_left: np.ndarray,
    grad_final_right: np.ndarray,
    K: int,
    weights: Sequence[float] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradient of propagate_final w.r.t. the base tables.

    Given dL/d(final_left), dL/d(final_right), returns dL/d(left0),
    dL/d(right0). Layer k feeds layer k+1 of the opposite side, so the
    reverse sweep applies the forward operators to the opposite gradients.
    """
    gl_fin, gr_fin = _check_inputs(g, grad_final_left, grad_final_right)
    w = _layer_weights(K, weights)
    gl = w[K] * gl_fin  # dL/d(left_K)
    gr = w[K] * gr_fin
    for k in range(K - 1, -1, -1):
        gl, gr = w[k] * gl_fin + g.l2r @ gr, w[k] * gr_fin + g.r2l @ gl
    return gl, gr
