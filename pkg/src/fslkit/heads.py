"""Few-shot classifier heads.

Prototype head: class means of support embeddings, queries classified by a
softmax over negative squared Euclidean distances.

Propagation head: builds a similarity graph over all episode embeddings
(A_ij = exp(-d_ij^2 / sigma^2) off the diagonal, sigma^2 the population
variance of off-diagonal squared distances), symmetrically normalizes it,
and solves (I - alpha*L) P = I. Embeddings are smoothed as P @ Z; a second
graph built from the smoothed embeddings propagates the support one-hot
labels to the query (and unlabeled) rows.

Both heads have no learnable parameters of their own and are differentiable
end-to-end through the embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmath as dm

ALPHA_PROPAGATION = 0.2     # scaling of the normalized Laplacian in the solve
SIGMA_FLOOR = 1e-12         # below this variance the graph degenerates to complete
DEGREE_EPS = 1e-12          # isolated-node protection before the inverse sqrt


@dataclass(frozen=True)
class ProtoState:
    """Fitted prototypes (ways x embed_dim) and per-class support counts."""

    prototypes: dm.DiffValue
    support_counts: np.ndarray
    support_sums: dm.DiffValue

    @property
    def ways(self) -> int:
        return self.prototypes.shape[0]


@dataclass(frozen=True)
class EPGraph:
    """One propagation stage: adjacency, normalized Laplacian, propagator."""

    adjacency: dm.DiffValue
    laplacian: dm.DiffValue
    propagator: dm.DiffValue
    alpha: float

    @property
    def size(self) -> int:
        return self.adjacency.shape[0]


def proto_fit(support_z: dm.DiffValue, support_y, ways: int) -> ProtoState:
    """Average support embeddings per class."""
    y = np.asarray(support_y, dtype=np.int64)
    if support_z.value.ndim != 2 or y.shape != (support_z.shape[0],):
        raise ValueError("proto_fit: support embeddings and labels disagree")
    counts = np.bincount(y, minlength=ways).astype(np.float64)
    if y.size == 0 or np.any(counts == 0):
        raise ValueError("proto_fit: every class needs at least one support item")
    assign = np.zeros((ways, y.size), dtype=np.float64)
    assign[y, np.arange(y.size)] = 1.0
    sums = dm.matmul(dm.constant(assign), support_z)
    prototypes = dm.scale_rows(sums, dm.constant(1.0 / counts))
    return ProtoState(prototypes=prototypes, support_counts=counts, support_sums=sums)


def proto_predict(query_z: dm.DiffValue, state: ProtoState) -> dm.DiffValue:
    """Softmax over negative squared distances to the prototypes."""
    if query_z.shape[1] != state.prototypes.shape[1]:
        raise ValueError("proto_predict: embedding dimension mismatch")
    d2 = dm.cross_sq_dist(query_z, state.prototypes)
    return scores_to_probabilities(dm.scale(d2, -1.0))


def scores_to_probabilities(scores: dm.DiffValue) -> dm.DiffValue:
    """Single place where class scores become distributions (row softmax)."""
    return dm.row_softmax(scores)


def ep_adjacency(z: dm.DiffValue) -> dm.DiffValue:
    """Similarity graph over embedding rows; zero diagonal.

    sigma^2 is the population variance of the off-diagonal squared
    distances. If it degenerates (all embeddings near-identical) the graph
    falls back to the complete graph with unit weights.
    """
    if z.value.ndim != 2 or z.shape[0] < 2:
        raise ValueError("ep_adjacency: need at least 2 embeddings")
    n = z.shape[0]
    offdiag = 1.0 - np.eye(n)
    d2 = dm.pairwise_sq_dist(z)
    sigma2 = dm.offdiag_variance(d2)
    if float(sigma2.value) < SIGMA_FLOOR:
        return dm.constant(offdiag)
    return dm.mul_const(dm.exp(dm.div_scalar(dm.scale(d2, -1.0), sigma2)), offdiag)


def _normalized_laplacian(a: dm.DiffValue) -> dm.DiffValue:
    degrees = dm.sum_axis1(a)
    dinv_sqrt = dm.powf(dm.add_scalar(degrees, DEGREE_EPS), -0.5)
    return dm.scale_cols(dm.scale_rows(a, dinv_sqrt), dinv_sqrt)


def ep_propagator(a: dm.DiffValue, alpha: float = ALPHA_PROPAGATION) -> dm.DiffValue:
    """P solving (I - alpha * L) P = I with L the normalized adjacency."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must lie in [0, 1)")
    n = a.shape[0]
    lap = _normalized_laplacian(a)
    system = dm.sub(dm.constant(np.eye(n)), dm.scale(lap, alpha))
    return dm.linear_solve(system, dm.constant(np.eye(n)))


def ep_build_graph(z: dm.DiffValue, alpha: float = ALPHA_PROPAGATION) -> EPGraph:
    a = ep_adjacency(z)
    lap = _normalized_laplacian(a)
    n = a.shape[0]
    system = dm.sub(dm.constant(np.eye(n)), dm.scale(lap, alpha))
    propagator = dm.linear_solve(system, dm.constant(np.eye(n)))
    return EPGraph(adjacency=a, laplacian=lap, propagator=propagator, alpha=alpha)


def ep_embed_propagate(z: dm.DiffValue, alpha: float = ALPHA_PROPAGATION) -> dm.DiffValue:
    """Smooth embeddings over their own similarity graph."""
    graph = ep_build_graph(z, alpha)
    return dm.matmul(graph.propagator, z)


def ep_predict(
    z: dm.DiffValue,
    support_y,
    ways: int,
    n_query: int,
    alpha: float = ALPHA_PROPAGATION,
) -> dm.DiffValue:
    """Label propagation over [support; query; unlabeled] embedding rows.

    Embeddings are smoothed first; a second graph built from the smoothed
    embeddings propagates the support one-hots (zero rows elsewhere).
    Returns class probabilities for the query rows.
    """
    y = np.asarray(support_y, dtype=np.int64)
    n_support = y.size
    n = z.shape[0]
    if n_support + n_query > n:
        raise ValueError("ep_predict: more support+query rows than embeddings")
    present = np.unique(y)
    if len(present) != ways or present.min() != 0 or present.max() != ways - 1:
        raise ValueError("ep_predict: every class needs at least one support item")
    z_bar = ep_embed_propagate(z, alpha)
    graph = ep_build_graph(z_bar, alpha)
    labels = np.zeros((n, ways), dtype=np.float64)
    labels[:n_support] = dm.onehot(y, ways)
    scores = dm.matmul(graph.propagator, dm.constant(labels))
    query_scores = dm.slice_rows(scores, n_support, n_support + n_query)
    return scores_to_probabilities(query_scores)


def semiproto_refine(state: ProtoState, unlabeled_z: dm.DiffValue) -> ProtoState:
    """One soft-assignment refinement of the prototypes.

    Each unlabeled embedding contributes to every prototype with weight
    equal to its predicted class probability: the new prototype j is
    (sum of class-j support + sum_u p_j(u) z_u) / (|S_j| + sum_u p_j(u)).
    """
    if unlabeled_z.shape[0] == 0:
        return state
    p = proto_predict(unlabeled_z, state)
    weighted = dm.matmul(dm.transpose(p), unlabeled_z)
    soft_counts = dm.sum_axis0(p)
    numer = dm.add(state.support_sums, weighted)
    denom = dm.add(dm.constant(state.support_counts), soft_counts)
    prototypes = dm.scale_rows(numer, dm.powf(denom, -1.0))
    return ProtoState(
        prototypes=prototypes,
        support_counts=state.support_counts,
        support_sums=state.support_sums,
    )
