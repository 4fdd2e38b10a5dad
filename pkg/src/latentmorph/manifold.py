"""Laplacian Eigenmaps: kNN graph, graph Laplacian and a Jacobi eigensolver."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

logger = logging.getLogger(__name__)

MIN_WEIGHT = 1e-300
DEFLATION_SHIFT = 4.0  # above the spectrum of the normalized Laplacian (<= 2)


class ConvergenceError(RuntimeError):
    pass


class DisconnectedGraphError(ValueError):
    pass


@dataclass
class NeighborGraph:
    n: int
    k: int
    weights: np.ndarray  # dense symmetric [n, n], zero where there is no edge

    @property
    def edges(self) -> list:
        i, j = np.nonzero(np.triu(self.weights))
        return [(int(a), int(b), float(self.weights[a, b])) for a, b in zip(i, j)]

    def edge_set(self) -> set:
        return {(a, b) for a, b, _ in self.edges}


@dataclass
class Embedding2D:
    coords: np.ndarray
    eigenvalues: np.ndarray
    residuals: np.ndarray = None
    source: np.ndarray = None


def _sq_distances(points: np.ndarray) -> np.ndarray:
    sq = np.sum(points**2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * points @ points.T
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return d2


def _components(adj: np.ndarray) -> np.ndarray:
    n = adj.shape[0]
    comp = np.full(n, -1)
    label = 0
    for start in range(n):
        if comp[start] >= 0:
            continue
        stack = [start]
        comp[start] = label
        while stack:
            u = stack.pop()
            for v in np.nonzero(adj[u])[0]:
                if comp[v] < 0:
                    comp[v] = label
                    stack.append(v)
        label += 1
    return comp


def knn_graph(points, k: int = 10, weights: str = "heat", bandwidth: Optional[float] = None) -> NeighborGraph:
    """Symmetrized (union) Euclidean kNN graph.

    Heat weights use ``exp(-d^2 / (2 s^2))`` with ``s = bandwidth``, or the
    median kNN distance of ``points`` when no bandwidth is given. Exact duplicates share one neighborhood (the k nearest distinct
    locations) and are joined to each other with weight 1, so copies of a
    point are interchangeable. A disconnected result is repaired by
    repeatedly adding the shortest edge between two different components.
    """
    X = np.asarray(points, dtype=np.float64)
    n = X.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"need 1 <= k < n, got k={k}, n={n}")
    if weights not in ("heat", "binary"):
        raise ValueError(f"unknown weight mode {weights!r}")
    _, first, inverse = np.unique(X, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first)  # distinct locations in order of first appearance
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    group = rank[inverse.reshape(-1)]
    reps = X[first[order]]
    m = reps.shape[0]

    d2 = _sq_distances(reps)
    rep_adj = np.zeros((m, m), dtype=bool)
    k_eff = min(k, m - 1)
    knn_d = np.zeros(0)
    if k_eff > 0:
        masked = d2.copy()
        np.fill_diagonal(masked, np.inf)
        # stable sort keeps ties in index order, so results are deterministic
        nbrs = np.argsort(masked, axis=1, kind="stable")[:, :k_eff]
        rep_adj[np.repeat(np.arange(m), k_eff), nbrs.reshape(-1)] = True
        rep_adj |= rep_adj.T
        knn_d = np.sqrt(np.take_along_axis(d2, nbrs, axis=1))

    comp = _components(rep_adj)
    while comp.max() > 0:
        cross = np.where(comp[:, None] != comp[None, :], d2, np.inf)
        i, j = np.unravel_index(np.argmin(cross), cross.shape)
        logger.debug("connecting components %d and %d via edge (%d, %d)", comp[i], comp[j], i, j)
        rep_adj[i, j] = rep_adj[j, i] = True
        comp = _components(rep_adj)

    same = group[:, None] == group[None, :]
    adj = rep_adj[group[:, None], group[None, :]] | same
    np.fill_diagonal(adj, False)
    full_d2 = d2[group[:, None], group[None, :]]
    if bandwidth is not None:
        s = float(bandwidth)
    else:
        s = float(np.median(knn_d)) if knn_d.size else 0.0
    if weights == "binary" or s == 0.0:
        W = adj.astype(np.float64)
    else:
        W = np.where(adj, np.maximum(np.exp(-full_d2 / (2.0 * s * s)), MIN_WEIGHT), 0.0)
    return NeighborGraph(n, k, W)


def graph_laplacian(graph: NeighborGraph):
    """Return ``(L, D)`` with ``D`` the degree diagonal and ``L = D - W``."""
    W = graph.weights
    if _components(W > 0).max() > 0:
        raise DisconnectedGraphError("graph Laplacian eigenmaps need a connected graph")
    D = np.diag(W.sum(axis=1))
    return D - W, D


def _round_robin(n: int) -> list:
    """Pairings covering every index pair once; each round pairs disjoint indices."""
    idx = list(range(n)) + ([-1] if n % 2 else [])
    m = len(idx)
    rounds = []
    for _ in range(m - 1):
        pairs = [(idx[i], idx[m - 1 - i]) for i in range(m // 2)]
        rounds.append(
            (
                np.array([min(p, q) for p, q in pairs if p >= 0 and q >= 0], dtype=int),
                np.array([max(p, q) for p, q in pairs if p >= 0 and q >= 0], dtype=int),
            )
        )
        idx = [idx[0], idx[-1]] + idx[1:-1]
    return rounds


def _off_norm(A: np.ndarray) -> float:
    # direct sum; subtracting the diagonal from the full norm cancels catastrophically
    off = A - np.diag(np.diag(A))
    return float(np.linalg.norm(off))


def jacobi_eigh(A, tol: float = 1e-15, max_sweeps: int = 100):
    """Eigen-decomposition of a symmetric matrix by Jacobi rotations.

    Uses the round-robin parallel ordering: each round applies n/2 disjoint
    rotations at once. Returns ascending eigenvalues and the matching
    orthonormal eigenvectors as columns.
    """
    A = np.array(A, dtype=np.float64)
    n = A.shape[0]
    if A.ndim != 2 or A.shape != (n, n):
        raise ValueError(f"expected a square matrix, got {A.shape}")
    if not np.allclose(A, A.T, rtol=0, atol=1e-12 * max(1.0, np.abs(A).max())):
        raise ValueError("matrix is not symmetric")
    A = (A + A.T) / 2.0
    V = np.eye(n)
    scale = np.linalg.norm(A)
    rounds = _round_robin(n) if n > 1 else []
    sweeps = 0
    off = _off_norm(A)
    while off > tol * scale and scale > 0:
        if sweeps >= max_sweeps:
            raise ConvergenceError(f"Jacobi did not converge in {max_sweeps} sweeps; off-diagonal norm {off:.3e}")
        for P, Q in rounds:
            apq = A[P, Q]
            active = np.abs(apq) > 1e-300
            if not active.any():
                continue
            P, Q, apq = P[active], Q[active], apq[active]
            theta = (A[Q, Q] - A[P, P]) / (2.0 * apq)
            t = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.hypot(theta, 1.0))
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            ap, aq = A[:, P].copy(), A[:, Q].copy()
            A[:, P] = c * ap - s * aq
            A[:, Q] = s * ap + c * aq
            rp, rq = A[P, :].copy(), A[Q, :].copy()
            A[P, :] = c[:, None] * rp - s[:, None] * rq
            A[Q, :] = s[:, None] * rp + c[:, None] * rq
            A[P, Q] = 0.0
            A[Q, P] = 0.0
            vp, vq = V[:, P].copy(), V[:, Q].copy()
            V[:, P] = c * vp - s * vq
            V[:, Q] = s * vp + c * vq
        sweeps += 1
        off = _off_norm(A)
    vals = np.diag(A).copy()
    order = np.argsort(vals, kind="stable")
    return vals[order], V[:, order]


def generalized_eigh(L, D):
    """Solve ``L v = lam D v`` for diagonal ``D``; vectors are D-orthonormal."""
    d = np.diag(D).astype(np.float64)
    if np.any(d <= 0):
        raise ValueError("degree matrix must be positive on the diagonal")
    inv_sqrt = 1.0 / np.sqrt(d)
    vals, U = jacobi_eigh(inv_sqrt[:, None] * L * inv_sqrt[None, :])
    return vals, inv_sqrt[:, None] * U


def _fix_signs(V: np.ndarray) -> np.ndarray:
    for c in range(V.shape[1]):
        nz = np.nonzero(np.abs(V[:, c]) > 1e-12)[0]
        if nz.size and V[nz[0], c] < 0:
            V[:, c] = -V[:, c]
    return V


def residuals(L, D, vals, V) -> np.ndarray:
    return np.linalg.norm(L @ V - (D @ V) * vals[None, :], axis=0)


def smallest_generalized_eigenvectors(L, D, count: int = 2) -> Embedding2D:
    """Eigenvectors for the ``count`` smallest non-trivial generalized eigenvalues.

    The constant solution is deflated out (its normalized form is shifted to
    the top of the spectrum) so near-disconnected graphs cannot mix it in.
    """
    L = np.asarray(L, dtype=np.float64)
    d = np.diag(D).astype(np.float64)
    if np.any(d <= 0):
        raise ValueError("degree matrix must be positive on the diagonal")
    inv_sqrt = 1.0 / np.sqrt(d)
    S = inv_sqrt[:, None] * L * inv_sqrt[None, :]
    u0 = np.sqrt(d) / np.linalg.norm(np.sqrt(d))
    vals, U = jacobi_eigh(S + DEFLATION_SHIFT * np.outer(u0, u0))
    vals, U = vals[:count], U[:, :count]
    V = _fix_signs(inv_sqrt[:, None] * U)
    res = residuals(L, np.diag(d), vals, V)
    bound = 1e-8 * np.linalg.norm(L @ V, axis=0) + 1e-12
    if np.any(res > bound):
        raise ConvergenceError(f"eigen-residuals {res} exceed bound {bound}")
    return Embedding2D(V, vals, res)


def median_knn_distance(points, k: int = 10) -> float:
    """Median distance from each distinct point to its k nearest distinct neighbors."""
    reps = np.unique(np.asarray(points, dtype=np.float64), axis=0)
    k_eff = min(k, reps.shape[0] - 1)
    if k_eff < 1:
        return 0.0
    d2 = _sq_distances(reps)
    np.fill_diagonal(d2, np.inf)
    return float(np.median(np.sqrt(np.sort(d2, axis=1)[:, :k_eff])))


def laplacian_eigenmaps(points, k: int = 10, weights: str = "heat", count: int = 2, bandwidth: Optional[float] = None) -> Embedding2D:
    g = knn_graph(points, k, weights, bandwidth)
    L, D = graph_laplacian(g)
    return smallest_generalized_eigenvectors(L, D, count)


def embed_with_trace(train_mus, trace_mus=None, k: int = 10, weights: str = "heat") -> Embedding2D:
    """Joint embedding of training latents and navigation-trace latents.

    Rows keep input order (training first); ``source`` tags each row. The
    heat bandwidth comes from the training latents alone: a trace is sampled
    far more densely than the data, and letting it set the scale would
    shrink the kernel until the data points decouple from each other.
    """
    train_mus = np.asarray(train_mus, dtype=np.float64)
    if trace_mus is None or len(trace_mus) == 0:
        pts = train_mus
        source = np.array(["train"] * len(train_mus))
    else:
        trace_mus = np.atleast_2d(np.asarray(trace_mus, dtype=np.float64))
        pts = np.vstack([train_mus, trace_mus])
        source = np.array(["train"] * len(train_mus) + ["trace"] * len(trace_mus))
    bw = median_knn_distance(train_mus, k) if len(train_mus) > 1 else None
    emb = laplacian_eigenmaps(pts, k=min(k, len(pts) - 1), weights=weights, bandwidth=bw)
    emb.source = source
    return emb


def nearest_centroid_labels(coords: np.ndarray, labels: np.ndarray) -> np.ndarray:
    classes = np.unique(labels)
    cents = np.stack([coords[labels == c].mean(axis=0) for c in classes])
    d = np.linalg.norm(coords[:, None, :] - cents[None, :, :], axis=2)
    return classes[np.argmin(d, axis=1)]


def write_embedding_csv(path, emb: Embedding2D, labels) -> None:
    """Columns: point_id, source, label, x, y (label empty for trace rows)."""
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["point_id", "source", "label", "x", "y"])
        for i, (src, lab, (x, y)) in enumerate(zip(emb.source, labels, emb.coords)):
            w.writerow([i, src, "" if lab is None else int(lab), repr(float(x)), repr(float(y))])


class LaplacianEigenmaps(BaseEstimator, TransformerMixin):
    """Transductive 2D Laplacian Eigenmaps with a Jacobi eigensolver.

    ``transform`` is only defined for the fitted data; embed new points
    jointly with :meth:`fit_transform` on the union instead.
    """

    def __init__(self, n_neighbors: int = 10, weights: str = "heat", n_components: int = 2):
        self.n_neighbors = n_neighbors
        self.weights = weights
        self.n_components = n_components

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        emb = laplacian_eigenmaps(X, k=self.n_neighbors, weights=self.weights, count=self.n_components)
        self.embedding_ = emb.coords
        self.eigenvalues_ = emb.eigenvalues
        self.residuals_ = emb.residuals
        self.n_features_in_ = X.shape[1]
        self._fit_X = X
        return self

    def transform(self, X):
        check_is_fitted(self, "embedding_")
        X = check_array(X, dtype=np.float64)
        if X.shape != self._fit_X.shape or not np.array_equal(X, self._fit_X):
            raise ValueError("Laplacian Eigenmaps has no out-of-sample extension; refit on the union")
        return self.embedding_

    def fit_transform(self, X, y=None):
        return self.fit(X).embedding_
