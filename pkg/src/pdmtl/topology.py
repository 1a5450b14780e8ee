"""Transference matrix -> clusters -> doubly-stochastic mixing matrix.

Pipeline: symmetrize and clamp the signed transference into a similarity
graph, form the unnormalized Laplacian ``L = D - S``, eigendecompose it with
cyclic Jacobi rotations, keep as many eigenvectors as there are eigenvalues
below a threshold, k-means the rows of that embedding, and give every
cluster of size ``d`` a uniform ``1/d`` block.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .nn import ConfigurationError

Partition = Tuple[Tuple[int, ...], ...]

STOCHASTIC_TOL = 1e-9


class NumericalError(RuntimeError):
    pass


class StochasticityError(ValueError):
    """A mixing matrix failed the doubly-stochastic / nonnegativity check."""


@dataclass
class MixingMatrix:
    w: np.ndarray
    clusters: Optional[Partition] = None

    @property
    def n(self) -> int:
        return self.w.shape[0]

    def to_dict(self) -> dict:
        return {
            "w": self.w.tolist(),
            "clusters": None if self.clusters is None else [list(c) for c in self.clusters],
        }


@dataclass
class SpectralReport:
    laplacian: np.ndarray
    eigenvalues: np.ndarray
    chosen_k: int
    embedding: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {"eigenvalues": self.eigenvalues.tolist(), "chosen_k": self.chosen_k}


def canonical_partition(labels: Sequence[int]) -> Partition:
    """Clusters as sorted index tuples, ordered by their smallest member."""
    groups = {}
    for i, lab in enumerate(labels):
        groups.setdefault(int(lab), []).append(i)
    return tuple(sorted(tuple(g) for g in groups.values()))


def partition_labels(partition: Partition, n: int) -> np.ndarray:
    labels = np.full(n, -1, dtype=np.int64)
    for c, members in enumerate(partition):
        for i in members:
            if not 0 <= i < n or labels[i] != -1:
                raise ConfigurationError(f"clusters {partition!r} do not partition range({n})")
            labels[i] = c
    if (labels < 0).any():
        raise ConfigurationError(f"clusters {partition!r} do not cover range({n})")
    return labels


def symmetrize_clamp(z) -> np.ndarray:
    """``s[i, j] = max(0, (z[i, j] + z[j, i]) / 2)`` off the diagonal, 0 on it."""
    z = np.asarray(getattr(z, "z", z), dtype=np.float64)
    if not np.isfinite(z).all():
        raise ConfigurationError("transference matrix has non-finite entries")
    s = np.maximum(0.5 * (z + z.T), 0.0)
    np.fill_diagonal(s, 0.0)
    return s


def laplacian(s) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    return np.diag(s.sum(axis=1)) - s


def eig_symmetric(m, tol=1e-10, max_sweeps=50):
    """Cyclic Jacobi eigendecomposition of a small symmetric matrix.

    Returns ascending eigenvalues and orthonormal eigenvectors as columns.
    Sweeps stop once the off-diagonal Frobenius norm drops below
    ``tol * max(1, ||m||_F)``.  Each eigenvector is sign-normalized so that
    its largest-magnitude entry (first one on ties) is positive.
    """
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ConfigurationError(f"square matrix required, got {a.shape}")
    if np.max(np.abs(a - a.T), initial=0.0) > 1e-9:
        raise ConfigurationError("matrix is not symmetric within 1e-9")
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    v = np.eye(n)
    target = tol * max(1.0, np.linalg.norm(a))

    def off_norm():
        return np.sqrt(2.0 * np.sum(np.triu(a, 1) ** 2))

    sweeps = 0
    while off_norm() >= target:
        if sweeps == max_sweeps:
            raise NumericalError(f"Jacobi did not converge in {max_sweeps} sweeps")
        sweeps += 1
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.hypot(theta, 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                # A <- J^T A J with J the (p, q) Givens rotation
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                a[p, q] = a[q, p] = 0.0
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    vals = np.diag(a).copy()
    order = np.argsort(vals, kind="stable")
    vals, v = vals[order], v[:, order]
    for k in range(n):
        if v[np.argmax(np.abs(v[:, k])), k] < 0:
            v[:, k] = -v[:, k]
    return vals, v


def choose_k(eigenvalues, threshold=1.0) -> int:
    """Number of eigenvalues strictly below ``threshold``, clipped to ``[1, n]``."""
    vals = np.asarray(eigenvalues)
    return int(min(max(1, int(np.sum(vals < threshold))), len(vals)))


def _farthest_first(points, k, start):
    centers = [points[start]]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        nxt = int(np.argmax(d2))
        centers.append(points[nxt])
        d2 = np.minimum(d2, np.sum((points - points[nxt]) ** 2, axis=1))
    return np.array(centers)


def _assign(points, centers):
    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1), d2


def _repair_empty(points, labels, k):
    for c in range(k):
        if np.any(labels == c):
            continue
        sizes = np.bincount(labels, minlength=k)
        big = int(np.argmax(sizes))
        members = np.flatnonzero(labels == big)
        center = points[members].mean(axis=0)
        far = members[np.argmax(np.sum((points[members] - center) ** 2, axis=1))]
        labels[far] = c
    return labels


def kmeans(points, k, n_init=10, max_iter=50):
    """Lloyd's k-means with deterministic farthest-first starts.

    Restart ``r`` seeds its first center at the ``r``-th point in a
    data-derived order (distance from the centroid, descending, ties broken
    lexicographically on coordinates), so results do not depend on row order
    beyond exact ties.  Returns ``(labels, inertia)``.
    """
    x = np.asarray(points, dtype=np.float64)
    n = x.shape[0]
    k = int(k)
    if not 1 <= k <= n:
        raise ConfigurationError(f"k={k} outside [1, {n}]")
    dist = np.sum((x - x.mean(axis=0)) ** 2, axis=1)
    order = np.lexsort(tuple(x.T[::-1]) + (-np.round(dist, 12),))
    best_labels, best_inertia = None, np.inf
    for r in range(min(n_init, n)):
        centers = _farthest_first(x, k, order[r])
        labels = None
        for _ in range(max_iter):
            new, _ = _assign(x, centers)
            new = _repair_empty(x, new, k)
            if labels is not None and np.array_equal(new, labels):
                break
            labels = new
            centers = np.array([x[labels == c].mean(axis=0) for c in range(k)])
        inertia = float(sum(np.sum((x[labels == c] - centers[c]) ** 2) for c in range(k)))
        if inertia < best_inertia - 1e-12:
            best_labels, best_inertia = labels.copy(), inertia
    return best_labels, best_inertia


def spectral_cluster(s, threshold=1.0, n_init=10, max_iter=50) -> Tuple[Partition, SpectralReport]:
    """Unnormalized spectral clustering with an eigenvalue-threshold cluster count."""
    s = np.asarray(s, dtype=np.float64)
    lap = laplacian(s)
    vals, vecs = eig_symmetric(lap)
    k = choose_k(vals, threshold)
    embedding = vecs[:, :k]
    labels, _ = kmeans(embedding, k, n_init=n_init, max_iter=max_iter)
    return canonical_partition(labels), SpectralReport(lap, vals, k, embedding)


def mixing_from_clusters(clusters: Partition, n: int) -> MixingMatrix:
    """Block-uniform mixing matrix: ``1/d`` inside each cluster of size ``d``."""
    labels = partition_labels(clusters, n)
    w = np.zeros((n, n))
    for members in clusters:
        idx = np.array(members)
        w[np.ix_(idx, idx)] = 1.0 / len(idx)
    return MixingMatrix(w, canonical_partition(labels))


def uniform_mixing(n: int) -> MixingMatrix:
    return mixing_from_clusters((tuple(range(n)),), n)


def average_mixing(history: Sequence) -> MixingMatrix:
    """Entrywise mean of mixing matrices; the cluster field is dropped."""
    if len(history) == 0:
        raise ConfigurationError("cannot average an empty mixing-matrix history")
    mats = [np.asarray(getattr(h, "w", h), dtype=np.float64) for h in history]
    if len({m.shape for m in mats}) != 1:
        raise ConfigurationError("mixing matrices differ in size")
    return MixingMatrix(np.mean(mats, axis=0), None)


def check_doubly_stochastic(w, tol=STOCHASTIC_TOL) -> None:
    w = np.asarray(getattr(w, "w", w))
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise StochasticityError(f"mixing matrix must be square, got {w.shape}")
    if not np.isfinite(w).all():
        raise StochasticityError("mixing matrix has non-finite entries")
    if (w < 0).any():
        raise StochasticityError(f"negative mixing weight {w.min():.3e}")
    rows = np.max(np.abs(w.sum(axis=1) - 1.0))
    cols = np.max(np.abs(w.sum(axis=0) - 1.0))
    if rows > tol or cols > tol:
        raise StochasticityError(f"row/column sums off by {max(rows, cols):.3e} (tol {tol:g})")


def support_partition(w, tol=0.0) -> Partition:
    """Connected components of the graph with an edge wherever ``w > tol``."""
    w = np.asarray(getattr(w, "w", w))
    n = w.shape[0]
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in zip(*np.nonzero((w > tol) | (w.T > tol))):
        ri, rj = find(int(i)), find(int(j))
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    return canonical_partition([find(i) for i in range(n)])


class SpectralTopology(ClusterMixin, BaseEstimator):
    """Estimator wrapper: fit on a square transference matrix.

    Attributes after ``fit``: ``labels_``, ``clusters_``, ``n_clusters_``,
    ``eigenvalues_``, ``similarity_``, ``mixing_matrix_``, ``report_``.
    """

    def __init__(self, threshold=1.0, transference_scale=1.0, n_init=10, max_iter=50):
        self.threshold = threshold
        self.transference_scale = transference_scale
        self.n_init = n_init
        self.max_iter = max_iter

    def fit(self, X, y=None):
        z = check_array(X, dtype=np.float64, ensure_min_samples=1)
        if z.shape[0] != z.shape[1]:
            raise ValueError(f"transference matrix must be square, got {z.shape}")
        self.similarity_ = symmetrize_clamp(self.transference_scale * z)
        self.clusters_, self.report_ = spectral_cluster(
            self.similarity_, self.threshold, self.n_init, self.max_iter
        )
        self.labels_ = partition_labels(self.clusters_, z.shape[0])
        self.n_clusters_ = len(self.clusters_)
        self.eigenvalues_ = self.report_.eigenvalues
        self.mixing_matrix_ = mixing_from_clusters(self.clusters_, z.shape[0]).w
        return self

    def transform(self, X=None):
        """The fitted mixing matrix (``X`` is ignored)."""
        check_is_fitted(self, "mixing_matrix_")
        return self.mixing_matrix_
