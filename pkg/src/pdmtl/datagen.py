"""Synthetic Gaussian multi-attribute data with a designed correlation structure.

Each sample is ``x ~ N(mean, cov)`` in 10 dimensions; attribute ``k`` of a
sample is ``1`` iff ``x[coord_k] > mean[coord_k]``.  The default covariance
makes coordinates {0, 3} and {1, 2} two positively correlated groups that are
negatively correlated with each other, so the task clusters a topology
learner should find are known in advance.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .nn import ConfigurationError


class CovarianceError(ValueError):
    pass


@dataclass(frozen=True)
class CovarianceSpec:
    mean: np.ndarray
    cov: np.ndarray
    name: str = "custom"

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.cov, dtype=np.float64)
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1] or mean.shape != (cov.shape[0],):
            raise CovarianceError(
                f"mean {mean.shape} and cov {cov.shape} are not conformant"
            )
        if np.max(np.abs(cov - cov.T), initial=0.0) > 1e-12:
            raise CovarianceError("covariance is not symmetric within 1e-12")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        # fails loudly on an indefinite matrix before anything is sampled
        object.__setattr__(self, "_factor", psd_factor(cov))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def factor(self) -> np.ndarray:
        return self._factor

    def to_dict(self) -> dict:
        return {"name": self.name, "mean": self.mean.tolist(), "cov": self.cov.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "CovarianceSpec":
        return cls(np.array(d["mean"]), np.array(d["cov"]), d.get("name", "custom"))


def psd_factor(cov: np.ndarray) -> np.ndarray:
    """Lower factor ``A`` with ``A @ A.T == cov``.

    Cholesky when the matrix is positive definite; a symmetric square root from
    the eigendecomposition when it is only semi-definite.
    """
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(cov)
        if vals[0] < -1e-10 * max(1.0, abs(vals[-1])):
            raise CovarianceError(
                f"covariance is not positive semi-definite (min eigenvalue {vals[0]:.3e})"
            ) from None
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


def _block_covariance(dim: int, groups: Sequence[Sequence[int]], within: float, across: dict) -> np.ndarray:
    cov = np.eye(dim)
    for g in groups:
        for i in g:
            for j in g:
                if i != j:
                    cov[i, j] = within
    for (ga, gb), value in across.items():
        for i in groups[ga]:
            for j in groups[gb]:
                cov[i, j] = cov[j, i] = value
    return cov


def default_covariance() -> CovarianceSpec:
    """Four tracked coordinates: {0,3} and {1,2} at +0.8 inside, -0.4 across.

    Coordinates 4-9 are independent unit-variance noise.  The smallest
    eigenvalue of the resulting matrix is 0.2.
    """
    cov = _block_covariance(10, [(0, 3), (1, 2)], 0.8, {(0, 1): -0.4})
    return CovarianceSpec(np.zeros(10), cov, name="four_task")


def six_task_covariance() -> CovarianceSpec:
    """Six tracked coordinates in three positively correlated pairs.

    Stand-in for the male/mustache, cheekbones/smiling and makeup/lipstick
    attribute structure: {0,1}, {2,3}, {4,5} at +0.8 inside; {0,1} is
    anti-correlated with {4,5} at -0.3; other cross terms are 0.
    """
    cov = _block_covariance(10, [(0, 1), (2, 3), (4, 5)], 0.8, {(0, 2): -0.3})
    return CovarianceSpec(np.zeros(10), cov, name="six_task")


COVARIANCES = {
    "four_task": (default_covariance, (0, 1, 2, 3)),
    "six_task": (six_task_covariance, (0, 1, 2, 3, 4, 5)),
}


def sample_gaussian(spec: CovarianceSpec, n: int, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((int(n), spec.dim))
    return spec.mean + z @ spec.factor.T


def label_attributes(samples: np.ndarray, spec: CovarianceSpec, tracked_coords: Sequence[int]) -> np.ndarray:
    """``(n, len(tracked_coords))`` int8 labels, strict ``>`` against the mean."""
    coords = list(tracked_coords)
    for c in coords:
        if not 0 <= c < spec.dim:
            raise ConfigurationError(f"tracked coordinate {c} outside [0, {spec.dim})")
    samples = np.atleast_2d(samples)
    return (samples[:, coords] > spec.mean[coords]).astype(np.int8)


@dataclass
class Split:
    x: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return self.x.shape[0]


@dataclass
class SyntheticDataset:
    spec: CovarianceSpec
    tracked_coords: List[int]
    seed: int
    train: Split
    test: Split
    shared: Split

    @property
    def n_tasks(self) -> int:
        return len(self.tracked_coords)

    def cache_key(self) -> str:
        return dataset_key(
            self.spec, self.tracked_coords, self.seed, (len(self.train), len(self.test), len(self.shared))
        )


def dataset_key(spec: CovarianceSpec, tracked_coords, seed, splits) -> str:
    """Stable digest of everything that determines a dataset's samples."""
    payload = json.dumps(
        {"cov": spec.to_dict(), "tracked": [int(c) for c in tracked_coords], "seed": int(seed), "splits": [int(v) for v in splits]},
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def make_dataset(
    spec: Optional[CovarianceSpec] = None,
    tracked_coords: Sequence[int] = (0, 1, 2, 3),
    n_train: int = 30_000,
    n_test: int = 10_000,
    n_shared: int = 10_000,
    seed: int = 0,
) -> SyntheticDataset:
    spec = default_covariance() if spec is None else spec
    coords = [int(c) for c in tracked_coords]
    x = sample_gaussian(spec, n_train + n_test + n_shared, seed)
    y = label_attributes(x, spec, coords)
    a, b = n_train, n_train + n_test
    return SyntheticDataset(
        spec,
        coords,
        int(seed),
        Split(x[:a], y[:a]),
        Split(x[a:b], y[a:b]),
        Split(x[b:], y[b:]),
    )


@dataclass
class ClientView:
    """What one client may touch: its train shard, its own label column, and
    the feature-only shared/test splits with its own task's labels."""

    task: int
    train_x: np.ndarray
    train_y: np.ndarray
    train_index: np.ndarray
    shared_x: np.ndarray
    shared_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray = field(repr=False)


def partition_for_clients(ds: SyntheticDataset, n_clients: int, seed=None) -> List[ClientView]:
    """Shuffle the train split (seeded) and hand out contiguous equal blocks.

    Client ``k`` is assigned task ``k``.  When ``n_train`` is not divisible by
    ``n_clients`` the leftover samples go one each to the first clients.
    """
    if n_clients != ds.n_tasks:
        raise ConfigurationError(
            f"{n_clients} clients requested for {ds.n_tasks} tracked attributes"
        )
    return split_among_clients(
        ds.train, ds.shared, ds.test, ds.seed if seed is None else seed
    )


def split_among_clients(train: Split, shared: Split, test: Split, seed) -> List[ClientView]:
    n_clients = train.labels.shape[1]
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(train))
    views = []
    for k, idx in enumerate(np.array_split(order, n_clients)):
        views.append(
            ClientView(
                task=k,
                train_x=train.x[idx],
                train_y=train.labels[idx, k].astype(np.int64),
                train_index=idx,
                shared_x=shared.x,
                shared_y=shared.labels[:, k].astype(np.int64),
                test_x=test.x,
                test_y=test.labels[:, k].astype(np.int64),
            )
        )
    return views
