"""Reproducible multivariate-normal replication datasets."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CovarianceError, DomainError
from .model import MomentStructure

RNG_METHOD = (
    "numpy Generator(Philox) keyed by SeedSequence(base_seed, "
    "spawn_key=(condition_index, replication_index)); ziggurat normals"
)
_JITTERS = (0.0, 1e-12, 1e-10, 1e-8)


@dataclass(frozen=True)
class SeedPlan:
    base_seed: int
    condition_index: int = 0
    replication_index: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(
            entropy=int(self.base_seed) % 2**64,
            spawn_key=(int(self.condition_index), int(self.replication_index)),
        )
        return np.random.Generator(np.random.Philox(ss))


@dataclass
class Dataset:
    values: np.ndarray
    mask: np.ndarray
    group: np.ndarray
    condition_id: str = ""
    replication_id: int = 0
    labels: tuple = field(default=())

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        self.group = np.asarray(self.group, dtype=int)
        if self.values.ndim != 2 or self.values.shape != self.mask.shape:
            raise DomainError("values and mask must be 2-D with identical shape")
        if self.group.shape != (self.values.shape[0],):
            raise DomainError("group must have one label per row")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def observed(self) -> np.ndarray:
        """Values with unobserved cells replaced by NaN."""
        return np.where(self.mask, self.values, np.nan)

    @classmethod
    def from_array(cls, X, group=None, **kw) -> "Dataset":
        X = np.asarray(X, dtype=float)
        if X.ndim != 2:
            raise DomainError("expected a 2-D array")
        mask = ~np.isnan(X)
        if group is None:
            group = np.ones(X.shape[0], dtype=int)
        return cls(np.where(mask, X, 0.0), mask, group, **kw)


def block_groups(n: int, n_groups: int = 6) -> np.ndarray:
    """Contiguous group labels 1..n_groups; sizes differ by at most one."""
    sizes = [len(b) for b in np.array_split(np.arange(n), n_groups)]
    return np.repeat(np.arange(1, n_groups + 1), sizes)


def psd_factor(cov) -> np.ndarray:
    """Lower factor ``F`` with ``F @ F.T ~= cov`` (Cholesky with diagonal jitter)."""
    cov = np.asarray(cov, dtype=float)
    eye = np.eye(cov.shape[0])
    for jitter in _JITTERS:
        try:
            return np.linalg.cholesky(cov + jitter * eye)
        except np.linalg.LinAlgError:
            continue
    raise CovarianceError("covariance could not be factorized even with 1e-8 jitter")


def sample_mvn(
    moments: MomentStructure,
    n: int,
    seed: SeedPlan,
    n_groups: int = 6,
    condition_id: str = "",
) -> Dataset:
    """Draw ``n`` i.i.d. rows from N(mean, cov).

    Variables with exactly zero variance are returned at their mean; the
    remaining block is factorized by Cholesky.
    """
    if n < 1:
        raise DomainError("n must be >= 1")
    mean, cov = moments.mean, moments.cov
    p = mean.size
    live = np.flatnonzero(np.diag(cov) > 0)
    rng = seed.generator()
    z = rng.standard_normal((n, live.size))
    values = np.tile(mean, (n, 1))
    if live.size:
        factor = psd_factor(cov[np.ix_(live, live)])
        values[:, live] += z @ factor.T
    return Dataset(
        values=values,
        mask=np.ones((n, p), dtype=bool),
        group=block_groups(n, n_groups),
        condition_id=condition_id,
        replication_id=seed.replication_index,
        labels=tuple(moments.labels),
    )


def write_dataset_csv(data: Dataset, path, labels=None) -> Path:
    """One row per case: value columns, ``group``, ``rep``; missing cells empty."""
    path = Path(path)
    labels = list(labels or data.labels or [f"v{j + 1}" for j in range(data.values.shape[1])])
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(labels + ["group", "rep"])
        for row, m, g in zip(data.values, data.mask, data.group):
            cells = [repr(float(v)) if ok else "" for v, ok in zip(row, m)]
            w.writerow(cells + [int(g), data.replication_id])
    return path


def read_dataset_csv(path) -> Dataset:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    p = len(header) - 2
    X = np.array([[float(c) if c != "" else np.nan for c in r[:p]] for r in body]).reshape(-1, p)
    group = np.array([int(r[p]) for r in body], dtype=int)
    rep = int(body[0][p + 1]) if body else 0
    return Dataset.from_array(X, group=group, replication_id=rep, labels=tuple(header[:p]))
