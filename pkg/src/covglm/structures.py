"""Known symmetric matrices for the covariance linear predictor.

Every dependence structure enters the model as a known symmetric matrix
with one unknown dispersion coefficient. All builders here emit matrices
that are block-diagonal over independent groups, stored block by block;
nothing of size N x N is ever materialized except through the explicit
``dense`` helpers used for testing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import SpecificationError

__all__ = [
    "GroupIndex",
    "KnownMatrix",
    "build_identity",
    "build_exchangeable",
    "build_ma_band",
    "build_inverse_distance",
    "build_covariate_block",
    "build_covariate_interaction",
    "dense_from_blocks",
]


@dataclass(frozen=True)
class GroupIndex:
    """Partition of observation rows into independent groups.

    Parameters
    ----------
    labels : tuple
        Group identifiers in first-appearance order.
    rows : tuple of ndarray
        For each group, the integer row indices it owns (original file
        order preserved within groups).
    time : ndarray, shape (n,)
        Longitudinal position of every row (used by banded and distance
        structures).
    subkey : ndarray, shape (n,)
        Within-group repeated-measures label (e.g. group:time), used as
        the default key for nested exchangeable structures.
    """

    labels: tuple
    rows: tuple
    time: np.ndarray
    subkey: np.ndarray

    def __post_init__(self):
        seen = np.concatenate(self.rows) if self.rows else np.array([], dtype=int)
        n = seen.size
        if n != np.unique(seen).size or (n and (seen.min() != 0 or seen.max() != n - 1)):
            raise SpecificationError("group rows must partition 0..n-1 with no overlap")
        if len(self.labels) != len(self.rows):
            raise SpecificationError("one label per group required")
        if self.time.shape != (n,) or self.subkey.shape != (n,):
            raise SpecificationError("time and subkey must have one entry per row")

    @property
    def n(self) -> int:
        return int(self.time.shape[0])

    @property
    def n_groups(self) -> int:
        return len(self.labels)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([r.size for r in self.rows], dtype=int)

    @classmethod
    def from_labels(cls, group, time=None, subkey=None) -> "GroupIndex":
        """Build an index from per-row labels, groups in first-appearance order."""
        group = np.asarray(group)
        n = group.shape[0]
        labels, first = np.unique(group, return_index=True)
        labels = labels[np.argsort(first)]
        rows = tuple(np.flatnonzero(group == lab) for lab in labels)
        if time is None:
            time = np.zeros(n)
        time = np.asarray(time, dtype=float)
        if subkey is None:
            subkey = np.array([f"{g}:{t}" for g, t in zip(group, time)])
        else:
            subkey = np.asarray(subkey)
        return cls(labels=tuple(labels.tolist()), rows=rows, time=time, subkey=subkey)


@dataclass(frozen=True)
class KnownMatrix:
    """A known symmetric matrix, stored as one dense block per group."""

    label: str
    blocks: tuple = field(repr=False)

    def __post_init__(self):
        for b in self.blocks:
            if b.ndim != 2 or b.shape[0] != b.shape[1]:
                raise SpecificationError(f"{self.label}: blocks must be square")
            if not np.array_equal(b, b.T):
                raise SpecificationError(f"{self.label}: blocks must be exactly symmetric")

    def block(self, g: int) -> np.ndarray:
        return self.blocks[g]


def dense_from_blocks(matrix: KnownMatrix, groups: GroupIndex) -> np.ndarray:
    """Assemble the full n x n matrix (testing helper, never used in fitting)."""
    n = groups.n
    out = np.zeros((n, n))
    for g, idx in enumerate(groups.rows):
        out[np.ix_(idx, idx)] = matrix.blocks[g]
    return out


def _symmetrize(m: np.ndarray) -> np.ndarray:
    return (m + m.T) / 2.0


def build_identity(groups: GroupIndex, label: str = "identity") -> KnownMatrix:
    """Identity structure; its coefficient is the baseline dispersion."""
    return KnownMatrix(label, tuple(np.eye(s) for s in groups.sizes))


def build_exchangeable(groups: GroupIndex, key=None, label: str = "exchangeable") -> KnownMatrix:
    """Exchangeable (compound symmetry) structure.

    With ``key=None`` every pair of rows in the same group is exchangeable
    (all-ones block). With a per-row ``key`` array, entry (i, j) is 1 when
    the keys match, giving a nested block structure such as repeated counts
    within a group:time cell.
    """
    blocks = []
    for idx in groups.rows:
        if key is None:
            blocks.append(np.ones((idx.size, idx.size)))
        else:
            k = np.asarray(key)[idx]
            blocks.append((k[:, None] == k[None, :]).astype(float))
    return KnownMatrix(label, tuple(blocks))


def _time_positions(t: np.ndarray, scale: str) -> np.ndarray:
    if scale == "rank":
        # rank of distinct time points: gaps in the calendar do not widen bands
        _, inv = np.unique(t, return_inverse=True)
        return inv.astype(float)
    if scale == "calendar":
        return t.astype(float)
    raise SpecificationError(f"unknown time scale {scale!r} (use 'rank' or 'calendar')")


def build_ma_band(groups: GroupIndex, lag: int, time_scale: str = "rank",
                  label: str | None = None) -> KnownMatrix:
    """Moving-average band structure: 1 where positions differ by exactly ``lag``."""
    if lag < 1:
        raise SpecificationError("ma lag must be a positive integer")
    blocks = []
    for idx in groups.rows:
        pos = _time_positions(groups.time[idx], time_scale)
        d = np.abs(pos[:, None] - pos[None, :])
        blocks.append((d == lag).astype(float))
    return KnownMatrix(label or f"ma({lag})", tuple(blocks))


def build_inverse_distance(groups: GroupIndex, label: str = "inverse_distance") -> KnownMatrix:
    """Inverse Euclidean distance in time; tied times get weight 1, diagonal 0."""
    blocks = []
    for idx in groups.rows:
        t = groups.time[idx].astype(float)
        d = np.abs(t[:, None] - t[None, :])
        w = np.ones_like(d)
        np.divide(1.0, d, out=w, where=d > 0)
        np.fill_diagonal(w, 0.0)
        blocks.append(_symmetrize(w))
    return KnownMatrix(label, tuple(blocks))


def build_covariate_block(groups: GroupIndex, values, label: str = "covariate") -> KnownMatrix:
    """Rank-one covariate structure a a' per group (random-slope style)."""
    values = np.asarray(values, dtype=float)
    if values.shape != (groups.n,):
        raise SpecificationError("covariate values must have one entry per row")
    blocks = tuple(np.outer(values[idx], values[idx]) for idx in groups.rows)
    return KnownMatrix(label, blocks)


def build_covariate_interaction(groups: GroupIndex, values_a, values_b,
                                label: str = "covariate_interaction") -> KnownMatrix:
    """Symmetrized two-covariate structure a b' + b a' per group."""
    a = np.asarray(values_a, dtype=float)
    b = np.asarray(values_b, dtype=float)
    if a.shape != (groups.n,) or b.shape != (groups.n,):
        raise SpecificationError("covariate values must have one entry per row")
    blocks = []
    for idx in groups.rows:
        ai, bi = a[idx], b[idx]
        blocks.append(np.outer(ai, bi) + np.outer(bi, ai))
    return KnownMatrix(label, tuple(blocks))
