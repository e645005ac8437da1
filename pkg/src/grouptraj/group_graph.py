"""Masks, adjacencies and pooling operators derived from a group partition.

All matrices are dense numpy arrays.  ``gpool`` and ``gunpool`` accept either
plain arrays or :class:`~grouptraj.autodiff.Tensor` features so the same code
serves both the data pipeline and the differentiable encoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor

__all__ = [
    "GroupAssignment",
    "build_intra_mask",
    "normalize_rows",
    "unique_rows",
    "gpool",
    "gunpool",
    "build_inter_adjacency",
    "complement_adjacency",
]


@dataclass(frozen=True)
class GroupAssignment:
    """Partition of ``N`` pedestrians into ``M`` groups.

    ``group_of[i]`` is the group index of pedestrian ``i``; every index in
    ``[0, M)`` must be used.
    """

    group_of: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.group_of, dtype=np.int64).reshape(-1)
        if g.size == 0:
            raise ValueError("group assignment needs at least one pedestrian")
        if g.min() < 0:
            raise ValueError("group indices must be non-negative")
        used = np.unique(g)
        if used.size != g.max() + 1:
            missing = sorted(set(range(int(g.max()) + 1)) - set(used.tolist()))
            raise ValueError(f"group indices {missing} are unused")
        g.setflags(write=False)
        object.__setattr__(self, "group_of", g)

    @classmethod
    def from_labels(cls, labels) -> "GroupAssignment":
        """Compact arbitrary hashable labels to ``[0, M)`` by first occurrence."""
        mapping: dict = {}
        out = [mapping.setdefault(lab, len(mapping)) for lab in labels]
        return cls(np.array(out, dtype=np.int64))

    @classmethod
    def singletons(cls, n: int) -> "GroupAssignment":
        return cls(np.arange(n))

    @property
    def n_peds(self) -> int:
        return int(self.group_of.size)

    @property
    def n_groups(self) -> int:
        return int(self.group_of.max()) + 1

    def sizes(self) -> np.ndarray:
        return np.bincount(self.group_of, minlength=self.n_groups)

    def members(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.group_of == g) for g in range(self.n_groups)]

    def canonical(self) -> "GroupAssignment":
        """Relabel so group order follows the lowest member index."""
        return GroupAssignment.from_labels(self.group_of.tolist())

    def subset(self, index) -> "GroupAssignment":
        """Restrict to the pedestrians in ``index``; emptied groups vanish."""
        return GroupAssignment.from_labels(self.group_of[np.asarray(index)].tolist())

    def permute(self, perm) -> "GroupAssignment":
        return GroupAssignment.from_labels(self.group_of[np.asarray(perm)].tolist())


def build_intra_mask(groups: GroupAssignment) -> np.ndarray:
    g = groups.group_of
    return (g[:, None] == g[None, :]).astype(np.float64)


def normalize_rows(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    sums = mask.sum(axis=1, keepdims=True)
    if np.any(sums == 0):
        raise ValueError(f"rows {np.flatnonzero(sums[:, 0] == 0).tolist()} are all zero")
    return mask / sums


def unique_rows(mask: np.ndarray) -> np.ndarray:
    """Distinct rows of an intra mask, ordered by their lowest member index."""
    mask = np.asarray(mask)
    rows: list[np.ndarray] = []
    seen: set[bytes] = set()
    for row in mask:
        key = row.tobytes()
        if key not in seen:
            seen.add(key)
            rows.append(row)
    return np.array(rows, dtype=np.float64)


def _apply(matrix: np.ndarray, features):
    if features.shape[0] != matrix.shape[1]:
        raise ShapeError(f"operator of shape {matrix.shape} cannot act on features of shape {features.shape}")
    if isinstance(features, Tensor):
        return Tensor(matrix) @ features
    return matrix @ np.asarray(features, dtype=np.float64)


def gpool(features, selector: np.ndarray):
    """Group-wise mean of pedestrian feature rows (M x F)."""
    return _apply(normalize_rows(selector), features)


def gunpool(group_features, selector: np.ndarray):
    """Copy each group's feature row back to its members (N x F)."""
    return _apply(np.asarray(selector, dtype=np.float64).T, group_features)


def build_inter_adjacency(n_groups: int) -> np.ndarray:
    if n_groups < 1:
        raise ValueError("need at least one group")
    return normalize_rows(np.ones((n_groups, n_groups)))


def complement_adjacency(groups: GroupAssignment) -> np.ndarray:
    """Row-normalized ``1 - M_intra + I``: links to every out-of-group pedestrian plus self."""
    mask = 1.0 - build_intra_mask(groups) + np.eye(groups.n_peds)
    return normalize_rows(mask)
