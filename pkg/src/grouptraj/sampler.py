"""Group-correlated latent noise and the reparameterization step.

The joint covariance over the stacked ``N x D`` noise is ``C kron I_D`` where
``C`` has ones on the diagonal, ``rho`` between members of the same group and
zero elsewhere.  Because cross-group blocks vanish, sampling factors each
group's equicorrelation block separately instead of the full matrix.

Random numbers come from numpy's ``PCG64`` bit generator
(``np.random.default_rng``) and its ziggurat normal transform, both of
which are stable across platforms for a fixed seed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .group_graph import GroupAssignment, build_intra_mask, gunpool, unique_rows

__all__ = [
    "CorrelationSpec",
    "as_generator",
    "correlation_matrix",
    "build_sigma_g",
    "sample_epsilon",
    "sample_epsilon_rho1",
    "sample_joint",
    "reparameterize",
    "write_sample_dump",
]


def as_generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class CorrelationSpec:
    rho: float
    groups: GroupAssignment
    dim: int = 8

    def __post_init__(self):
        rho = float(self.rho)
        if not np.isfinite(rho) or rho < 0.0 or rho > 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if self.dim < 1:
            raise ValueError("latent dimension must be at least 1")
        object.__setattr__(self, "rho", rho)


def _equicorrelation(n: int, rho: float) -> np.ndarray:
    return (1.0 - rho) * np.eye(n) + rho * np.ones((n, n))


def _check_psd_range(rho: float, groups: GroupAssignment) -> None:
    n_max = int(groups.sizes().max())
    lower = -1.0 / (n_max - 1) if n_max > 1 else -np.inf
    if not (lower <= rho <= 1.0):
        raise ValueError(f"rho={rho} leaves the PSD range [{lower}, 1] for a group of {n_max}")


def correlation_matrix(spec: CorrelationSpec) -> np.ndarray:
    """``N x N``: 1 on the diagonal, rho within groups, 0 across."""
    _check_psd_range(spec.rho, spec.groups)
    same = build_intra_mask(spec.groups)
    return np.where(np.eye(spec.groups.n_peds, dtype=bool), 1.0, spec.rho * same)


def build_sigma_g(spec: CorrelationSpec) -> np.ndarray:
    return np.kron(correlation_matrix(spec), np.eye(spec.dim))


def sample_epsilon(spec: CorrelationSpec, seed=None, size: int | None = None) -> np.ndarray:
    """One ``N x D`` joint draw via a Cholesky factor per group.

    For every group of size ``n`` the block is ``L @ G`` with ``L L^T`` the
    ``n x n`` equicorrelation matrix and ``G`` iid standard normal; groups are
    drawn in index order.  ``rho == 1`` makes the factor singular, which numpy
    rejects; use :func:`sample_epsilon_rho1` (or :func:`sample_joint`) there.
    With ``size`` the result is ``size x N x D`` independent joint draws.
    """
    _check_psd_range(spec.rho, spec.groups)
    rng = as_generator(seed)
    lead = () if size is None else (int(size),)
    eps = np.empty(lead + (spec.groups.n_peds, spec.dim))
    for members in spec.groups.members():
        n = members.size
        g = rng.standard_normal(lead + (n, spec.dim))
        if n == 1 or spec.rho == 0.0:
            eps[..., members, :] = g
            continue
        try:
            chol = np.linalg.cholesky(_equicorrelation(n, spec.rho))
        except np.linalg.LinAlgError as exc:
            raise ValueError(f"Cholesky failed for a group of {n} at rho={spec.rho}") from exc
        eps[..., members, :] = chol @ g
    return eps


def sample_epsilon_rho1(groups: GroupAssignment, dim: int = 8, seed=None, size: int | None = None) -> np.ndarray:
    """Fully correlated draw: one vector per group, copied to its members."""
    rng = as_generator(seed)
    if size is None:
        eps_g = rng.standard_normal((groups.n_groups, dim))
        return gunpool(eps_g, unique_rows(build_intra_mask(groups)))
    eps_g = rng.standard_normal((int(size), groups.n_groups, dim))
    return eps_g[:, groups.group_of]


def sample_joint(spec: CorrelationSpec, seed=None, size: int | None = None) -> np.ndarray:
    """Dispatch to the fast copy path at rho == 1, the Cholesky path otherwise."""
    if spec.rho == 1.0:
        return sample_epsilon_rho1(spec.groups, spec.dim, seed, size)
    return sample_epsilon(spec, seed, size)


def reparameterize(mu: Tensor, sigma: Tensor, eps) -> Tensor:
    """``mu + sqrt(sigma) * eps`` with ``sigma`` the per-coordinate variance."""
    if np.any(sigma.data <= 0):
        raise ValueError("variances must be strictly positive")
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != mu.shape or sigma.shape != mu.shape:
        raise ValueError(f"shapes differ: mu {mu.shape}, sigma {sigma.shape}, eps {eps.shape}")
    return mu + sigma.sqrt() * Tensor(eps)


def write_sample_dump(path, draws: np.ndarray) -> None:
    """CSV of ``k x N x D`` draws with columns sample_index, ped_index, dim, value."""
    draws = np.asarray(draws)
    if draws.ndim == 2:
        draws = draws[None]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_index", "ped_index", "dim", "value"])
        for s, i, d in np.ndindex(*draws.shape):
            w.writerow([s, i, d, repr(float(draws[s, i, d]))])
