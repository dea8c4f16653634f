"""Gaussian size management: density-aware init, scale clamp, aged split,
and the clone/split/prune densification they sit on."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .core import GaussianCloud, quat_to_rotmat
from .errors import InsufficientDataError, InvalidParameterError


@dataclass
class ConstraintConfig:
    enabled: bool = True
    tau: float = 0.3
    alpha: float = 0.2
    omega: float = 0.3
    age_threshold: int = 3000
    interval: int = 1000
    stop_iteration: int = 10000
    split_factor: float = 1.6
    dense_factor: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise InvalidParameterError("alpha must lie in (0, 1)")
        if self.tau <= 0 or self.omega <= 0:
            raise InvalidParameterError("tau and omega must be positive")
        if self.interval < 1 or self.age_threshold < 0:
            raise InvalidParameterError("interval must be >= 1 and age_threshold >= 0")

    def scheduled(self, iteration: int) -> bool:
        return self.enabled and iteration % self.interval == 0 and iteration <= self.stop_iteration


@dataclass
class DensifyConfig:
    enabled: bool = True
    grad_threshold: float = 2e-4
    min_opacity: float = 0.005
    interval: int = 100
    start_iteration: int = 500
    stop_iteration: int = 15000
    split_factor: float = 1.6
    max_screen_size: float = 20.0
    percent_dense: float = 0.01
    world_size_prune: float = 0.1
    opacity_reset_interval: int = 3000

    def __post_init__(self):
        if min(self.grad_threshold, self.min_opacity, self.split_factor, self.max_screen_size) <= 0:
            raise InvalidParameterError("densification thresholds must be positive")
        if self.interval < 1:
            raise InvalidParameterError("densify interval must be >= 1")

    def scheduled(self, iteration: int) -> bool:
        return (self.enabled and self.start_iteration < iteration <= self.stop_iteration
                and iteration % self.interval == 0)


@dataclass
class Mutation:
    """How a population change maps old Gaussians onto the new cloud.

    The new cloud holds ``old[kept]`` followed by ``n_new`` fresh Gaussians.
    """

    kept: np.ndarray
    n_new: int
    clones: int = 0
    splits: int = 0
    prunes: int = 0
    clamped: int = 0
    new_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @classmethod
    def identity(cls, n):
        return cls(np.arange(n), 0)

    def then(self, other: "Mutation") -> "Mutation":
        """Compose ``other`` (applied to this result) after ``self``."""
        n_old = len(self.kept)
        mapped = np.concatenate([self.kept, -1 - np.arange(self.n_new)])[other.kept]
        kept = mapped[mapped >= 0]
        surviving_new = int(np.sum(mapped < 0))
        if not np.all(mapped[: len(kept)] >= 0):
            raise AssertionError("composition expects kept originals to precede new entries")
        return Mutation(kept, surviving_new + other.n_new, self.clones + other.clones,
                        self.splits + other.splits, self.prunes + other.prunes,
                        self.clamped + other.clamped,
                        np.arange(len(kept), len(kept) + surviving_new + other.n_new))

    def remap(self, arr: np.ndarray) -> np.ndarray:
        """Carry per-Gaussian state across the mutation; new rows are zero."""
        return np.concatenate([arr[self.kept], np.zeros((self.n_new,) + arr.shape[1:], arr.dtype)])


def _replace(cloud: GaussianCloud, new: GaussianCloud) -> None:
    cloud.positions, cloud.log_scales, cloud.rotations = new.positions, new.log_scales, new.rotations
    cloud.opacities, cloud.colors, cloud.sh1, cloud.ages = (
        new.opacities, new.colors, new.sh1, new.ages)


# --------------------------------------------------------------------------
# Initialization
# --------------------------------------------------------------------------


def knn_mean_distance(points, k: int = 3) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) < k + 1:
        raise InsufficientDataError(f"need at least {k + 1} points, got {len(points)}")
    dist, _ = cKDTree(points).query(points, k=k + 1)
    return dist[:, 1:].mean(axis=1)


def init_scales(points, dense_factor: float = 0.5, k: int = 3) -> np.ndarray:
    """Isotropic log-scales from the mean distance to the 3 nearest neighbours.

    Points whose neighbourhood is tighter than the median are treated as
    dense and get their scale multiplied by ``dense_factor``.
    """
    d = np.maximum(knn_mean_distance(points, k), 1e-7)
    factor = np.where(d < np.median(d), dense_factor, 1.0)
    return np.repeat(np.log(d * factor)[:, None], 3, axis=1)


# --------------------------------------------------------------------------
# Constraint passes
# --------------------------------------------------------------------------


def apply_scale_constraint(cloud: GaussianCloud, cfg: ConstraintConfig, indices=None) -> int:
    """Multiply every scale axis above ``tau`` by ``alpha`` once.

    Restricted to ``indices`` when given. Returns the number of axes changed.
    """
    idx = np.arange(len(cloud)) if indices is None else np.asarray(indices, dtype=np.int64)
    if len(idx) == 0:
        return 0
    ls = cloud.log_scales[idx]
    over = np.exp(ls) > cfg.tau
    ls[over] = np.log(np.exp(ls[over]) * cfg.alpha)
    cloud.log_scales[idx] = ls
    return int(over.sum())


def _sample_children(cloud: GaussianCloud, parents, n_children, factor, rng):
    parents = np.repeat(parents, n_children)
    s = cloud.scales[parents]
    R = quat_to_rotmat(cloud.rotations[parents] / np.linalg.norm(cloud.rotations[parents], axis=1, keepdims=True))
    offsets = rng.normal(size=s.shape) * s
    child = cloud.subset(parents)
    child.positions = child.positions + np.einsum("nij,nj->ni", R, offsets)
    child.log_scales = child.log_scales - np.log(factor)
    child.ages = np.zeros(len(parents), dtype=np.int64)
    return child


def split_gaussians(cloud: GaussianCloud, mask, factor: float, rng, n_children: int = 2) -> Mutation:
    """Replace Gaussians under ``mask`` by ``n_children`` smaller children each."""
    mask = np.asarray(mask, dtype=bool)
    parents = np.flatnonzero(mask)
    children = _sample_children(cloud, parents, n_children, factor, rng)
    kept = np.flatnonzero(~mask)
    _replace(cloud, GaussianCloud.concatenate([cloud.subset(kept), children]))
    n_new = len(children)
    return Mutation(kept, n_new, splits=len(parents),
                    new_ids=np.arange(len(kept), len(kept) + n_new))


def selective_split(cloud: GaussianCloud, cfg: ConstraintConfig, rng=None) -> Mutation:
    """Split aged Gaussians whose largest axis exceeds ``omega``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    if len(cloud) == 0:
        return Mutation.identity(0)
    mask = (cloud.ages >= cfg.age_threshold) & (cloud.scales.max(axis=1) > cfg.omega)
    if not mask.any():
        return Mutation.identity(len(cloud))
    return split_gaussians(cloud, mask, cfg.split_factor, rng)


def prune(cloud: GaussianCloud, mask) -> Mutation:
    mask = np.asarray(mask, dtype=bool)
    kept = np.flatnonzero(~mask)
    _replace(cloud, cloud.subset(kept))
    return Mutation(kept, 0, prunes=int(mask.sum()))


def densify_and_prune(cloud: GaussianCloud, grad_accum, denom, max_radii,
                      cfg: DensifyConfig, extent: float,
                      constraint: Optional[ConstraintConfig] = None, rng=None,
                      prune_screen_size: bool = False) -> Mutation:
    """Clone, split and prune by accumulated screen-space gradient.

    ``grad_accum`` holds summed per-view gradient norms and ``denom`` the
    matching view counts. New Gaussians are passed through the scale clamp
    when ``constraint`` is enabled.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    n0 = len(cloud)
    if n0 == 0:
        return Mutation.identity(0)
    grads = np.where(denom > 0, grad_accum / np.maximum(denom, 1), 0.0)
    high = grads >= cfg.grad_threshold
    max_scale = cloud.scales.max(axis=1)
    small = max_scale <= cfg.percent_dense * extent
    clone_mask = high & small
    split_mask = high & ~small

    clones = cloud.subset(np.flatnonzero(clone_mask))
    clones.ages = np.zeros(len(clones), dtype=np.int64)
    parents = np.flatnonzero(split_mask)
    children = _sample_children(cloud, parents, 2, cfg.split_factor, rng)
    survivors = np.flatnonzero(~split_mask)
    _replace(cloud, GaussianCloud.concatenate([cloud.subset(survivors), clones, children]))
    n_new = len(clones) + len(children)
    step = Mutation(survivors, n_new, clones=len(clones), splits=len(parents),
                    new_ids=np.arange(len(survivors), len(survivors) + n_new))

    radii = np.concatenate([np.asarray(max_radii)[survivors], np.zeros(n_new)])
    bad = cloud.alphas < cfg.min_opacity
    if prune_screen_size:
        bad |= radii > cfg.max_screen_size
        bad |= cloud.scales.max(axis=1) > cfg.world_size_prune * extent
    pruned = prune(cloud, bad)
    result = step.then(pruned)

    if constraint is not None and constraint.enabled:
        result.clamped = apply_scale_constraint(cloud, constraint, result.new_ids)
    return result


def reset_opacity(cloud: GaussianCloud, ceiling: float = 0.01) -> None:
    ceiling_logit = np.log(ceiling) - np.log1p(-ceiling)
    cloud.opacities = np.minimum(cloud.opacities, ceiling_logit)
