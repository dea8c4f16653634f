"""Adam over the cloud's parameter groups and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .attention import QKVProjector, attention_map, enhance
from .config import TrainConfig
from .constraints import (Mutation, apply_scale_constraint, densify_and_prune, init_scales,
                          reset_opacity, selective_split)
from .core import GaussianCloud, logit
from .errors import ContractError, InsufficientDataError, NumericalAbort
from .losses import is_attention_iteration, psnr, ssim, total_loss
from .rasterizer import GradientBuffer, render, render_backward

log = logging.getLogger(__name__)

GROUP_LR = {"log_scales": "scale", "rotations": "rotation", "opacities": "opacity",
            "colors": "color", "sh1": "sh1"}


@dataclass
class AdamState:
    lrs: dict
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15

    @classmethod
    def for_cloud(cls, cloud: GaussianCloud, lrs: dict) -> "AdamState":
        groups = cloud.param_groups()
        missing = set(groups) - set(lrs)
        if missing:
            raise ContractError(f"no learning rate for {sorted(missing)}")
        return cls(dict(lrs), {k: np.zeros_like(p) for k, p in groups.items()},
                   {k: np.zeros_like(p) for k, p in groups.items()})

    def remap(self, mutation: Mutation) -> None:
        for k in self.m:
            self.m[k] = mutation.remap(self.m[k])
            self.v[k] = mutation.remap(self.v[k])

    def reset_group(self, name: str) -> None:
        self.m[name] = np.zeros_like(self.m[name])
        self.v[name] = np.zeros_like(self.v[name])


def adam_step(cloud: GaussianCloud, grads: GradientBuffer, state: AdamState) -> None:
    """One bias-corrected Adam update of every group, in place."""
    params = cloud.param_groups()
    gdict = grads.groups()
    if set(params) != set(gdict):
        raise ContractError(f"gradient groups {sorted(gdict)} do not match {sorted(params)}")
    for k, p in params.items():
        g = gdict[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ContractError(f"shape mismatch for {k}: param {p.shape}, grad {g.shape}, "
                                f"moment {state.m[k].shape}")
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for k, p in params.items():
        g = gdict[k]
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lrs[k] * (m / c1) / (np.sqrt(v / c2) + state.eps)
    cloud.normalize_rotations()


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


@dataclass
class TrainingData:
    views: list                 # [(Camera, image)]
    points: np.ndarray          # (N, 3) initial point positions
    point_colors: np.ndarray    # (N, 3) in [0, 1]
    test_views: list = field(default_factory=list)


@dataclass
class TrainResult:
    cloud: GaussianCloud
    log: list
    events: list


def camera_extent(cameras) -> float:
    """Radius of the camera centres around their mean, padded by 10%."""
    centers = np.stack([c.position for c in cameras])
    radius = np.linalg.norm(centers - centers.mean(axis=0), axis=1).max()
    return float(radius * 1.1) if radius > 0 else 1.0


def initialize_cloud(points, colors, cfg: TrainConfig) -> GaussianCloud:
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    cloud = GaussianCloud(
        points.copy(),
        init_scales(points, cfg.constraints.dense_factor),
        rot,
        np.full(n, float(logit(cfg.train.init_opacity))),
        np.asarray(colors, dtype=np.float64).copy(),
        sh1=np.zeros((n, 3, 3)) if cfg.train.sh_degree >= 1 else None,
    )
    if cfg.constraints.enabled:
        apply_scale_constraint(cloud, cfg.constraints)
    return cloud


def _finite(cloud: GaussianCloud) -> bool:
    # log-scales beyond ~700 overflow to infinite scales on the next render
    groups = cloud.param_groups().values()
    return all(np.all(np.isfinite(g)) for g in groups) and \
        (len(cloud) == 0 or cloud.log_scales.max() < 700.0)


class _CameraSampler:
    def __init__(self, n, rng):
        self.n, self.rng, self.queue = n, rng, []

    def next(self) -> int:
        if not self.queue:
            self.queue = list(self.rng.permutation(self.n))
        return int(self.queue.pop())


def train(data: TrainingData, cfg: TrainConfig, cloud: Optional[GaussianCloud] = None,
          checkpoint: Optional[Callable] = None) -> TrainResult:
    """Optimize a cloud against ``data.views``.

    ``checkpoint(iteration, cloud)`` is called every
    ``cfg.train.checkpoint_interval`` iterations when given.
    """
    cfg.validate()
    if len(data.views) < 2:
        raise InsufficientDataError("training needs at least 2 views")
    if cloud is None:
        cloud = initialize_cloud(data.points, data.point_colors, cfg)
    else:
        cloud = cloud.copy()
    if cfg.iterations == 0:
        return TrainResult(cloud, [], [])

    rng = np.random.default_rng(cfg.train.seed)
    split_rng = np.random.default_rng([cfg.train.seed, 1])
    sampler = _CameraSampler(len(data.views), rng)
    extent = camera_extent([c for c, _ in data.views])
    spatial = cfg.lr.spatial_scale or extent
    lrs = {"positions": cfg.lr.position_at(0, spatial)}
    lrs.update({k: getattr(cfg.lr, name) for k, name in GROUP_LR.items()})
    state = AdamState.for_cloud(cloud, lrs)
    projector = QKVProjector.from_seed(cfg.attention.seed, cfg.attention.kernel_size)
    attn_interval = cfg.attention.interval if cfg.attention.enabled else None
    st, dens, cons = cfg.render, cfg.densify, cfg.constraints

    grad_accum = np.zeros(len(cloud))
    denom = np.zeros(len(cloud))
    max_radii = np.zeros(len(cloud))
    history, events = [], []

    for it in range(1, cfg.iterations + 1):
        state.lrs["positions"] = cfg.lr.position_at(it - 1, spatial)
        cam, truth = data.views[sampler.next()]
        image, aux = render(cloud, cam, st)
        enhanced = amap = None
        if is_attention_iteration(it, attn_interval):
            amap = attention_map(image, truth, projector, cfg.attention.normalize)
            enhanced = enhance(image, amap)
        report, d_image = total_loss(image, enhanced, truth, cfg.loss, it, attn_interval, amap)
        if not math.isfinite(report.total):
            raise NumericalAbort(f"non-finite loss at iteration {it}", it, cloud)
        grads = render_backward(cloud, cam, aux, d_image)

        if dens.enabled and it <= dens.stop_iteration:
            ndc = grads.means2d * np.array([0.5 * cam.width, 0.5 * cam.height])
            seen = aux.touched
            grad_accum[seen] += np.linalg.norm(ndc[seen], axis=1)
            denom[seen] += 1
            max_radii[seen] = np.maximum(max_radii[seen], aux.projection.radii[seen])

        last_good = cloud.copy()
        adam_step(cloud, grads, state)
        if not _finite(cloud):
            raise NumericalAbort(f"parameters diverged at iteration {it}", it, last_good)
        cloud.ages += 1

        mutation = None
        if dens.scheduled(it):
            mutation = densify_and_prune(cloud, grad_accum, denom, max_radii, dens, extent,
                                         cons, split_rng,
                                         prune_screen_size=it > dens.opacity_reset_interval)
            state.remap(mutation)
            events.append({"iteration": it, "event": "densify", "clones": mutation.clones,
                           "splits": mutation.splits, "prunes": mutation.prunes,
                           "clamped": mutation.clamped, "size": len(cloud)})
            grad_accum = np.zeros(len(cloud))
            denom = np.zeros(len(cloud))
            max_radii = np.zeros(len(cloud))
        if dens.enabled and it <= dens.stop_iteration and it % dens.opacity_reset_interval == 0:
            reset_opacity(cloud)
            state.reset_group("opacities")
        if cons.scheduled(it):
            clamped = apply_scale_constraint(cloud, cons)
            mutation = selective_split(cloud, cons, split_rng)
            state.remap(mutation)
            grad_accum = mutation.remap(grad_accum)
            denom = mutation.remap(denom)
            max_radii = mutation.remap(max_radii)
            events.append({"iteration": it, "event": "constrain", "clamped": clamped,
                           "splits": mutation.splits, "size": len(cloud)})

        entry = {"iteration": it, "view": cam.image_id, "gaussians": len(cloud)}
        entry.update(report.as_dict())
        history.append(entry)
        if checkpoint is not None and cfg.train.checkpoint_interval and \
                it % cfg.train.checkpoint_interval == 0:
            checkpoint(it, cloud)
    return TrainResult(cloud, history, events)


def evaluate_views(cloud: GaussianCloud, views, settings=None) -> list:
    """Per-view PSNR/SSIM of the clipped render against ground truth."""
    out = []
    for cam, truth in views:
        image, _ = render(cloud, cam, settings)
        image = np.clip(image, 0.0, 1.0)
        out.append({"image_id": cam.image_id, "name": cam.name,
                    "psnr": psnr(image, truth), "ssim": ssim(image, truth)})
    return out


def summarize(metrics: list) -> dict:
    if not metrics:
        return {"psnr": float("nan"), "ssim": float("nan"), "views": 0}
    return {"psnr": float(np.mean([m["psnr"] for m in metrics])),
            "ssim": float(np.mean([m["ssim"] for m in metrics])),
            "views": len(metrics)}


def max_scale(cloud: GaussianCloud) -> float:
    return float(cloud.scales.max()) if len(cloud) else 0.0


__all__ = ["AdamState", "adam_step", "TrainingData", "TrainResult", "train", "initialize_cloud",
           "evaluate_views", "summarize", "camera_extent", "max_scale"]
