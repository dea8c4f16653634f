"""Block-wise decomposition of large scenes and recombination of the results.

Workflow: :func:`compute_bounds` -> :func:`subdivide` -> :func:`filter_outliers`
-> :func:`assign_cameras` -> :func:`export_bundles`; after each bundle is
trained independently, :func:`merge_blocks` stitches the clouds back.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import GaussianCloud
from .errors import ContractError, GSFocusError, InsufficientDataError
from .sfm import SfmDataset, write_sfm

MIN_EXTENT = 1e-3


@dataclass
class BoundingBox:
    lo: np.ndarray
    hi: np.ndarray

    def contains(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.all((p >= self.lo) & (p <= self.hi), axis=1)

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo


@dataclass
class Block:
    index: tuple
    lo: np.ndarray
    hi: np.ndarray
    members: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    candidates: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    cameras: list = field(default_factory=list)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def half_diagonal(self) -> float:
        return 0.5 * float(np.linalg.norm(self.hi - self.lo))

    @property
    def name(self) -> str:
        return "block_{}_{}_{}".format(*self.index)

    def retained(self) -> np.ndarray:
        return np.union1d(self.members, self.candidates)


@dataclass
class ScenePartition:
    """``n**3`` blocks over ``box``; point ids are row indices into ``points``."""

    n: int
    box: BoundingBox
    edges: np.ndarray          # (3, n + 1) block boundaries per axis
    blocks: list
    points: np.ndarray
    discarded: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    untrainable: list = field(default_factory=list)

    def block(self, index) -> Block:
        i, j, k = index
        return self.blocks[(i * self.n + j) * self.n + k]

    def retained(self) -> np.ndarray:
        parts = [b.retained() for b in self.blocks]
        return np.sort(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64)

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "box": {"min": self.box.lo.tolist(), "max": self.box.hi.tolist()},
            "edges": self.edges.tolist(),
            "blocks": [{"index": list(b.index), "name": b.name, "min": b.lo.tolist(),
                        "max": b.hi.tolist(), "center": b.center.tolist(),
                        "num_points": int(len(b.retained())), "cameras": [int(c) for c in b.cameras],
                        "trainable": b.name not in self.untrainable} for b in self.blocks],
            "discarded": [int(d) for d in self.discarded],
            "untrainable": list(self.untrainable),
        }


def _json_dump(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_partition_manifest(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


# --------------------------------------------------------------------------
# Operations
# --------------------------------------------------------------------------


def compute_bounds(points, percentile: float = 1.0, expand: float = 0.01) -> BoundingBox:
    """Per-axis percentile box, padded by ``expand`` of its extent on each side."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0:
        raise InsufficientDataError("cannot bound an empty point set")
    lo = np.percentile(p, percentile, axis=0)
    hi = np.percentile(p, 100.0 - percentile, axis=0)
    pad = expand * (hi - lo)
    lo, hi = lo - pad, hi + pad
    small = (hi - lo) < MIN_EXTENT
    mid = 0.5 * (lo + hi)
    lo = np.where(small, mid - MIN_EXTENT / 2, lo)
    hi = np.where(small, mid + MIN_EXTENT / 2, hi)
    return BoundingBox(lo, hi)


def block_coordinates(points, edges, n: int) -> np.ndarray:
    """Per-axis block index via the half-open interval test (top face closed).

    Points outside the box map to the nearest block along each axis.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    idx = np.empty((len(p), 3), dtype=np.int64)
    for axis in range(3):
        idx[:, axis] = np.searchsorted(edges[axis], p[:, axis], side="right") - 1
    return np.clip(idx, 0, n - 1)


def subdivide(points, box: BoundingBox, n: int) -> ScenePartition:
    if n < 1:
        raise ContractError("block count per axis must be >= 1")
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    edges = np.stack([np.linspace(box.lo[a], box.hi[a], n + 1) for a in range(3)])
    edges[:, 0], edges[:, -1] = box.lo, box.hi
    coords = block_coordinates(p, edges, n)
    flat = (coords[:, 0] * n + coords[:, 1]) * n + coords[:, 2]
    inside = box.contains(p)
    blocks = []
    for i in range(n):
        for j in range(n):
            for k in range(n):
                b = (i * n + j) * n + k
                lo = np.array([edges[0, i], edges[1, j], edges[2, k]])
                hi = np.array([edges[0, i + 1], edges[1, j + 1], edges[2, k + 1]])
                sel = flat == b
                blocks.append(Block((i, j, k), lo, hi,
                                    np.flatnonzero(sel & inside), np.flatnonzero(sel & ~inside)))
    return ScenePartition(n, box, edges, blocks, p)


def filter_outliers(partition: ScenePartition, theta_multiplier: float = 1.0) -> ScenePartition:
    """Discard points farther than ``theta_multiplier`` half-diagonals from their block centre."""
    discarded = [partition.discarded]
    for b in partition.blocks:
        theta = theta_multiplier * b.half_diagonal
        for attr in ("members", "candidates"):
            ids = getattr(b, attr)
            if len(ids) == 0:
                continue
            dist = np.linalg.norm(partition.points[ids] - b.center, axis=1)
            far = dist > theta
            discarded.append(ids[far])
            setattr(b, attr, ids[~far])
    partition.discarded = np.sort(np.concatenate(discarded)).astype(np.int64)
    return partition


def assign_cameras(partition: ScenePartition, cameras, visibility: dict,
                   min_views: int = 20, expand: float = 1.2,
                   point_ids: Optional[np.ndarray] = None) -> dict:
    """Attach cameras to blocks by visible-point count or by position.

    ``visibility`` maps image ids to observed point ids; ``point_ids`` maps
    partition row indices to those ids (identity when omitted). Returns
    ``{block name: [image ids]}`` and records the result on each block.
    """
    n_pts = len(partition.points)
    if point_ids is None:
        point_ids = np.arange(n_pts)
    row_of = {int(pid): r for r, pid in enumerate(point_ids)}
    owner = np.full(n_pts, -1, dtype=np.int64)
    for bi, b in enumerate(partition.blocks):
        owner[b.retained()] = bi
    counts = {}
    for cam in cameras:
        seen = visibility.get(cam.image_id, [])
        try:
            rows = np.array([row_of[int(p)] for p in seen], dtype=np.int64)
        except KeyError as exc:
            raise ContractError(f"camera {cam.image_id} sees unknown point {exc.args[0]}") from None
        owners = owner[rows] if len(rows) else np.zeros(0, dtype=np.int64)
        counts[cam.image_id] = np.bincount(owners[owners >= 0], minlength=len(partition.blocks))
    result = {}
    partition.untrainable = []
    for bi, b in enumerate(partition.blocks):
        half = 0.5 * expand * (b.hi - b.lo)
        lo, hi = b.center - half, b.center + half
        chosen = []
        for cam in cameras:
            pos = cam.position
            by_view = counts[cam.image_id][bi] >= min_views
            by_pos = bool(np.all((pos >= lo) & (pos <= hi)))
            if by_view or by_pos:
                chosen.append(cam.image_id)
        b.cameras = sorted(chosen)
        result[b.name] = b.cameras
        if len(b.cameras) < 2 or len(b.retained()) < 4:
            partition.untrainable.append(b.name)
    return result


def export_bundles(partition: ScenePartition, dataset: SfmDataset, out_dir,
                   image_dir: Optional[str] = None, point_ids: Optional[np.ndarray] = None,
                   overrides: Optional[dict] = None) -> list:
    """Write one directory per block plus ``partition.json``.

    Trainable blocks get the SfM text files restricted to their cameras and
    retained points; untrainable ones only a manifest flagged
    ``"trainable": false``. Images are referenced, not copied; manifests
    store the image directory relative to the bundle. Returns the
    directories of the trainable bundles.
    """
    os.makedirs(out_dir, exist_ok=True)
    if point_ids is None:
        point_ids = np.array(sorted(dataset.points), dtype=np.int64)
    if image_dir is None and dataset.root is not None:
        image_dir = os.path.join(dataset.root, "images")
    written = []
    for b in partition.blocks:
        trainable = b.name not in partition.untrainable
        bdir = os.path.join(out_dir, b.name)
        try:
            os.makedirs(bdir, exist_ok=True)
            if trainable:
                write_sfm(dataset.subset(b.cameras, point_ids[b.retained()]), bdir)
            rel = os.path.relpath(os.path.abspath(image_dir), os.path.abspath(bdir)) if image_dir else None
            _json_dump({"block": list(b.index), "min": b.lo.tolist(), "max": b.hi.tolist(),
                        "center": b.center.tolist(), "num_points": int(len(b.retained())),
                        "cameras": [int(c) for c in b.cameras], "image_dir": rel,
                        "trainable": trainable, "config_overrides": dict(overrides or {})},
                       os.path.join(bdir, "manifest.json"))
        except OSError as exc:
            raise GSFocusError(f"failed to export block {b.index}: {exc}") from exc
        if trainable:
            written.append(bdir)
    manifest = partition.to_json()
    manifest["discarded_point_ids"] = [int(point_ids[d]) for d in partition.discarded]
    _json_dump(manifest, os.path.join(out_dir, "partition.json"))
    return written


def _outside_block(positions, lo, hi, box_lo, box_hi) -> np.ndarray:
    # outer faces of the global box are treated as unbounded
    lo = np.where(np.isclose(lo, box_lo), -np.inf, lo)
    hi = np.where(np.isclose(hi, box_hi), np.inf, hi)
    return ~np.all((positions >= lo) & (positions <= hi), axis=1)


def merge_blocks(clouds: dict, partition, cull_boundary: bool = True):
    """Concatenate per-block clouds, optionally dropping boundary drifters.

    ``clouds`` maps block indices ``(i, j, k)`` to trained clouds;
    ``partition`` is a :class:`ScenePartition` or its JSON manifest. Returns
    ``(cloud, report)``.
    """
    info = partition.to_json() if isinstance(partition, ScenePartition) else partition
    box_lo, box_hi = np.array(info["box"]["min"]), np.array(info["box"]["max"])
    blocks = {tuple(b["index"]): b for b in info["blocks"]}
    report = {"blocks": [], "missing": [], "culled": 0}
    parts = []
    for idx in sorted(clouds):
        if tuple(idx) not in blocks:
            raise ContractError(f"cloud tagged with unknown block {idx}")
    for idx, b in sorted(blocks.items()):
        if not b.get("trainable", True):
            continue
        cloud = clouds.get(idx)
        if cloud is None:
            warnings.warn(f"no trained cloud for block {idx}; merging without it")
            report["missing"].append(list(idx))
            continue
        culled = 0
        if cull_boundary and len(cloud):
            out = _outside_block(cloud.positions, np.array(b["min"]), np.array(b["max"]),
                                 box_lo, box_hi)
            culled = int(out.sum())
            cloud = cloud.subset(np.flatnonzero(~out))
        report["culled"] += culled
        report["blocks"].append({"index": list(idx), "size": len(cloud), "culled": culled})
        parts.append(cloud)
    merged = GaussianCloud.concatenate(parts) if parts else GaussianCloud.empty()
    report["size"] = len(merged)
    return merged, report
