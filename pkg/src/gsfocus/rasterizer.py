"""Tile-based forward rendering and its analytic backward pass."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _backend
from .core import Camera, GaussianCloud, Projection, RenderSettings, project_backward, project_cloud
from .errors import ContractError


@dataclass
class TileBin:
    origin: tuple
    entries: list  # [(gaussian index, depth)], ascending depth


@dataclass
class RenderAux:
    """Everything the backward pass and densification need from a forward call."""

    projection: Projection
    tile_offsets: np.ndarray
    tile_ids: np.ndarray
    final_transmittance: np.ndarray
    max_contribution: np.ndarray
    touched: np.ndarray  # bool per Gaussian: binned into at least one tile
    num_gaussians: int
    camera_id: int
    width: int
    height: int
    settings: RenderSettings

    def tile_bins(self):
        """Materialize the bins as :class:`TileBin` objects (for inspection)."""
        ts = self.settings.tile_size
        ntx = (self.width + ts - 1) // ts
        bins = []
        for tile in range(len(self.tile_offsets) - 1):
            ids = self.tile_ids[self.tile_offsets[tile]:self.tile_offsets[tile + 1]]
            origin = ((tile % ntx) * ts, (tile // ntx) * ts)
            bins.append(TileBin(origin, [(int(g), float(self.projection.depths[g])) for g in ids]))
        return bins


@dataclass
class GradientBuffer:
    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    sh1: Optional[np.ndarray] = None
    means2d: Optional[np.ndarray] = None  # screen-space, pixel units

    @classmethod
    def zeros_like(cls, cloud: GaussianCloud) -> "GradientBuffer":
        n = len(cloud)
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros(n),
                   np.zeros((n, 3)), None if cloud.sh1 is None else np.zeros((n, 3, 3)),
                   np.zeros((n, 2)))

    def groups(self) -> dict:
        g = {"positions": self.positions, "log_scales": self.log_scales,
             "rotations": self.rotations, "opacities": self.opacities, "colors": self.colors}
        if self.sh1 is not None:
            g["sh1"] = self.sh1
        return g


def build_tile_bins(proj: Projection, width: int, height: int, tile_size: int):
    """Depth-sorted per-tile Gaussian lists in CSR form ``(offsets, ids, touched)``.

    A Gaussian is binned into every tile overlapped by the axis-aligned box
    of its 3-sigma ellipse. Depth ties keep storage order.
    """
    ntx = (width + tile_size - 1) // tile_size
    nty = (height + tile_size - 1) // tile_size
    vis = np.flatnonzero(proj.visible)
    order = vis[np.argsort(proj.depths[vis], kind="stable")]
    m = proj.means2d[order]
    e = proj.extents[order]
    lo, hi = m - e, m + e
    inside = (hi[:, 0] >= 0) & (lo[:, 0] < width) & (hi[:, 1] >= 0) & (lo[:, 1] < height)
    order, lo, hi = order[inside], lo[inside], hi[inside]
    tx0 = np.clip(np.floor(lo[:, 0] / tile_size), 0, ntx - 1).astype(np.int64)
    tx1 = np.clip(np.floor(hi[:, 0] / tile_size), 0, ntx - 1).astype(np.int64)
    ty0 = np.clip(np.floor(lo[:, 1] / tile_size), 0, nty - 1).astype(np.int64)
    ty1 = np.clip(np.floor(hi[:, 1] / tile_size), 0, nty - 1).astype(np.int64)
    wx, wy = tx1 - tx0 + 1, ty1 - ty0 + 1
    counts = wx * wy
    total = int(counts.sum())
    rank = np.repeat(np.arange(len(order)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    tile_x = tx0[rank] + local % wx[rank]
    tile_y = ty0[rank] + local // wx[rank]
    tile = tile_y * ntx + tile_x
    sort = np.lexsort((rank, tile))
    tile_ids = np.ascontiguousarray(order[rank[sort]], dtype=np.int64)
    offsets = np.zeros(ntx * nty + 1, dtype=np.int64)
    np.cumsum(np.bincount(tile, minlength=ntx * nty), out=offsets[1:])
    touched = np.zeros(len(proj.visible), dtype=bool)
    touched[order] = True
    return offsets, tile_ids, touched


def _kernel_args(proj: Projection):
    c = np.ascontiguousarray
    return (c(proj.means2d, dtype=np.float64), c(proj.conics, dtype=np.float64),
            c(proj.colors, dtype=np.float64), c(proj.alphas, dtype=np.float64))


def render(cloud: GaussianCloud, camera: Camera, settings: Optional[RenderSettings] = None,
           backend: Optional[str] = None):
    """Render ``cloud`` from ``camera``; returns ``(image, aux)``."""
    st = settings or RenderSettings()
    kern = _backend.get(backend) if backend else _backend.kernels
    proj = project_cloud(cloud, camera, st)
    offsets, ids, touched = build_tile_bins(proj, camera.width, camera.height, st.tile_size)
    bg = np.asarray(st.background, dtype=np.float64)
    image, final_t, max_w = kern.composite_forward(
        *_kernel_args(proj), offsets, ids, camera.width, camera.height, st.tile_size,
        bg, st.alpha_min, st.alpha_max)
    aux = RenderAux(proj, offsets, ids, final_t, max_w, touched, len(cloud), camera.image_id,
                    camera.width, camera.height, st)
    return image, aux


def render_backward(cloud: GaussianCloud, camera: Camera, aux: RenderAux, d_image,
                    backend: Optional[str] = None) -> GradientBuffer:
    """Gradients of a scalar loss w.r.t. every parameter group of ``cloud``."""
    if (aux.num_gaussians != len(cloud) or aux.camera_id != camera.image_id
            or aux.width != camera.width or aux.height != camera.height):
        raise ContractError("render aux does not match this cloud/camera pair")
    d_image = np.ascontiguousarray(d_image, dtype=np.float64)
    if d_image.shape != (camera.height, camera.width, 3):
        raise ContractError(f"gradient image has shape {d_image.shape}")
    st = aux.settings
    kern = _backend.get(backend) if backend else _backend.kernels
    proj = aux.projection
    d_means, d_conics, d_colors, d_opac = kern.composite_backward(
        *_kernel_args(proj), aux.tile_offsets, aux.tile_ids, camera.width, camera.height,
        st.tile_size, np.asarray(st.background, dtype=np.float64), st.alpha_min,
        st.alpha_max, d_image)
    grads = project_backward(cloud, camera, proj, d_means, d_conics, d_colors, d_opac, st)
    return GradientBuffer(means2d=d_means, **grads)
