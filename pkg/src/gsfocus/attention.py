"""Patch attention between a rendered image and its ground truth.

Both images are cut into an 8x8 grid. Inside each patch every pixel is a
token: queries come from the rendered patch, keys and values from the
ground-truth patch, each produced by a fixed 3x3 convolution over the
grayscale patch. The per-patch outputs are stitched back into a full-size
weighting map that multiplies the rendered image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import correlate2d

from .errors import ContractError

GRID = 8
ENHANCE_MAX = 4.0


@dataclass
class PatchGrid:
    height: int
    width: int
    bounds: list  # (row0, row1, col0, col1) per patch, row-major

    @classmethod
    def for_shape(cls, height: int, width: int, n: int = GRID) -> "PatchGrid":
        if height < n or width < n:
            raise ContractError(f"image {height}x{width} is smaller than the {n}x{n} grid")
        rows = [i * (height // n) for i in range(n)] + [height]
        cols = [j * (width // n) for j in range(n)] + [width]
        bounds = [(rows[i], rows[i + 1], cols[j], cols[j + 1]) for i in range(n) for j in range(n)]
        return cls(height, width, bounds)

    def __len__(self):
        return len(self.bounds)


@dataclass
class QKVProjector:
    query: np.ndarray
    key: np.ndarray
    value: np.ndarray

    @classmethod
    def from_seed(cls, seed: int = 0, kernel_size: int = 3) -> "QKVProjector":
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ContractError("kernel size must be a positive odd integer")
        rng = np.random.default_rng(seed)
        shape = (kernel_size, kernel_size)
        q = rng.normal(0.0, 1.0 / kernel_size, shape)
        k = rng.normal(0.0, 1.0 / kernel_size, shape)
        # non-negative, unit-sum value kernel keeps the map non-negative
        v = np.abs(rng.normal(0.0, 1.0, shape))
        return cls(q, k, v / v.sum())

    @staticmethod
    def features(patch: np.ndarray, kernel: np.ndarray) -> np.ndarray:
        return correlate2d(patch, kernel, mode="same", boundary="fill", fillvalue=0.0)


@dataclass
class AttentionMap:
    weights: np.ndarray  # (H, W)
    submaps: list


def to_gray(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img.mean(axis=2) if img.ndim == 3 else img


def _softmax_rows(scores):
    z = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def compute_patch_attention(rendered_patch, truth_patch, projector: QKVProjector,
                            return_weights: bool = False):
    """Attention sub-map for one patch (shape of the patch, single channel)."""
    p = to_gray(rendered_patch)
    g = to_gray(truth_patch)
    if p.shape != g.shape:
        raise ContractError(f"patch shapes differ: {p.shape} vs {g.shape}")
    if p.size < 1:
        raise ContractError("empty patch")
    q = projector.features(p, projector.query).reshape(-1, 1)
    k = projector.features(g, projector.key).reshape(-1, 1)
    v = projector.features(g, projector.value).reshape(-1, 1)
    w = _softmax_rows(q @ k.T)
    a = (w @ v).reshape(p.shape)
    if return_weights:
        return a, w
    return a


def assemble_attention_map(submaps, grid: PatchGrid, normalize: bool = True) -> AttentionMap:
    """Stitch patch sub-maps into a full map, optionally rescaled to mean 1.

    An all-zero map cannot be rescaled and is replaced by ones.
    """
    submaps = list(submaps)
    if len(submaps) != len(grid):
        raise ContractError(f"expected {len(grid)} sub-maps, got {len(submaps)}")
    out = np.empty((grid.height, grid.width))
    for (r0, r1, c0, c1), sub in zip(grid.bounds, submaps):
        sub = np.asarray(sub, dtype=np.float64)
        if sub.shape != (r1 - r0, c1 - c0):
            raise ContractError(f"sub-map shape {sub.shape} does not fit patch {(r0, r1, c0, c1)}")
        out[r0:r1, c0:c1] = sub
    if normalize:
        mean = out.mean()
        out = out / mean if mean > 0 else np.ones_like(out)
    return AttentionMap(out, submaps)


def attention_map(rendered, truth, projector: QKVProjector, normalize: bool = True) -> AttentionMap:
    rendered = np.asarray(rendered, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if rendered.shape != truth.shape:
        raise ContractError(f"image shapes differ: {rendered.shape} vs {truth.shape}")
    grid = PatchGrid.for_shape(*rendered.shape[:2])
    subs = [compute_patch_attention(rendered[r0:r1, c0:c1], truth[r0:r1, c0:c1], projector)
            for r0, r1, c0, c1 in grid.bounds]
    return assemble_attention_map(subs, grid, normalize)


def _weights(amap):
    return amap.weights if isinstance(amap, AttentionMap) else np.asarray(amap, dtype=np.float64)


def enhance(rendered, amap) -> np.ndarray:
    """Per-channel product with the map, clipped to ``[0, 4]``."""
    rendered = np.asarray(rendered, dtype=np.float64)
    w = _weights(amap)
    if w.shape != rendered.shape[:2]:
        raise ContractError(f"map shape {w.shape} does not match image {rendered.shape[:2]}")
    return np.clip(rendered * w[..., None], 0.0, ENHANCE_MAX)


def enhance_vjp(rendered, amap, grad) -> np.ndarray:
    """Gradient through :func:`enhance` with the map held constant."""
    w = _weights(amap)[..., None]
    prod = np.asarray(rendered) * w
    passed = (prod >= 0.0) & (prod <= ENHANCE_MAX)
    return np.where(passed, grad * w, 0.0)
