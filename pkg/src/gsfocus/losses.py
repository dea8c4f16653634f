"""Image losses with gradients w.r.t. their first argument, plus PSNR/SSIM.

Each loss returns ``(value, grad)`` where ``grad`` has the shape of the
first image. Images are ``(H, W, 3)`` float arrays.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .attention import enhance_vjp
from .errors import ContractError, InvalidParameterError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


@dataclass
class LossWeights:
    lam: float = 0.2    # D-SSIM weight
    beta: float = 0.1   # edge weight
    eta: float = 0.1    # frequency weight

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise InvalidParameterError("lambda must lie in [0, 1]")
        if self.beta < 0 or self.eta < 0:
            raise InvalidParameterError("beta and eta must be non-negative")


@dataclass
class LossReport:
    total: float
    l1: float
    dssim: float
    edge: float
    frequency: float
    attention: bool

    def recombine(self, w: LossWeights) -> float:
        return (1 - w.lam) * self.l1 + w.lam * self.dssim + w.beta * self.edge + w.eta * self.frequency

    def as_dict(self) -> dict:
        return asdict(self)


def _pair(a, b, min_size=1):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 3:
        raise ContractError(f"expected (H, W, C) images, got {a.shape}")
    if a.shape[0] < min_size or a.shape[1] < min_size:
        raise ContractError(f"images must be at least {min_size}x{min_size}, got {a.shape[:2]}")
    return a, b


def l1_loss(a, b):
    a, b = _pair(a, b)
    diff = a - b
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


# --------------------------------------------------------------------------
# SSIM
# --------------------------------------------------------------------------


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x, g):
    """Separable 'valid' correlation over the two spatial axes."""
    k = len(g)
    h, w = x.shape[0] - k + 1, x.shape[1] - k + 1
    rows = sum(g[i] * x[i:i + h] for i in range(k))
    return sum(g[j] * rows[:, j:j + w] for j in range(k))


def _filter_valid_adjoint(y, g, shape):
    k = len(g)
    h, w = y.shape[0], y.shape[1]
    cols = np.zeros((h, shape[1]) + y.shape[2:])
    for j in range(k):
        cols[:, j:j + w] += g[j] * y
    out = np.zeros(shape[:2] + y.shape[2:])
    for i in range(k):
        out[i:i + h] += g[i] * cols
    return out


def _ssim_terms(a, b):
    g = gaussian_window()
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    e_aa, e_bb, e_ab = _filter_valid(a * a, g), _filter_valid(b * b, g), _filter_valid(a * b, g)
    A1 = 2 * mu_a * mu_b + SSIM_C1
    A2 = 2 * (e_ab - mu_a * mu_b) + SSIM_C2
    B1 = mu_a**2 + mu_b**2 + SSIM_C1
    B2 = (e_aa - mu_a**2) + (e_bb - mu_b**2) + SSIM_C2
    smap = A1 * A2 / (B1 * B2)
    return g, smap, (mu_a, mu_b, A1, A2, B1, B2)


def ssim(a, b) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), valid region only."""
    a, b = _pair(a, b, SSIM_WINDOW)
    return float(np.mean(_ssim_terms(a, b)[1]))


def dssim_loss(a, b):
    a, b = _pair(a, b, SSIM_WINDOW)
    g, smap, (mu_a, mu_b, A1, A2, B1, B2) = _ssim_terms(a, b)
    value = (1.0 - float(np.mean(smap))) / 2.0
    scale = -0.5 / smap.size
    d_mu = smap * (2 * mu_b / A1 - 2 * mu_b / A2 - 2 * mu_a / B1 + 2 * mu_a / B2)
    d_eaa = -smap / B2
    d_eab = 2 * smap / A2
    adj = lambda t: _filter_valid_adjoint(t, g, a.shape)  # noqa: E731
    grad = adj(d_mu) + 2 * a * adj(d_eaa) + b * adj(d_eab)
    return value, scale * grad


# --------------------------------------------------------------------------
# Edge (Sobel) and frequency (forward-difference) losses
# --------------------------------------------------------------------------


def _correlate3_adjoint(y, k):
    h, w = y.shape[:2]
    p = np.zeros((h + 2, w + 2) + y.shape[2:])
    for i in range(3):
        for j in range(3):
            if k[i, j] != 0.0:
                p[i:i + h, j:j + w] += k[i, j] * y
    # fold replicated border back onto the edge pixels
    p[1] += p[0]
    p[-2] += p[-1]
    p[:, 1] += p[:, 0]
    p[:, -2] += p[:, -1]
    return p[1:-1, 1:-1]


def sobel(x):
    """Horizontal and vertical Sobel responses with replicate padding.

    Evaluated separably (difference, then smoothing) so that flat regions
    give exactly zero.
    """
    x = np.asarray(x, dtype=np.float64)
    p = np.pad(x, ((1, 1), (1, 1), (0, 0)), mode="edge")
    dx = p[:, 2:] - p[:, :-2]
    dy = p[2:] - p[:-2]
    gx = dx[:-2] + 2.0 * dx[1:-1] + dx[2:]
    gy = dy[:, :-2] + 2.0 * dy[:, 1:-1] + dy[:, 2:]
    return gx, gy


def edge_loss(a, b):
    a, b = _pair(a, b, 3)
    ax, ay = sobel(a)
    bx, by = sobel(b)
    lx, gx = l1_loss(ax, bx)
    ly, gy = l1_loss(ay, by)
    grad = 0.5 * (_correlate3_adjoint(gx, SOBEL_X) + _correlate3_adjoint(gy, SOBEL_Y))
    return 0.5 * (lx + ly), grad


def forward_differences(x):
    x = np.asarray(x, dtype=np.float64)
    return x[:, 1:] - x[:, :-1], x[1:] - x[:-1]


def frequency_loss(a, b):
    a, b = _pair(a, b, 2)
    ax, ay = forward_differences(a)
    bx, by = forward_differences(b)
    lx, gx = l1_loss(ax, bx)
    ly, gy = l1_loss(ay, by)
    grad = np.zeros_like(a)
    grad[:, 1:] += 0.5 * gx
    grad[:, :-1] -= 0.5 * gx
    grad[1:] += 0.5 * gy
    grad[:-1] -= 0.5 * gy
    return 0.5 * (lx + ly), grad


# --------------------------------------------------------------------------
# Scheduled total loss
# --------------------------------------------------------------------------


def is_attention_iteration(iteration: int, attn_interval: Optional[int]) -> bool:
    return bool(attn_interval) and iteration % attn_interval == 0


def total_loss(rendered, enhanced, truth, weights: LossWeights, iteration: int,
               attn_interval: Optional[int], attention_map=None):
    """Weighted sum of L1, D-SSIM, edge and frequency terms.

    On attention iterations the edge and frequency terms compare the
    attention-enhanced render against ``truth``; their gradient reaches
    ``rendered`` through the (constant) map, zeroed where enhancement clipped.
    Returns ``(LossReport, grad)``.
    """
    rendered, truth = _pair(rendered, truth)
    scheduled = is_attention_iteration(iteration, attn_interval)
    if scheduled and enhanced is None:
        raise ContractError(f"iteration {iteration} requires an attention-enhanced image")
    if not scheduled and enhanced is not None:
        raise ContractError(f"iteration {iteration} is not an attention iteration")

    l1, g_l1 = l1_loss(rendered, truth)
    ds, g_ds = dssim_loss(rendered, truth)
    target = rendered
    if scheduled:
        target = np.asarray(enhanced, dtype=np.float64)
        if attention_map is None:
            raise ContractError("attention map required to propagate through the enhanced image")
    edge, g_edge = edge_loss(target, truth)
    freq, g_freq = frequency_loss(target, truth)

    g_rest = weights.beta * g_edge + weights.eta * g_freq
    if scheduled:
        g_rest = enhance_vjp(rendered, attention_map, g_rest)
    grad = (1 - weights.lam) * g_l1 + weights.lam * g_ds + g_rest
    report = LossReport(0.0, l1, ds, edge, freq, scheduled)
    report.total = report.recombine(weights)
    return report, grad


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------


def psnr(a, b) -> float:
    """PSNR in dB for images in [0, 1]; ``inf`` for identical inputs."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)
