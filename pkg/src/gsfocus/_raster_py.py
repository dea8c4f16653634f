"""Pure numpy compositing kernels, used when the compiled module is absent.

Each tile is processed as a dense ``pixels x gaussians`` block, so the
results agree with the compiled kernels up to summation order.
"""

import numpy as np


def _tile_pixels(tx, ty, width, height, tile_size):
    x0, y0 = tx * tile_size, ty * tile_size
    x1, y1 = min(x0 + tile_size, width), min(y0 + tile_size, height)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    return (x0, y0, x1, y1), xs.ravel() + 0.5, ys.ravel() + 0.5


def _tile_alphas(ids, px, py, means2d, conics, opac, alpha_min, alpha_max):
    dx = px[:, None] - means2d[ids, 0][None, :]
    dy = py[:, None] - means2d[ids, 1][None, :]
    a, b, c = conics[ids, 0], conics[ids, 1], conics[ids, 2]
    power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
    gv = np.exp(np.minimum(power, 0.0))
    raw = opac[ids] * gv
    alpha = np.minimum(raw, alpha_max)
    keep = (power <= 0.0) & (alpha >= alpha_min)
    alpha = np.where(keep, alpha, 0.0)
    return dx, dy, gv, raw, alpha, keep


def _transmittance(alpha):
    one_minus = 1.0 - alpha
    T = np.ones_like(alpha)
    if alpha.shape[1] > 1:
        T[:, 1:] = np.cumprod(one_minus[:, :-1], axis=1)
    t_final = T[:, -1] * one_minus[:, -1] if alpha.shape[1] else np.ones(len(alpha))
    return T, t_final


def composite_forward(means2d, conics, colors, opac, tile_offsets, tile_ids,
                      width, height, tile_size, bg, alpha_min, alpha_max):
    n = len(means2d)
    bg = np.asarray(bg, dtype=np.float64)
    image = np.empty((height, width, 3))
    final_t = np.empty((height, width))
    max_w = np.zeros(n)
    ntx = (width + tile_size - 1) // tile_size
    nty = (height + tile_size - 1) // tile_size
    for ty in range(nty):
        for tx in range(ntx):
            tile = ty * ntx + tx
            (x0, y0, x1, y1), px, py = _tile_pixels(tx, ty, width, height, tile_size)
            ids = tile_ids[tile_offsets[tile]:tile_offsets[tile + 1]]
            shape = (y1 - y0, x1 - x0)
            if len(ids) == 0:
                image[y0:y1, x0:x1] = bg
                final_t[y0:y1, x0:x1] = 1.0
                continue
            *_, alpha, _ = _tile_alphas(ids, px, py, means2d, conics, opac, alpha_min, alpha_max)
            T, t_final = _transmittance(alpha)
            w = alpha * T
            rgb = w @ colors[ids] + t_final[:, None] * bg
            image[y0:y1, x0:x1] = rgb.reshape(shape + (3,))
            final_t[y0:y1, x0:x1] = t_final.reshape(shape)
            np.maximum.at(max_w, ids, w.max(axis=0))
    return image, final_t, max_w


def composite_backward(means2d, conics, colors, opac, tile_offsets, tile_ids,
                       width, height, tile_size, bg, alpha_min, alpha_max, d_image):
    n = len(means2d)
    bg = np.asarray(bg, dtype=np.float64)
    d_means = np.zeros((n, 2))
    d_conics = np.zeros((n, 3))
    d_colors = np.zeros((n, 3))
    d_opac = np.zeros(n)
    ntx = (width + tile_size - 1) // tile_size
    nty = (height + tile_size - 1) // tile_size
    for ty in range(nty):
        for tx in range(ntx):
            tile = ty * ntx + tx
            ids = tile_ids[tile_offsets[tile]:tile_offsets[tile + 1]]
            if len(ids) == 0:
                continue
            (x0, y0, x1, y1), px, py = _tile_pixels(tx, ty, width, height, tile_size)
            g_pix = d_image[y0:y1, x0:x1].reshape(-1, 3)
            dx, dy, gv, raw, alpha, keep = _tile_alphas(
                ids, px, py, means2d, conics, opac, alpha_min, alpha_max)
            T, t_final = _transmittance(alpha)
            w = alpha * T
            col = colors[ids]
            # composite of everything behind each splat, scaled by T_{k+1}
            contrib = w[:, :, None] * col[None, :, :]
            suffix = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1] - contrib
            suffix += (t_final[:, None] * np.ones_like(alpha))[:, :, None] * bg
            behind = suffix / (1.0 - alpha)[:, :, None]
            d_alpha = np.einsum("pc,pkc->pk", g_pix, T[:, :, None] * col[None] - behind)
            d_colors_t = w.T @ g_pix
            live = keep & (raw <= alpha_max)
            d_alpha = np.where(live, d_alpha, 0.0)
            d_power = d_alpha * alpha
            a, b, c = conics[ids, 0], conics[ids, 1], conics[ids, 2]
            np.add.at(d_colors, ids, d_colors_t)
            np.add.at(d_opac, ids, np.sum(d_alpha * gv, axis=0))
            dc = np.stack([np.sum(-0.5 * dx * dx * d_power, 0),
                           np.sum(-dx * dy * d_power, 0),
                           np.sum(-0.5 * dy * dy * d_power, 0)], axis=1)
            np.add.at(d_conics, ids, dc)
            dm = np.stack([np.sum((a * dx + b * dy) * d_power, 0),
                           np.sum((b * dx + c * dy) * d_power, 0)], axis=1)
            np.add.at(d_means, ids, dm)
    return d_means, d_conics, d_colors, d_opac
