# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled front-to-back compositing kernels.

Signatures mirror :mod:`gsfocus._raster_py` exactly.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


def composite_forward(const double[:, ::1] means2d, const double[:, ::1] conics,
                      const double[:, ::1] colors, const double[::1] opac,
                      const cnp.int64_t[::1] tile_offsets, const cnp.int64_t[::1] tile_ids,
                      int width, int height, int tile_size, const double[::1] bg,
                      double alpha_min, double alpha_max):
    cdef Py_ssize_t n = means2d.shape[0]
    cdef int ntx = (width + tile_size - 1) // tile_size
    cdef int nty = (height + tile_size - 1) // tile_size
    image_arr = np.empty((height, width, 3), dtype=np.float64)
    final_t_arr = np.empty((height, width), dtype=np.float64)
    max_w_arr = np.zeros(n, dtype=np.float64)
    cdef double[:, :, ::1] image = image_arr
    cdef double[:, ::1] final_t = final_t_arr
    cdef double[::1] max_w = max_w_arr

    cdef int tx, ty, px, py, x0, y0, x1, y1
    cdef Py_ssize_t tile, k, g
    cdef double fx, fy, dx, dy, power, alpha, T, w, r, gr, b
    for ty in range(nty):
        for tx in range(ntx):
            tile = ty * ntx + tx
            x0 = tx * tile_size
            y0 = ty * tile_size
            x1 = min(x0 + tile_size, width)
            y1 = min(y0 + tile_size, height)
            for py in range(y0, y1):
                for px in range(x0, x1):
                    fx = px + 0.5
                    fy = py + 0.5
                    T = 1.0
                    r = 0.0
                    gr = 0.0
                    b = 0.0
                    for k in range(tile_offsets[tile], tile_offsets[tile + 1]):
                        g = tile_ids[k]
                        dx = fx - means2d[g, 0]
                        dy = fy - means2d[g, 1]
                        power = -0.5 * (conics[g, 0] * dx * dx + conics[g, 2] * dy * dy) \
                            - conics[g, 1] * dx * dy
                        if power > 0.0:
                            continue
                        alpha = opac[g] * exp(power)
                        if alpha > alpha_max:
                            alpha = alpha_max
                        if alpha < alpha_min:
                            continue
                        w = alpha * T
                        r += w * colors[g, 0]
                        gr += w * colors[g, 1]
                        b += w * colors[g, 2]
                        if w > max_w[g]:
                            max_w[g] = w
                        T *= 1.0 - alpha
                    image[py, px, 0] = r + T * bg[0]
                    image[py, px, 1] = gr + T * bg[1]
                    image[py, px, 2] = b + T * bg[2]
                    final_t[py, px] = T
    return image_arr, final_t_arr, max_w_arr


def composite_backward(const double[:, ::1] means2d, const double[:, ::1] conics,
                       const double[:, ::1] colors, const double[::1] opac,
                       const cnp.int64_t[::1] tile_offsets, const cnp.int64_t[::1] tile_ids,
                       int width, int height, int tile_size, const double[::1] bg,
                       double alpha_min, double alpha_max, const double[:, :, ::1] d_image):
    cdef Py_ssize_t n = means2d.shape[0]
    cdef int ntx = (width + tile_size - 1) // tile_size
    cdef int nty = (height + tile_size - 1) // tile_size
    d_means_arr = np.zeros((n, 2), dtype=np.float64)
    d_conics_arr = np.zeros((n, 3), dtype=np.float64)
    d_colors_arr = np.zeros((n, 3), dtype=np.float64)
    d_opac_arr = np.zeros(n, dtype=np.float64)
    cdef double[:, ::1] d_means = d_means_arr
    cdef double[:, ::1] d_conics = d_conics_arr
    cdef double[:, ::1] d_colors = d_colors_arr
    cdef double[::1] d_opac = d_opac_arr

    cdef Py_ssize_t max_len = 0, tile
    for tile in range(ntx * nty):
        if tile_offsets[tile + 1] - tile_offsets[tile] > max_len:
            max_len = tile_offsets[tile + 1] - tile_offsets[tile]
    # per-pixel contributor record: gaussian id, alpha, transmittance, gauss value
    buf_g_arr = np.empty(max_len + 1, dtype=np.int64)
    buf_arr = np.empty((max_len + 1, 3), dtype=np.float64)
    cdef cnp.int64_t[::1] buf_g = buf_g_arr
    cdef double[:, ::1] buf = buf_arr

    cdef int tx, ty, px, py, x0, y0, x1, y1
    cdef Py_ssize_t k, g, m, cnt
    cdef double fx, fy, dx, dy, power, alpha, T, gv, raw
    cdef double rr, rg, rb, gr_, gg_, gb_, d_alpha, d_power
    for ty in range(nty):
        for tx in range(ntx):
            tile = ty * ntx + tx
            x0 = tx * tile_size
            y0 = ty * tile_size
            x1 = min(x0 + tile_size, width)
            y1 = min(y0 + tile_size, height)
            for py in range(y0, y1):
                for px in range(x0, x1):
                    fx = px + 0.5
                    fy = py + 0.5
                    gr_ = d_image[py, px, 0]
                    gg_ = d_image[py, px, 1]
                    gb_ = d_image[py, px, 2]
                    if gr_ == 0.0 and gg_ == 0.0 and gb_ == 0.0:
                        continue
                    T = 1.0
                    cnt = 0
                    for k in range(tile_offsets[tile], tile_offsets[tile + 1]):
                        g = tile_ids[k]
                        dx = fx - means2d[g, 0]
                        dy = fy - means2d[g, 1]
                        power = -0.5 * (conics[g, 0] * dx * dx + conics[g, 2] * dy * dy) \
                            - conics[g, 1] * dx * dy
                        if power > 0.0:
                            continue
                        gv = exp(power)
                        raw = opac[g] * gv
                        alpha = raw
                        if alpha > alpha_max:
                            alpha = alpha_max
                        if alpha < alpha_min:
                            continue
                        buf_g[cnt] = g
                        buf[cnt, 0] = alpha
                        buf[cnt, 1] = T
                        # negative gauss value flags a clamped alpha
                        buf[cnt, 2] = -gv if raw > alpha_max else gv
                        cnt += 1
                        T *= 1.0 - alpha
                    rr = bg[0]
                    rg = bg[1]
                    rb = bg[2]
                    for m in range(cnt - 1, -1, -1):
                        g = buf_g[m]
                        alpha = buf[m, 0]
                        T = buf[m, 1]
                        gv = buf[m, 2]
                        d_colors[g, 0] += alpha * T * gr_
                        d_colors[g, 1] += alpha * T * gg_
                        d_colors[g, 2] += alpha * T * gb_
                        d_alpha = T * (gr_ * (colors[g, 0] - rr) + gg_ * (colors[g, 1] - rg)
                                       + gb_ * (colors[g, 2] - rb))
                        rr = alpha * colors[g, 0] + (1.0 - alpha) * rr
                        rg = alpha * colors[g, 1] + (1.0 - alpha) * rg
                        rb = alpha * colors[g, 2] + (1.0 - alpha) * rb
                        if gv < 0.0:
                            continue
                        d_opac[g] += d_alpha * gv
                        d_power = d_alpha * alpha
                        dx = fx - means2d[g, 0]
                        dy = fy - means2d[g, 1]
                        d_conics[g, 0] += -0.5 * dx * dx * d_power
                        d_conics[g, 1] += -dx * dy * d_power
                        d_conics[g, 2] += -0.5 * dy * dy * d_power
                        d_means[g, 0] += (conics[g, 0] * dx + conics[g, 1] * dy) * d_power
                        d_means[g, 1] += (conics[g, 1] * dx + conics[g, 2] * dy) * d_power
    return d_means_arr, d_conics_arr, d_colors_arr, d_opac_arr
