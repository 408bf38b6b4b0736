# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Tile-based compositing kernels.

Semantics match the numpy fallback exactly: splats arrive depth-sorted, alpha
is clamped then tested against the skip threshold, and a pixel terminates once
its transmittance drops below the termination threshold. Splats are binned
into square pixel tiles by their integer extent rectangles; per pixel the tile
list is walked front to back.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


cdef void _build_tile_lists(int[:, ::1] rects, int m_count, int tiles_x, int tiles_y,
                            int tile_size, int[::1] offsets, int[::1] items,
                            int fill) noexcept:
    """CSR tile lists. With fill == 0 only counts are accumulated into offsets
    (shifted by one); with fill == 1 items are written using offsets as write
    cursors."""
    cdef int i, tx0, tx1, ty0, ty1, tx, ty, tid
    for i in range(m_count):
        if rects[i, 0] > rects[i, 2] or rects[i, 1] > rects[i, 3]:
            continue
        tx0 = rects[i, 0] / tile_size
        tx1 = rects[i, 2] / tile_size
        ty0 = rects[i, 1] / tile_size
        ty1 = rects[i, 3] / tile_size
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                tid = ty * tiles_x + tx
                if fill == 0:
                    offsets[tid + 1] += 1
                else:
                    items[offsets[tid]] = i
                    offsets[tid] += 1


def composite_forward(double[:, ::1] means2, double[:, ::1] conic,
                      double[::1] alpha_base, double[:, ::1] colors,
                      double[::1] depths, int[:, ::1] rects,
                      int width, int height, double alpha_clamp,
                      double skip_threshold, double term_threshold,
                      int tile_size):
    cdef int m_count = means2.shape[0]
    cdef int tiles_x = (width + tile_size - 1) // tile_size
    cdef int tiles_y = (height + tile_size - 1) // tile_size
    cdef int n_tiles = tiles_x * tiles_y

    img_arr = np.zeros((height, width, 3))
    trans_arr = np.ones((height, width))
    depth_arr = np.zeros((height, width))
    last_arr = np.full((height, width), m_count, dtype=np.int32)
    counts_arr = np.zeros(m_count, dtype=np.int64)
    cdef double[:, :, ::1] img = img_arr
    cdef double[:, ::1] trans = trans_arr
    cdef double[:, ::1] depth_acc = depth_arr
    cdef int[:, ::1] last_pos = last_arr
    cdef long long[::1] counts = counts_arr

    offsets_arr = np.zeros(n_tiles + 1, dtype=np.int32)
    cdef int[::1] offsets = offsets_arr
    _build_tile_lists(rects, m_count, tiles_x, tiles_y, tile_size, offsets, offsets, 0)
    cdef int t
    for t in range(n_tiles):
        offsets[t + 1] += offsets[t]
    items_arr = np.zeros(offsets_arr[n_tiles], dtype=np.int32)
    cursors_arr = offsets_arr[:-1].copy()
    cdef int[::1] items = items_arr
    cdef int[::1] cursors = cursors_arr
    _build_tile_lists(rects, m_count, tiles_x, tiles_y, tile_size, cursors, items, 1)

    cdef int ty, tx, tid, py, px, k, i, y_end, x_end
    cdef double pcx, pcy, dx, dy, a, b, c, q, alpha, w, t_loc, c0, c1, c2, dacc
    cdef int last_loc
    for ty in range(tiles_y):
        y_end = min((ty + 1) * tile_size, height)
        for tx in range(tiles_x):
            tid = ty * tiles_x + tx
            if offsets[tid] == offsets[tid + 1]:
                continue
            x_end = min((tx + 1) * tile_size, width)
            for py in range(ty * tile_size, y_end):
                pcy = py + 0.5
                for px in range(tx * tile_size, x_end):
                    pcx = px + 0.5
                    t_loc = 1.0
                    c0 = 0.0
                    c1 = 0.0
                    c2 = 0.0
                    dacc = 0.0
                    last_loc = m_count
                    for k in range(offsets[tid], offsets[tid + 1]):
                        i = items[k]
                        if (px < rects[i, 0] or px > rects[i, 2]
                                or py < rects[i, 1] or py > rects[i, 3]):
                            continue
                        dx = pcx - means2[i, 0]
                        dy = pcy - means2[i, 1]
                        a = conic[i, 0]
                        b = conic[i, 1]
                        c = conic[i, 2]
                        q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                        alpha = alpha_base[i] * exp(-0.5 * q)
                        if alpha > alpha_clamp:
                            alpha = alpha_clamp
                        if alpha < skip_threshold:
                            continue
                        w = alpha * t_loc
                        c0 = c0 + w * colors[i, 0]
                        c1 = c1 + w * colors[i, 1]
                        c2 = c2 + w * colors[i, 2]
                        dacc = dacc + w * depths[i]
                        t_loc = t_loc * (1.0 - alpha)
                        counts[i] += 1
                        if t_loc < term_threshold:
                            last_loc = i + 1
                            break
                    img[py, px, 0] = c0
                    img[py, px, 1] = c1
                    img[py, px, 2] = c2
                    trans[py, px] = t_loc
                    depth_acc[py, px] = dacc
                    last_pos[py, px] = last_loc
    return img_arr, trans_arr, depth_arr, last_arr, counts_arr


def composite_backward(double[:, ::1] means2, double[:, ::1] conic,
                       double[::1] alpha_base, double[:, ::1] colors,
                       int[:, ::1] rects, double[:, ::1] final_t,
                       int[:, ::1] last_pos, double[:, :, ::1] d_img,
                       double[::1] background, int width, int height,
                       double alpha_clamp, double skip_threshold,
                       double term_threshold, int tile_size):
    cdef int m_count = means2.shape[0]
    cdef int tiles_x = (width + tile_size - 1) // tile_size
    cdef int tiles_y = (height + tile_size - 1) // tile_size
    cdef int n_tiles = tiles_x * tiles_y

    d_means2_arr = np.zeros((m_count, 2))
    d_conic_arr = np.zeros((m_count, 3))
    d_alpha_base_arr = np.zeros(m_count)
    d_colors_arr = np.zeros((m_count, 3))
    cdef double[:, ::1] d_means2 = d_means2_arr
    cdef double[:, ::1] d_conic = d_conic_arr
    cdef double[::1] d_alpha_base = d_alpha_base_arr
    cdef double[:, ::1] d_colors = d_colors_arr

    offsets_arr = np.zeros(n_tiles + 1, dtype=np.int32)
    cdef int[::1] offsets = offsets_arr
    _build_tile_lists(rects, m_count, tiles_x, tiles_y, tile_size, offsets, offsets, 0)
    cdef int t
    for t in range(n_tiles):
        offsets[t + 1] += offsets[t]
    items_arr = np.zeros(offsets_arr[n_tiles], dtype=np.int32)
    cursors_arr = offsets_arr[:-1].copy()
    cdef int[::1] items = items_arr
    cdef int[::1] cursors = cursors_arr
    _build_tile_lists(rects, m_count, tiles_x, tiles_y, tile_size, cursors, items, 1)

    cdef int ty, tx, tid, py, px, k, i, y_end, x_end, last_px
    cdef double pcx, pcy, dx, dy, a, b, c, q, g, raw, alpha, one, t_loc, t_before
    cdef double s0, s1, s2, d_alpha, wgt, dq, g0, g1, g2
    for ty in range(tiles_y):
        y_end = min((ty + 1) * tile_size, height)
        for tx in range(tiles_x):
            tid = ty * tiles_x + tx
            if offsets[tid] == offsets[tid + 1]:
                continue
            x_end = min((tx + 1) * tile_size, width)
            for py in range(ty * tile_size, y_end):
                pcy = py + 0.5
                for px in range(tx * tile_size, x_end):
                    pcx = px + 0.5
                    last_px = last_pos[py, px]
                    t_loc = final_t[py, px]
                    s0 = background[0] * t_loc
                    s1 = background[1] * t_loc
                    s2 = background[2] * t_loc
                    g0 = d_img[py, px, 0]
                    g1 = d_img[py, px, 1]
                    g2 = d_img[py, px, 2]
                    for k in range(offsets[tid + 1] - 1, offsets[tid] - 1, -1):
                        i = items[k]
                        if i >= last_px:
                            continue
                        if (px < rects[i, 0] or px > rects[i, 2]
                                or py < rects[i, 1] or py > rects[i, 3]):
                            continue
                        dx = pcx - means2[i, 0]
                        dy = pcy - means2[i, 1]
                        a = conic[i, 0]
                        b = conic[i, 1]
                        c = conic[i, 2]
                        q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                        g = exp(-0.5 * q)
                        raw = alpha_base[i] * g
                        alpha = raw
                        if alpha > alpha_clamp:
                            alpha = alpha_clamp
                        if alpha < skip_threshold:
                            continue
                        one = 1.0 - alpha
                        t_before = t_loc / one
                        wgt = alpha * t_before
                        d_alpha = (g0 * (colors[i, 0] * t_before - s0 / one)
                                   + g1 * (colors[i, 1] * t_before - s1 / one)
                                   + g2 * (colors[i, 2] * t_before - s2 / one))
                        d_colors[i, 0] += g0 * wgt
                        d_colors[i, 1] += g1 * wgt
                        d_colors[i, 2] += g2 * wgt
                        s0 = s0 + colors[i, 0] * wgt
                        s1 = s1 + colors[i, 1] * wgt
                        s2 = s2 + colors[i, 2] * wgt
                        t_loc = t_before
                        if raw <= alpha_clamp:
                            d_alpha_base[i] += g * d_alpha
                            dq = d_alpha * (-0.5) * raw
                            d_conic[i, 0] += dq * dx * dx
                            d_conic[i, 1] += dq * 2.0 * dx * dy
                            d_conic[i, 2] += dq * dy * dy
                            d_means2[i, 0] += dq * -(2.0 * a * dx + 2.0 * b * dy)
                            d_means2[i, 1] += dq * -(2.0 * b * dx + 2.0 * c * dy)
    return d_means2_arr, d_conic_arr, d_alpha_base_arr, d_colors_arr
