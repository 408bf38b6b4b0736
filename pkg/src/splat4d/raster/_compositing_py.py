"""Pure-numpy compositing kernels.

Fallback used when the compiled extension is unavailable. Both backends
implement the same per-pixel semantics: splats arrive depth-sorted; alpha is
clamped, values below the skip threshold contribute nothing, and a pixel stops
compositing once its transmittance falls below the termination threshold.

Arithmetic expressions are written to match the compiled kernel operation for
operation, so the two backends agree to floating-point rounding.
"""

import numpy as np


def composite_forward(means2, conic, alpha_base, colors, depths, rects,
                      width, height, alpha_clamp, skip_threshold,
                      term_threshold, tile_size):
    m_count = means2.shape[0]
    img = np.zeros((height, width, 3))
    trans = np.ones((height, width))
    depth_acc = np.zeros((height, width))
    last_pos = np.full((height, width), m_count, dtype=np.int32)
    counts = np.zeros(m_count, dtype=np.int64)
    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5
    for i in range(m_count):
        x0, y0, x1, y1 = rects[i]
        if x0 > x1 or y0 > y1:
            continue
        tv = trans[y0 : y1 + 1, x0 : x1 + 1]
        active = tv >= term_threshold
        if not active.any():
            continue
        dx = xs[x0 : x1 + 1][None, :] - means2[i, 0]
        dy = ys[y0 : y1 + 1][:, None] - means2[i, 1]
        a, b, c = conic[i]
        q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
        alpha = alpha_base[i] * np.exp(-0.5 * q)
        np.minimum(alpha, alpha_clamp, out=alpha)
        m = active & (alpha >= skip_threshold)
        k = int(m.sum())
        if k == 0:
            continue
        w = alpha[m] * tv[m]
        cv = img[y0 : y1 + 1, x0 : x1 + 1]
        cv[m] += w[:, None] * colors[i]
        dv = depth_acc[y0 : y1 + 1, x0 : x1 + 1]
        dv[m] += w * depths[i]
        tv[m] = tv[m] * (1.0 - alpha[m])
        counts[i] = k
        dropped = m & (tv < term_threshold)
        if dropped.any():
            lv = last_pos[y0 : y1 + 1, x0 : x1 + 1]
            lv[dropped] = i + 1
    return img, trans, depth_acc, last_pos, counts


def composite_backward(means2, conic, alpha_base, colors, rects, final_t,
                       last_pos, d_img, background, width, height, alpha_clamp,
                       skip_threshold, term_threshold, tile_size):
    m_count = means2.shape[0]
    d_means2 = np.zeros((m_count, 2))
    d_conic = np.zeros((m_count, 3))
    d_alpha_base = np.zeros(m_count)
    d_colors = np.zeros((m_count, 3))
    t_cur = final_t.copy()
    suffix = background[None, None, :] * final_t[:, :, None]
    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5
    for i in range(m_count - 1, -1, -1):
        x0, y0, x1, y1 = rects[i]
        if x0 > x1 or y0 > y1:
            continue
        lv = last_pos[y0 : y1 + 1, x0 : x1 + 1]
        considered = lv > i
        if not considered.any():
            continue
        dx = xs[x0 : x1 + 1][None, :] - means2[i, 0]
        dy = ys[y0 : y1 + 1][:, None] - means2[i, 1]
        a, b, c = conic[i]
        q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
        g = np.exp(-0.5 * q)
        raw = alpha_base[i] * g
        alpha = np.minimum(raw, alpha_clamp)
        m = considered & (alpha >= skip_threshold)
        if not m.any():
            continue
        am = alpha[m]
        one = 1.0 - am
        tv = t_cur[y0 : y1 + 1, x0 : x1 + 1]
        t_before = tv[m] / one
        sv = suffix[y0 : y1 + 1, x0 : x1 + 1]
        sm = sv[m]
        gv = d_img[y0 : y1 + 1, x0 : x1 + 1][m]
        col = colors[i]
        d_alpha = (gv * (col[None, :] * t_before[:, None] - sm / one[:, None])).sum(axis=1)
        wgt = am * t_before
        d_colors[i] += (gv * wgt[:, None]).sum(axis=0)
        sv[m] = sm + col[None, :] * wgt[:, None]
        tv[m] = t_before
        unclamped = raw[m] <= alpha_clamp
        if unclamped.any():
            d_au = d_alpha[unclamped]
            gm = g[m][unclamped]
            d_alpha_base[i] += (gm * d_au).sum()
            dq = d_au * (-0.5) * (alpha_base[i] * gm)
            dxm = np.broadcast_to(dx, alpha.shape)[m][unclamped]
            dym = np.broadcast_to(dy, alpha.shape)[m][unclamped]
            d_conic[i, 0] += (dq * dxm * dxm).sum()
            d_conic[i, 1] += (dq * 2.0 * dxm * dym).sum()
            d_conic[i, 2] += (dq * dym * dym).sum()
            d_means2[i, 0] += (dq * -(2.0 * a * dxm + 2.0 * b * dym)).sum()
            d_means2[i, 1] += (dq * -(2.0 * b * dxm + 2.0 * c * dym)).sum()
    return d_means2, d_conic, d_alpha_base, d_colors
