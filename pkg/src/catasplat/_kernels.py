"""Per-pixel loops of the splat rasterizer, JIT-compiled with numba.

All kernels are serial and visit data in a fixed order, so results are
bitwise reproducible run to run.
"""

import numba
import numpy as np

CUTOFF_MAHALANOBIS_SQ = 9.0  # 3 sigma: Gaussian value below exp(-4.5) is dropped


@numba.njit(cache=True)
def gather_contributors(mu, conic, radius, order, width, height):
    """All (pixel, splat, gaussian) triples with Mahalanobis^2 <= 9 at the pixel center.

    Grouped by pixel (``row * width + col``) and, inside each pixel, listed
    in the visiting ``order`` of the splats.  Counting sort, so linear time.
    Also returns the per-pixel offsets into the flat arrays.
    """
    counts = np.zeros(width * height + 1, dtype=np.int64)
    for s in range(mu.shape[0]):
        r = radius[s]
        x0 = max(int(np.floor(mu[s, 0] - r)), 0)
        x1 = min(int(np.ceil(mu[s, 0] + r)), width - 1)
        y0 = max(int(np.floor(mu[s, 1] - r)), 0)
        y1 = min(int(np.ceil(mu[s, 1] + r)), height - 1)
        a, b, c = conic[s, 0], conic[s, 1], conic[s, 2]
        for y in range(y0, y1 + 1):
            dy = y + 0.5 - mu[s, 1]
            for x in range(x0, x1 + 1):
                dx = x + 0.5 - mu[s, 0]
                if a * dx * dx + 2.0 * b * dx * dy + c * dy * dy <= CUTOFF_MAHALANOBIS_SQ:
                    counts[y * width + x + 1] += 1
    offsets = np.cumsum(counts)
    total = offsets[-1]
    fill = offsets[:-1].copy()
    pix = np.empty(total, dtype=np.int64)
    spl = np.empty(total, dtype=np.int64)
    gau = np.empty(total, dtype=np.float64)
    for s in order:
        r = radius[s]
        x0 = max(int(np.floor(mu[s, 0] - r)), 0)
        x1 = min(int(np.ceil(mu[s, 0] + r)), width - 1)
        y0 = max(int(np.floor(mu[s, 1] - r)), 0)
        y1 = min(int(np.ceil(mu[s, 1] + r)), height - 1)
        a, b, c = conic[s, 0], conic[s, 1], conic[s, 2]
        for y in range(y0, y1 + 1):
            dy = y + 0.5 - mu[s, 1]
            for x in range(x0, x1 + 1):
                dx = x + 0.5 - mu[s, 0]
                m2 = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                if m2 <= CUTOFF_MAHALANOBIS_SQ:
                    p = y * width + x
                    k = fill[p]
                    pix[k] = p
                    spl[k] = s
                    gau[k] = np.exp(-0.5 * m2)
                    fill[p] = k + 1
    return pix, spl, gau, offsets


@numba.njit(cache=True)
def composite_forward(offsets, spl, alpha, colors, out, obar, trans):
    """Front-to-back compositing.

    ``offsets`` delimits each pixel's depth-sorted contributor run. Writes the
    composited colors into ``out`` (P, C), the final transmittance into
    ``obar`` (P,) and the transmittance in front of every contributor into
    ``trans`` (K,).
    """
    n_pix = offsets.shape[0] - 1
    n_ch = colors.shape[1]
    for p in range(n_pix):
        t = 1.0
        for k in range(offsets[p], offsets[p + 1]):
            s = spl[k]
            a = alpha[k]
            trans[k] = t
            w = a * t
            for ch in range(n_ch):
                out[p, ch] += w * colors[s, ch]
            t *= 1.0 - a
        obar[p] = t


@numba.njit(cache=True)
def composite_backward(offsets, spl, alpha, trans, colors, g_out, g_obar, g_colors, g_alpha):
    """Exact gradients of the compositing equations in one back-to-front sweep per pixel.

    With ``acc`` the composited color of everything behind contributor j
    (as seen from j) and ``suffix`` the product of ``1 - alpha`` behind j:

        d out / d alpha_j  = T_j (c_j - acc_j)
        d obar / d alpha_j = -T_j * suffix_j
    """
    n_pix = offsets.shape[0] - 1
    n_ch = colors.shape[1]
    acc = np.zeros(n_ch)
    for p in range(n_pix):
        lo = offsets[p]
        hi = offsets[p + 1]
        if lo == hi:
            continue
        for ch in range(n_ch):
            acc[ch] = 0.0
        suffix = 1.0
        go = g_obar[p]
        for k in range(hi - 1, lo - 1, -1):
            s = spl[k]
            a = alpha[k]
            t = trans[k]
            ga = -go * t * suffix
            for ch in range(n_ch):
                g = g_out[p, ch]
                c = colors[s, ch]
                g_colors[s, ch] += g * a * t
                ga += g * t * (c - acc[ch])
                acc[ch] = c * a + (1.0 - a) * acc[ch]
            g_alpha[k] = ga
            suffix *= 1.0 - a


@numba.njit(cache=True)
def composite_backward_pixel(alpha, colors, g_out, g_obar):
    """Single-pixel two-pass backward: returns (d/d alpha, d/d colors) for an ordered stack."""
    n = alpha.shape[0]
    n_ch = colors.shape[1]
    trans = np.empty(n)
    t = 1.0
    for k in range(n):
        trans[k] = t
        t *= 1.0 - alpha[k]
    g_alpha = np.zeros(n)
    g_colors = np.zeros((n, n_ch))
    acc = np.zeros(n_ch)
    suffix = 1.0
    for k in range(n - 1, -1, -1):
        a = alpha[k]
        ga = -g_obar * trans[k] * suffix
        for ch in range(n_ch):
            g_colors[k, ch] = g_out[ch] * a * trans[k]
            ga += g_out[ch] * trans[k] * (colors[k, ch] - acc[ch])
            acc[ch] = colors[k, ch] * a + (1.0 - a) * acc[ch]
        g_alpha[k] = ga
        suffix *= 1.0 - a
    return g_alpha, g_colors


@numba.njit(cache=True)
def gaussian_backward(pix, spl, width, g_alpha, clamped, gauss, o_vis, mu, conic, g_o, g_mu, g_q):
    """Chain ``alpha = o G(d)`` back to opacity, 2D mean and conic, summed per splat."""
    for k in range(len(spl)):
        if clamped[k]:
            continue
        s = spl[k]
        ga = g_alpha[k]
        g_o[s] += ga * gauss[k]
        gg = ga * o_vis[s] * gauss[k]
        px = (pix[k] % width) + 0.5 - mu[s, 0]
        py = (pix[k] // width) + 0.5 - mu[s, 1]
        a, b, c = conic[s, 0], conic[s, 1], conic[s, 2]
        g_mu[s, 0] += gg * (a * px + b * py)
        g_mu[s, 1] += gg * (b * px + c * py)
        g_q[s, 0] += -0.5 * gg * px * px
        g_q[s, 1] += -gg * px * py
        g_q[s, 2] += -0.5 * gg * py * py


@numba.njit(cache=True)
def median_depth(offsets, spl, alpha, trans, depth):
    """Depth of the contributor where the accumulated blending weight first reaches half its total."""
    n_pix = len(offsets) - 1
    out = np.full(n_pix, np.inf)
    for p in range(n_pix):
        lo = offsets[p]
        hi = offsets[p + 1]
        total = 0.0
        for k in range(lo, hi):
            total += alpha[k] * trans[k]
        if total <= 0.0:
            continue
        acc = 0.0
        for k in range(lo, hi):
            acc += alpha[k] * trans[k]
            if acc >= 0.5 * total:
                out[p] = depth[spl[k]]
                break
    return out
