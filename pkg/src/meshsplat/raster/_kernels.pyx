# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Tile-parallel compositing kernels.

Same per-pixel math as the reference backend: front-to-back order, rect +
exponent-cutoff predicate, alpha clamp, early termination. Forward writes are
tile-private; backward accumulates per-(tile, splat) partials that are folded
serially in tile-index order, so results are bit-reproducible regardless of
thread count.
"""

import numpy as np

cimport numpy as cnp
from cython.parallel cimport prange, threadid
from libc.math cimport ceil, floor, sqrt

cnp.import_array()

cdef extern from *:
    """
    /* Batched falloff pass: restrict + omp simd so the compiler can use the
       vector units. exp(x) = poly(x/32)^32, relative error < 5e-8. The dx and
       q expressions must round identically to the scalar backward pass. */
    static void batch_alpha(const int sx0, const double m0, const double dy,
                            const double ca, const double cb, const double cc,
                            const double o_s, const double q_cut, const int n,
                            double* restrict ab) {
        #pragma omp simd
        for (int i = 0; i < n; ++i) {
            const double dx = ((double)(sx0 + i) + 0.5) - m0;
            const double q = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy;
            const double y = (-0.5 * q) * 0.03125;
            double r = 0.99999999920619143 + y * (0.9999999205147736
                       + y * (0.49999807825706188 + y * (0.16664749122587919
                       + y * (0.041571470490723114 + y * (0.0080833194554759697
                       + y * 0.0010511559893786636)))));
            r = r * r;
            r = r * r;
            r = r * r;
            r = r * r;
            r = r * r;
            /* predicate folded into the mask: visited splats have opacity
               above the alpha floor, so alpha > 0 iff q <= q_cut */
            ab[i] = (q <= q_cut) ? o_s * r : 0.0;
        }
    }
    """
    void batch_alpha(int sx0, double m0, double dy, double ca, double cb,
                     double cc, double o_s, double q_cut, int n,
                     double* ab) nogil

DEF LOG2E = 1.4426950408889634


cdef inline double fast_exp_neg(double x) nogil:
    """exp(x) for x in [-40, 0]: 2^k * poly(frac), relative error < 7e-9."""
    cdef double t = x * LOG2E
    cdef double k = floor(t)
    cdef double f = t - k
    cdef double p = (1.0000000061582057 + f * (0.69314683770066265
                     + f * (0.24023109676226764 + f * (0.055478912460038173
                     + f * (0.0096861862955824364 + f * (0.0012382415492740179
                     + f * 0.00021871262471017766))))))
    cdef long long bits = (<long long> (1023 + <long long> k)) << 52
    return p * (<double*> &bits)[0]


cdef inline double exp_sq32(double x) nogil:
    """exp(x) for x in [-40, 0] as poly(x/32)^32; relative error < 5e-8.

    Pure arithmetic (no bit manipulation), so the compiler can vectorize the
    projection pass that batches alphas per row.
    """
    cdef double y = x * 0.03125
    cdef double r = (0.99999999920619143 + y * (0.9999999205147736
                     + y * (0.49999807825706188 + y * (0.16664749122587919
                     + y * (0.041571470490723114 + y * (0.0080833194554759697
                     + y * 0.0010511559893786636))))))
    r = r * r
    r = r * r
    r = r * r
    r = r * r
    r = r * r
    return r


cdef inline int row_span(double ca, double cb, double cc, double m0,
                         double dy, double qmax2, int* rx0, int* rx1) nogil:
    """Pixel-x range on a row where the falloff exponent can stay in range.

    Solves ca dx^2 + 2 cb dy dx + cc dy^2 <= qmax2; returns 0 when the row
    misses the ellipse. Forward and backward share this so their contributing
    sets match exactly.
    """
    cdef double qy = cb * dy / ca
    cdef double disc = qy * qy - (cc * dy * dy - qmax2) / ca
    if disc <= 0.0:
        return 0
    cdef double half_span = sqrt(disc)
    cdef double mid = m0 - qy
    rx0[0] = <int> ceil(mid - half_span - 0.5)
    rx1[0] = <int> floor(mid + half_span - 0.5)
    return 1


def build_tile_lists(int[:, ::1] rect, int width, int height, int tile):
    """Per-tile splat lists (slots ascending == global depth order).

    Returns (offsets int64 (ntiles+1,), pairs int32 (P,)).
    """
    cdef int ntx = (width + tile - 1) // tile
    cdef int nty = (height + tile - 1) // tile
    cdef int ntiles = ntx * nty
    cdef int n = rect.shape[0]
    cdef cnp.ndarray counts_arr = np.zeros(ntiles + 1, dtype=np.int64)
    cdef long long[::1] counts = counts_arr
    cdef int s, tx, ty, tx0, tx1, ty0, ty1

    for s in range(n):
        if rect[s, 1] < rect[s, 0] or rect[s, 3] < rect[s, 2]:
            continue
        tx0 = rect[s, 0] // tile
        tx1 = rect[s, 1] // tile
        ty0 = rect[s, 2] // tile
        ty1 = rect[s, 3] // tile
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                counts[ty * ntx + tx + 1] += 1

    cdef cnp.ndarray offsets_arr = np.cumsum(counts_arr, dtype=np.int64)
    cdef long long[::1] offsets = offsets_arr
    cdef long long total = offsets[ntiles]
    cdef cnp.ndarray pairs_arr = np.empty(total, dtype=np.int32)
    cdef int[::1] pairs = pairs_arr
    cdef cnp.ndarray cursor_arr = offsets_arr[:ntiles].copy()
    cdef long long[::1] cursor = cursor_arr
    cdef long long slot
    cdef int t

    for s in range(n):
        if rect[s, 1] < rect[s, 0] or rect[s, 3] < rect[s, 2]:
            continue
        tx0 = rect[s, 0] // tile
        tx1 = rect[s, 1] // tile
        ty0 = rect[s, 2] // tile
        ty1 = rect[s, 3] // tile
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                t = ty * ntx + tx
                slot = cursor[t]
                pairs[slot] = s
                cursor[t] = slot + 1

    return offsets_arr, pairs_arr


def forward(double[:, ::1] mean2d, double[:, ::1] conic, double[::1] opacity,
            double[:, ::1] color, int[:, ::1] rect, double[::1] q_cut,
            long long[::1] offsets, int[::1] pairs,
            int width, int height, int tile, double[::1] background,
            double alpha_max, double term_t, int num_threads):
    """Splat-major per tile: each list entry touches only its rect's pixels,
    and a tile stops early once every pixel has saturated. Per-pixel update
    order equals the depth order, so the output is independent of tiling and
    identical to a pixel-major sweep."""
    cdef int ntx = (width + tile - 1) // tile
    cdef int nty = (height + tile - 1) // tile
    cdef int ntiles = ntx * nty

    cdef cnp.ndarray image_arr = np.empty((height, width, 3), dtype=np.float64)
    cdef cnp.ndarray final_t_arr = np.empty((height, width), dtype=np.float64)
    cdef cnp.ndarray n_contrib_arr = np.zeros((height, width), dtype=np.int32)
    cdef double[:, :, ::1] image = image_arr
    cdef double[:, ::1] final_t = final_t_arr
    cdef int[:, ::1] n_contrib = n_contrib_arr

    cdef double bg0 = background[0]
    cdef double bg1 = background[1]
    cdef double bg2 = background[2]

    if num_threads < 1:
        num_threads = 1
    # thread-local tile accumulators: C0, C1, C2, T per pixel plus a counter
    cdef cnp.ndarray acc_arr = np.empty((num_threads, tile * tile, 4),
                                        dtype=np.float64)
    cdef cnp.ndarray cnt_arr = np.empty((num_threads, tile * tile),
                                        dtype=np.int32)
    cdef cnp.ndarray abuf_arr = np.empty((num_threads, tile), dtype=np.float64)
    cdef double[:, :, ::1] acc = acc_arr
    cdef int[:, ::1] cnt = cnt_arr
    cdef double[:, ::1] abuf = abuf_arr

    cdef int t, tx, ty, px, py, px0, px1, py0, py1, s, tw, alive, thread, loc
    cdef int sx0, sx1, sy0, sy1, rx0, rx1
    cdef long long si
    cdef double cy, dx, dy, q, alpha, trans, o_s, c0_s, c1_s, c2_s, qc_s
    cdef double m0, m1, ca, cb, cc, w
    cdef double* accp
    cdef double* pp
    cdef int* cntp
    cdef double* ab
    cdef int i, n_span

    for t in prange(ntiles, nogil=True, schedule="dynamic",
                    num_threads=num_threads):
        thread = threadid()
        # direct assignments so the span outputs are privatized per thread
        rx0 = 0
        rx1 = -1
        pp = NULL
        ty = t // ntx
        tx = t - ty * ntx
        px0 = tx * tile
        py0 = ty * tile
        px1 = px0 + tile
        py1 = py0 + tile
        if px1 > width:
            px1 = width
        if py1 > height:
            py1 = height
        tw = px1 - px0
        if offsets[t] == offsets[t + 1]:
            # nothing projects here: plain background
            for py in range(py0, py1):
                for px in range(px0, px1):
                    image[py, px, 0] = bg0
                    image[py, px, 1] = bg1
                    image[py, px, 2] = bg2
                    final_t[py, px] = 1.0
                    n_contrib[py, px] = 0
            continue
        alive = (py1 - py0) * tw
        accp = &acc[thread, 0, 0]
        cntp = &cnt[thread, 0]
        ab = &abuf[thread, 0]
        for loc in range(alive):
            accp[4 * loc] = 0.0
            accp[4 * loc + 1] = 0.0
            accp[4 * loc + 2] = 0.0
            accp[4 * loc + 3] = 1.0
            cntp[loc] = 0

        for si in range(offsets[t], offsets[t + 1]):
            if alive == 0:
                break
            s = pairs[si]
            sy0 = rect[s, 2]
            if sy0 < py0:
                sy0 = py0
            sy1 = rect[s, 3]
            if sy1 >= py1:
                sy1 = py1 - 1
            m0 = mean2d[s, 0]
            m1 = mean2d[s, 1]
            ca = conic[s, 0]
            cb = conic[s, 1]
            cc = conic[s, 2]
            o_s = opacity[s]
            qc_s = q_cut[s]
            c0_s = color[s, 0]
            c1_s = color[s, 1]
            c2_s = color[s, 2]
            for py in range(sy0, sy1 + 1):
                cy = py + 0.5
                dy = cy - m1
                if row_span(ca, cb, cc, m0, dy, qc_s, &rx0, &rx1) == 0:
                    continue
                sx0 = rect[s, 0]
                if sx0 < px0:
                    sx0 = px0
                if sx0 < rx0:
                    sx0 = rx0
                sx1 = rect[s, 1]
                if sx1 >= px1:
                    sx1 = px1 - 1
                if sx1 > rx1:
                    sx1 = rx1
                n_span = sx1 - sx0 + 1
                if n_span <= 0:
                    continue
                # pass 1: batch masked alphas for the row
                batch_alpha(sx0, m0, dy, ca, cb, cc, o_s, qc_s, n_span, ab)
                # pass 2: sequential composite with early termination
                loc = (py - py0) * tw + (sx0 - px0)
                pp = accp + 4 * loc
                for i in range(n_span):
                    trans = pp[3]
                    alpha = ab[i]
                    if trans >= term_t and alpha > 0.0:
                        if alpha > alpha_max:
                            alpha = alpha_max
                        w = trans * alpha
                        pp[0] += w * c0_s
                        pp[1] += w * c1_s
                        pp[2] += w * c2_s
                        trans = trans * (1.0 - alpha)
                        pp[3] = trans
                        cntp[loc + i] += 1
                        if trans < term_t:
                            alive = alive - 1
                    pp = pp + 4

        for py in range(py0, py1):
            loc = (py - py0) * tw
            for px in range(px0, px1):
                trans = accp[4 * loc + 3]
                image[py, px, 0] = accp[4 * loc] + trans * bg0
                image[py, px, 1] = accp[4 * loc + 1] + trans * bg1
                image[py, px, 2] = accp[4 * loc + 2] + trans * bg2
                final_t[py, px] = trans
                n_contrib[py, px] = cntp[loc]
                loc = loc + 1

    return image_arr, final_t_arr, n_contrib_arr


def backward(double[:, ::1] mean2d, double[:, ::1] conic, double[::1] opacity,
             double[:, ::1] color, int[:, ::1] rect, double[::1] q_cut,
             long long[::1] offsets, int[::1] pairs,
             int width, int height, int tile, double[::1] background,
             double alpha_max,
             double[:, ::1] final_t, int[:, ::1] n_contrib,
             double[:, :, ::1] d_image, int num_threads):
    """Gradients w.r.t. (color0..2, opacity, mean_x, mean_y, cov_a, cov_b, cov_c).

    Returns an (S, 9) array indexed like the forward inputs.
    """
    cdef int ntx = (width + tile - 1) // tile
    cdef int nty = (height + tile - 1) // tile
    cdef int ntiles = ntx * nty
    cdef long long total = offsets[ntiles]

    cdef cnp.ndarray pg_arr = np.zeros((total, 9), dtype=np.float64)
    cdef double[:, ::1] pg = pg_arr

    cdef double bg0 = background[0]
    cdef double bg1 = background[1]
    cdef double bg2 = background[2]

    cdef int t, tx, ty, px, py, px0, px1, py0, py1, s, n, cnt, rx0, rx1
    cdef long long si, stop
    cdef double cx, cy, dx, dy, q, g, alpha, one_minus, t_after, t_i
    cdef double s0, s1, s2, d0, d1, d2, d_alpha, dg, u0, u1, w

    for t in prange(ntiles, nogil=True, schedule="dynamic",
                    num_threads=num_threads):
        # direct assignments so the span outputs are privatized per thread
        rx0 = 0
        rx1 = -1
        ty = t // ntx
        tx = t - ty * ntx
        px0 = tx * tile
        py0 = ty * tile
        px1 = px0 + tile
        py1 = py0 + tile
        if px1 > width:
            px1 = width
        if py1 > height:
            py1 = height
        for py in range(py0, py1):
            cy = py + 0.5
            for px in range(px0, px1):
                cx = px + 0.5
                n = n_contrib[py, px]
                if n == 0:
                    continue
                # locate the last composited slot for this pixel
                cnt = 0
                stop = -1
                for si in range(offsets[t], offsets[t + 1]):
                    s = pairs[si]
                    if px < rect[s, 0] or px > rect[s, 1]:
                        continue
                    if py < rect[s, 2] or py > rect[s, 3]:
                        continue
                    dy = cy - mean2d[s, 1]
                    if row_span(conic[s, 0], conic[s, 1], conic[s, 2],
                                mean2d[s, 0], dy, q_cut[s], &rx0, &rx1) == 0:
                        continue
                    if px < rx0 or px > rx1:
                        continue
                    dx = cx - mean2d[s, 0]
                    q = (conic[s, 0] * dx * dx + 2.0 * conic[s, 1] * dx * dy
                         + conic[s, 2] * dy * dy)
                    if q > q_cut[s]:
                        continue
                    cnt = cnt + 1
                    if cnt == n:
                        stop = si
                        break
                if stop < 0:
                    continue
                t_after = final_t[py, px]
                s0 = t_after * bg0
                s1 = t_after * bg1
                s2 = t_after * bg2
                d0 = d_image[py, px, 0]
                d1 = d_image[py, px, 1]
                d2 = d_image[py, px, 2]
                for si in range(stop, offsets[t] - 1, -1):
                    s = pairs[si]
                    if px < rect[s, 0] or px > rect[s, 1]:
                        continue
                    if py < rect[s, 2] or py > rect[s, 3]:
                        continue
                    dy = cy - mean2d[s, 1]
                    if row_span(conic[s, 0], conic[s, 1], conic[s, 2],
                                mean2d[s, 0], dy, q_cut[s], &rx0, &rx1) == 0:
                        continue
                    if px < rx0 or px > rx1:
                        continue
                    dx = cx - mean2d[s, 0]
                    q = (conic[s, 0] * dx * dx + 2.0 * conic[s, 1] * dx * dy
                         + conic[s, 2] * dy * dy)
                    if q > q_cut[s]:
                        continue
                    g = fast_exp_neg(-0.5 * q)
                    alpha = opacity[s] * g
                    if alpha > alpha_max:
                        alpha = alpha_max
                    one_minus = 1.0 - alpha
                    t_i = t_after / one_minus
                    w = t_i * alpha
                    pg[si, 0] += d0 * w
                    pg[si, 1] += d1 * w
                    pg[si, 2] += d2 * w
                    d_alpha = (d0 * (t_i * color[s, 0] - s0 / one_minus)
                               + d1 * (t_i * color[s, 1] - s1 / one_minus)
                               + d2 * (t_i * color[s, 2] - s2 / one_minus))
                    if opacity[s] * g < alpha_max:
                        pg[si, 3] += d_alpha * g
                        dg = d_alpha * opacity[s] * g
                        u0 = conic[s, 0] * dx + conic[s, 1] * dy
                        u1 = conic[s, 1] * dx + conic[s, 2] * dy
                        pg[si, 4] += dg * u0
                        pg[si, 5] += dg * u1
                        pg[si, 6] += 0.5 * dg * u0 * u0
                        pg[si, 7] += dg * u0 * u1
                        pg[si, 8] += 0.5 * dg * u1 * u1
                    s0 = s0 + w * color[s, 0]
                    s1 = s1 + w * color[s, 1]
                    s2 = s2 + w * color[s, 2]
                    t_after = t_i

    cdef int n_splats = mean2d.shape[0]
    cdef cnp.ndarray grads_arr = np.zeros((n_splats, 9), dtype=np.float64)
    cdef double[:, ::1] grads = grads_arr
    cdef long long p
    cdef int k
    # fold per-tile partials in tile-index (== pair slot) order: deterministic
    for p in range(total):
        s = pairs[p]
        for k in range(9):
            grads[s, k] += pg[p, k]
    return grads_arr
