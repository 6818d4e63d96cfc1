# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled splat rasterization / compositing / occlusion kernels.

Semantics are defined by `_pykernels`; this module only makes them fast.
All parallel paths are deterministic for every thread count: per-pixel work
is independent, fragment lists are canonically sorted by (z, disk), and
float reductions happen in fixed serial order.
"""

import numpy as np

cimport numpy as cnp
cimport openmp
from cython.parallel cimport prange
from libc.math cimport ceil, exp, floor

BACKEND = "compiled"

cdef extern from *:
    """
    static inline int sg_atomic_add_int(int* p, int v) {
        return __sync_fetch_and_add(p, v);
    }
    """
    int sg_atomic_add_int(int* p, int v) nogil


cdef inline int resolve_threads(int threads) noexcept nogil:
    if threads > 0:
        return threads
    return openmp.omp_get_max_threads()


cdef inline double sig(double x) noexcept nogil:
    cdef double e
    if x >= 0.0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


cdef inline bint frag_less(double za, int da, double zb, int db) noexcept nogil:
    if za < zb:
        return 1
    if za > zb:
        return 0
    return da < db


cdef void sort_segment(long lo, long hi, int* fd, double* fg, double* fz) noexcept nogil:
    """Quicksort (median-of-three) on [lo, hi) by (z, disk); insertion for runs <= 24."""
    cdef long i, j, mid
    cdef double pz, tg, tz
    cdef int pd, td
    while hi - lo > 24:
        mid = lo + (hi - lo) // 2
        # median-of-three pivot moved to hi-1
        if frag_less(fz[mid], fd[mid], fz[lo], fd[lo]):
            fz[lo], fz[mid] = fz[mid], fz[lo]
            fd[lo], fd[mid] = fd[mid], fd[lo]
            fg[lo], fg[mid] = fg[mid], fg[lo]
        if frag_less(fz[hi - 1], fd[hi - 1], fz[lo], fd[lo]):
            fz[lo], fz[hi - 1] = fz[hi - 1], fz[lo]
            fd[lo], fd[hi - 1] = fd[hi - 1], fd[lo]
            fg[lo], fg[hi - 1] = fg[hi - 1], fg[lo]
        if frag_less(fz[hi - 1], fd[hi - 1], fz[mid], fd[mid]):
            fz[mid], fz[hi - 1] = fz[hi - 1], fz[mid]
            fd[mid], fd[hi - 1] = fd[hi - 1], fd[mid]
            fg[mid], fg[hi - 1] = fg[hi - 1], fg[mid]
        pz = fz[hi - 1]
        pd = fd[hi - 1]
        i = lo - 1
        for j in range(lo, hi - 1):
            if frag_less(fz[j], fd[j], pz, pd):
                i += 1
                fz[i], fz[j] = fz[j], fz[i]
                fd[i], fd[j] = fd[j], fd[i]
                fg[i], fg[j] = fg[j], fg[i]
        i += 1
        fz[i], fz[hi - 1] = fz[hi - 1], fz[i]
        fd[i], fd[hi - 1] = fd[hi - 1], fd[i]
        fg[i], fg[hi - 1] = fg[hi - 1], fg[i]
        if i - lo < hi - i - 1:
            sort_segment(lo, i, fd, fg, fz)
            lo = i + 1
        else:
            sort_segment(i + 1, hi, fd, fg, fz)
            hi = i
    # insertion sort for the remainder
    for i in range(lo + 1, hi):
        tz = fz[i]
        td = fd[i]
        tg = fg[i]
        j = i - 1
        while j >= lo and frag_less(tz, td, fz[j], fd[j]):
            fz[j + 1] = fz[j]
            fd[j + 1] = fd[j]
            fg[j + 1] = fg[j]
            j -= 1
        fz[j + 1] = tz
        fd[j + 1] = td
        fg[j + 1] = tg


def build_fragments(double[::1] qx, double[::1] qy, double[::1] z,
                    double[::1] ia, double[::1] ib, double[::1] ic,
                    double[::1] bx, double[::1] by,
                    cnp.uint8_t[::1] valid, int W, int H, int threads=0):
    cdef int n = qx.shape[0]
    cdef int nt = resolve_threads(threads)
    cdef int npx = W * H
    counts_arr = np.zeros(npx, dtype=np.int32)
    cdef int[::1] counts = counts_arr
    cdef int i, row, col, c0, c1, r0, r1
    cdef double dx, dy, maha

    with nogil:
        for i in prange(n, num_threads=nt, schedule='dynamic', chunksize=64):
            if valid[i]:
                c0 = max(0, <int>ceil(qx[i] - bx[i] - 0.5))
                c1 = min(W - 1, <int>floor(qx[i] + bx[i] - 0.5))
                r0 = max(0, <int>ceil(qy[i] - by[i] - 0.5))
                r1 = min(H - 1, <int>floor(qy[i] + by[i] - 0.5))
                for row in range(r0, r1 + 1):
                    dy = row + 0.5 - qy[i]
                    for col in range(c0, c1 + 1):
                        dx = col + 0.5 - qx[i]
                        maha = ia[i] * dx * dx + 2.0 * ib[i] * dx * dy + ic[i] * dy * dy
                        if maha <= 9.0:
                            sg_atomic_add_int(&counts[row * W + col], 1)

    offsets_arr = np.zeros(npx + 1, dtype=np.int64)
    np.cumsum(counts_arr, dtype=np.int64, out=offsets_arr[1:])
    cdef long nfrag = offsets_arr[npx]
    fdisk_arr = np.empty(nfrag, dtype=np.int32)
    fg_arr = np.empty(nfrag, dtype=np.float64)
    fz_arr = np.empty(nfrag, dtype=np.float64)
    cursor_arr = np.zeros(npx, dtype=np.int32)
    cdef long[::1] offsets = offsets_arr
    cdef int[::1] fdisk = fdisk_arr
    cdef double[::1] fg = fg_arr
    cdef double[::1] fz = fz_arr
    cdef int[::1] cursor = cursor_arr
    cdef long slot
    cdef int p

    if nfrag > 0:
        with nogil:
            for i in prange(n, num_threads=nt, schedule='dynamic', chunksize=64):
                if valid[i]:
                    c0 = max(0, <int>ceil(qx[i] - bx[i] - 0.5))
                    c1 = min(W - 1, <int>floor(qx[i] + bx[i] - 0.5))
                    r0 = max(0, <int>ceil(qy[i] - by[i] - 0.5))
                    r1 = min(H - 1, <int>floor(qy[i] + by[i] - 0.5))
                    for row in range(r0, r1 + 1):
                        dy = row + 0.5 - qy[i]
                        for col in range(c0, c1 + 1):
                            dx = col + 0.5 - qx[i]
                            maha = ia[i] * dx * dx + 2.0 * ib[i] * dx * dy + ic[i] * dy * dy
                            if maha <= 9.0:
                                p = row * W + col
                                slot = offsets[p] + sg_atomic_add_int(&cursor[p], 1)
                                fdisk[slot] = i
                                fg[slot] = exp(-0.5 * maha)
                                fz[slot] = z[i]
            for p in prange(npx, num_threads=nt, schedule='dynamic', chunksize=1024):
                if offsets[p + 1] - offsets[p] > 1:
                    sort_segment(offsets[p], offsets[p + 1], &fdisk[0], &fg[0], &fz[0])
    return offsets_arr, fdisk_arr, fg_arr, fz_arr


def composite(long[::1] offsets, int[::1] fdisk, double[::1] fg, double[::1] fz,
              double[::1] opacity, double[:, ::1] colors, double[::1] bg,
              double w_min, double t_min, int W, int H,
              bint want_color=True, int threads=0):
    cdef int npx = W * H
    cdef int nt = resolve_threads(threads)
    img_arr = np.empty((npx, 3), dtype=np.float64)
    alpha_arr = np.zeros(npx, dtype=np.float64)
    first_arr = np.full(npx, -1, dtype=np.int32)
    cdef double[:, ::1] img = img_arr
    cdef double[::1] alpha = alpha_arr
    cdef int[::1] first = first_arr
    cdef int p, d, fh
    cdef long f
    cdef double t, a, og, w, cr, cg, cb

    with nogil:
        for p in prange(npx, num_threads=nt, schedule='dynamic', chunksize=1024):
            t = 1.0
            a = 0.0
            cr = 0.0
            cg = 0.0
            cb = 0.0
            fh = -1
            for f in range(offsets[p], offsets[p + 1]):
                d = fdisk[f]
                og = opacity[d] * fg[f]
                w = og * t
                if fh < 0 and w > w_min:
                    fh = d
                if want_color:
                    cr = cr + w * colors[d, 0]
                    cg = cg + w * colors[d, 1]
                    cb = cb + w * colors[d, 2]
                a = a + w
                t = t * (1.0 - og)
                if t < t_min:
                    break
            alpha[p] = a
            first[p] = fh
            img[p, 0] = cr + (1.0 - a) * bg[0]
            img[p, 1] = cg + (1.0 - a) * bg[1]
            img[p, 2] = cb + (1.0 - a) * bg[2]
    return img_arr.reshape(H, W, 3), alpha_arr.reshape(H, W), first_arr.reshape(H, W)


def masked_loss(long[::1] offsets, int[::1] fdisk, double[::1] fg,
                double[::1] opacity, double[:, ::1] colors,
                double[:, ::1] target, cnp.uint8_t[::1] pixmask,
                double[::1] bg, double t_min, int threads=0):
    cdef int npx = offsets.shape[0] - 1
    cdef int nt = resolve_threads(threads)
    loss_arr = np.zeros(npx, dtype=np.float64)
    cdef double[::1] loss_px = loss_arr
    cdef int p, d
    cdef long f
    cdef double t, a, og, w, cr, cg, cb, v, acc
    cdef long n_masked = 0

    with nogil:
        for p in prange(npx, num_threads=nt, schedule='dynamic', chunksize=1024):
            if pixmask[p]:
                t = 1.0
                a = 0.0
                cr = 0.0
                cg = 0.0
                cb = 0.0
                for f in range(offsets[p], offsets[p + 1]):
                    d = fdisk[f]
                    og = opacity[d] * fg[f]
                    w = og * t
                    cr = cr + w * colors[d, 0]
                    cg = cg + w * colors[d, 1]
                    cb = cb + w * colors[d, 2]
                    a = a + w
                    t = t * (1.0 - og)
                    if t < t_min:
                        break
                v = cr + (1.0 - a) * bg[0] - target[p, 0]
                acc = v if v >= 0 else -v
                v = cg + (1.0 - a) * bg[1] - target[p, 1]
                acc = acc + (v if v >= 0 else -v)
                v = cb + (1.0 - a) * bg[2] - target[p, 2]
                acc = acc + (v if v >= 0 else -v)
                loss_px[p] = acc
    cdef double total = 0.0
    for p in range(npx):
        if pixmask[p]:
            total += loss_px[p]
            n_masked += 1
    if n_masked == 0:
        raise ValueError("empty pixel mask")
    return total / (3.0 * n_masked)


def masked_loss_grad(long[::1] offsets, int[::1] fdisk, double[::1] fg,
                     double[::1] opacity, double[:, ::1] colors,
                     double[:, ::1] target, cnp.uint8_t[::1] pixmask,
                     cnp.uint8_t[::1] active, double[::1] bg, double t_min,
                     int threads=0):
    """Loss + exact dcolor/dopacity for active disks.

    Per-fragment contributions are written into pixel-partitioned buffers in
    parallel, then reduced serially in canonical order so results are
    independent of the thread count.
    """
    cdef int npx = offsets.shape[0] - 1
    cdef int n = opacity.shape[0]
    cdef int nt = resolve_threads(threads)
    cdef long nfrag = fdisk.shape[0]
    cdef long n_masked = 0
    cdef int p
    for p in range(npx):
        if pixmask[p]:
            n_masked += 1
    if n_masked == 0:
        raise ValueError("empty pixel mask")
    cdef double inv = 1.0 / (3.0 * n_masked)

    loss_arr = np.zeros(npx, dtype=np.float64)
    ncontrib_arr = np.zeros(npx, dtype=np.int32)
    fc_arr = np.empty((max(nfrag, 1), 4), dtype=np.float64)
    dcol_arr = np.zeros((n, 3), dtype=np.float64)
    dopac_arr = np.zeros(n, dtype=np.float64)
    cdef double[::1] loss_px = loss_arr
    cdef int[::1] ncontrib = ncontrib_arr
    cdef double[:, ::1] fc = fc_arr
    cdef double[:, ::1] dcol = dcol_arr
    cdef double[::1] dopac = dopac_arr

    cdef long f, lo, hi, stop
    cdef int d, ch
    cdef double t, a, og, w, o, g, one_m, q, dw_own
    cdef double s0, s1, s2, r0, r1, r2, df0, df1, df2, sg0, sg1, sg2
    cdef double pw, ps0, ps1, ps2, suf_w, suf0, suf1, suf2, acc

    with nogil:
        for p in prange(npx, num_threads=nt, schedule='dynamic', chunksize=512):
            if pixmask[p]:
                lo = offsets[p]
                hi = offsets[p + 1]
                t = 1.0
                a = 0.0
                s0 = 0.0
                s1 = 0.0
                s2 = 0.0
                stop = hi
                for f in range(lo, hi):
                    d = fdisk[f]
                    og = opacity[d] * fg[f]
                    w = og * t
                    s0 = s0 + w * colors[d, 0]
                    s1 = s1 + w * colors[d, 1]
                    s2 = s2 + w * colors[d, 2]
                    a = a + w
                    t = t * (1.0 - og)
                    if t < t_min:
                        stop = f + 1
                        break
                r0 = s0 + (1.0 - a) * bg[0]
                r1 = s1 + (1.0 - a) * bg[1]
                r2 = s2 + (1.0 - a) * bg[2]
                df0 = r0 - target[p, 0]
                df1 = r1 - target[p, 1]
                df2 = r2 - target[p, 2]
                acc = (df0 if df0 >= 0 else -df0)
                acc = acc + (df1 if df1 >= 0 else -df1)
                acc = acc + (df2 if df2 >= 0 else -df2)
                loss_px[p] = acc
                sg0 = inv if df0 > 0 else (-inv if df0 < 0 else 0.0)
                sg1 = inv if df1 > 0 else (-inv if df1 < 0 else 0.0)
                sg2 = inv if df2 > 0 else (-inv if df2 < 0 else 0.0)
                ncontrib[p] = <int>(stop - lo)

                t = 1.0
                pw = 0.0
                ps0 = 0.0
                ps1 = 0.0
                ps2 = 0.0
                for f in range(lo, stop):
                    d = fdisk[f]
                    g = fg[f]
                    o = opacity[d]
                    og = o * g
                    w = og * t
                    if active[d]:
                        fc[f, 0] = sg0 * w
                        fc[f, 1] = sg1 * w
                        fc[f, 2] = sg2 * w
                        dw_own = g * t
                        suf0 = s0 - ps0 - w * colors[d, 0]
                        suf1 = s1 - ps1 - w * colors[d, 1]
                        suf2 = s2 - ps2 - w * colors[d, 2]
                        suf_w = a - pw - w
                        one_m = 1.0 - og
                        q = g / one_m if one_m > 1e-12 else 0.0
                        fc[f, 3] = (
                            sg0 * (dw_own * colors[d, 0] - q * suf0 - bg[0] * (dw_own - q * suf_w))
                            + sg1 * (dw_own * colors[d, 1] - q * suf1 - bg[1] * (dw_own - q * suf_w))
                            + sg2 * (dw_own * colors[d, 2] - q * suf2 - bg[2] * (dw_own - q * suf_w))
                        )
                    else:
                        fc[f, 0] = 0.0
                        fc[f, 1] = 0.0
                        fc[f, 2] = 0.0
                        fc[f, 3] = 0.0
                    ps0 = ps0 + w * colors[d, 0]
                    ps1 = ps1 + w * colors[d, 1]
                    ps2 = ps2 + w * colors[d, 2]
                    pw = pw + w
                    t = t * (1.0 - og)

    # serial reductions in canonical pixel/fragment order (thread-count invariant)
    cdef double total = 0.0
    with nogil:
        for p in range(npx):
            if pixmask[p]:
                total += loss_px[p]
                lo = offsets[p]
                for f in range(lo, lo + ncontrib[p]):
                    d = fdisk[f]
                    dcol[d, 0] += fc[f, 0]
                    dcol[d, 1] += fc[f, 1]
                    dcol[d, 2] += fc[f, 2]
                    dopac[d] += fc[f, 3]
    return total * inv, dcol_arr, dopac_arr


def weight_mass(long[::1] offsets, int[::1] fdisk, double[::1] fg,
                double[::1] opacity, cnp.uint8_t[::1] pixmask, double t_min,
                int threads=0):
    cdef int npx = offsets.shape[0] - 1
    cdef int n = opacity.shape[0]
    mass_arr = np.zeros(n, dtype=np.float64)
    cdef double[::1] mass = mass_arr
    cdef int p, d
    cdef long f
    cdef double t, og
    with nogil:
        for p in range(npx):
            if pixmask[p]:
                t = 1.0
                for f in range(offsets[p], offsets[p + 1]):
                    d = fdisk[f]
                    og = opacity[d] * fg[f]
                    mass[d] += og * t
                    t *= 1.0 - og
                    if t < t_min:
                        break
    return mass_arr


cdef double occ_row(double uqx, double uqy, double urho, double uz,
                    double[::1] gqx, double[::1] gqy, double[::1] grho,
                    double[::1] gz, double tau, double margin, bint exact,
                    bint tau_scales_all) noexcept nogil:
    cdef long j
    cdef double dqx, dqy, dq2, rsum, arg1, arg2, s = 0.0
    for j in range(gqx.shape[0]):
        dqx = uqx - gqx[j]
        dqy = uqy - gqy[j]
        dq2 = dqx * dqx + dqy * dqy
        rsum = urho + grho[j]
        if tau_scales_all:
            arg1 = tau * (rsum * rsum - dq2)
        else:
            arg1 = tau * (rsum * rsum) - dq2
        arg2 = tau * (uz - gz[j])
        if exact or (arg1 >= -margin and arg2 >= -margin):
            s += sig(arg1) * sig(arg2)
    return s


def occlusion_pair_sum(double[::1] uqx, double[::1] uqy, double[::1] urho,
                       double[::1] uz, double[::1] gqx, double[::1] gqy,
                       double[::1] grho, double[::1] gz, double tau,
                       double margin, bint exact, bint tau_scales_all,
                       int threads=0):
    cdef long nu = uqx.shape[0]
    cdef int nt = resolve_threads(threads)
    partial_arr = np.zeros(nu, dtype=np.float64)
    cdef double[::1] partial = partial_arr
    cdef long i
    with nogil:
        for i in prange(nu, num_threads=nt, schedule='dynamic', chunksize=8):
            partial[i] = occ_row(uqx[i], uqy[i], urho[i], uz[i],
                                 gqx, gqy, grho, gz, tau, margin, exact,
                                 tau_scales_all)
    cdef double total = 0.0
    with nogil:
        for i in range(nu):
            total += partial[i]
    return total
