"""Pure-numpy reference implementation of the hot kernels.

Selected at import when the compiled extension is unavailable (or when
SPLATGROW_FORCE_FALLBACK=1). Semantics match `_cykernels` exactly: same
fragment inclusion test, same canonical (z, disk) ordering, same
compositing walk, same pair-sum pruning rule. Slower, but readable and
entirely adequate for unit-test-sized scenes.
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def build_fragments(qx, qy, z, ia, ib, ic, bx, by, valid, W, H, threads=0):
    """Bins projected disks into per-pixel fragment lists sorted by (z, disk).

    Returns (offsets[H*W+1] int64, fdisk int32, fg float64, fz float64).
    Inclusion: Mahalanobis distance^2 <= 9 (3-sigma) at the pixel center.
    """
    pix_parts, disk_parts, g_parts, z_parts = [], [], [], []
    for i in range(qx.shape[0]):
        if not valid[i]:
            continue
        c0 = max(0, int(np.ceil(qx[i] - bx[i] - 0.5)))
        c1 = min(W - 1, int(np.floor(qx[i] + bx[i] - 0.5)))
        r0 = max(0, int(np.ceil(qy[i] - by[i] - 0.5)))
        r1 = min(H - 1, int(np.floor(qy[i] + by[i] - 0.5)))
        if c1 < c0 or r1 < r0:
            continue
        cols = np.arange(c0, c1 + 1)
        rows = np.arange(r0, r1 + 1)
        dx = cols + 0.5 - qx[i]
        dy = rows + 0.5 - qy[i]
        maha = (
            ia[i] * dx[None, :] * dx[None, :]
            + 2.0 * ib[i] * dx[None, :] * dy[:, None]
            + ic[i] * dy[:, None] * dy[:, None]
        )
        inside = maha <= 9.0
        if not inside.any():
            continue
        pix = (rows[:, None] * W + cols[None, :])[inside]
        pix_parts.append(pix)
        disk_parts.append(np.full(pix.shape[0], i, dtype=np.int32))
        g_parts.append(np.exp(-0.5 * maha[inside]))
        z_parts.append(np.full(pix.shape[0], z[i]))

    if pix_parts:
        fpix = np.concatenate(pix_parts)
        fdisk = np.concatenate(disk_parts)
        fg = np.concatenate(g_parts)
        fz = np.concatenate(z_parts)
        order = np.lexsort((fdisk, fz, fpix))
        fpix, fdisk, fg, fz = fpix[order], fdisk[order], fg[order], fz[order]
        counts = np.bincount(fpix, minlength=W * H)
    else:
        fdisk = np.empty(0, dtype=np.int32)
        fg = np.empty(0)
        fz = np.empty(0)
        counts = np.zeros(W * H, dtype=np.int64)
    offsets = np.zeros(W * H + 1, dtype=np.int64)
    np.cumsum(counts, dtype=np.int64, out=offsets[1:])
    return offsets, fdisk, np.ascontiguousarray(fg), np.ascontiguousarray(fz)


def composite(offsets, fdisk, fg, fz, opacity, colors, bg, w_min, t_min, W, H,
              want_color=True, threads=0):
    """Front-to-back alpha compositing over pre-sorted fragments.

    Returns (color[H,W,3], alpha[H,W], first_hit[H,W] int32 with -1 = none).
    """
    npx = W * H
    img = np.empty((npx, 3))
    img[:] = bg
    alpha = np.zeros(npx)
    first = np.full(npx, -1, dtype=np.int32)
    covered = np.nonzero(np.diff(offsets) > 0)[0]
    for p in covered:
        t = 1.0
        a = 0.0
        cr = cg = cb = 0.0
        fh = -1
        for f in range(offsets[p], offsets[p + 1]):
            d = fdisk[f]
            og = opacity[d] * fg[f]
            w = og * t
            if fh < 0 and w > w_min:
                fh = d
            if want_color:
                cr += w * colors[d, 0]
                cg += w * colors[d, 1]
                cb += w * colors[d, 2]
            a += w
            t *= 1.0 - og
            if t < t_min:
                break
        alpha[p] = a
        first[p] = fh
        if want_color:
            img[p, 0] = cr + (1.0 - a) * bg[0]
            img[p, 1] = cg + (1.0 - a) * bg[1]
            img[p, 2] = cb + (1.0 - a) * bg[2]
    return img.reshape(H, W, 3), alpha.reshape(H, W), first.reshape(H, W)


def masked_loss(offsets, fdisk, fg, opacity, colors, target, pixmask, bg, t_min,
                threads=0):
    """Mean L1 between the composited image and the target over masked pixels."""
    total = 0.0
    n_masked = 0
    tgt = target.reshape(-1, 3)
    for p in np.nonzero(pixmask)[0]:
        n_masked += 1
        t = 1.0
        cr = cg = cb = 0.0
        a = 0.0
        for f in range(offsets[p], offsets[p + 1]):
            d = fdisk[f]
            og = opacity[d] * fg[f]
            w = og * t
            cr += w * colors[d, 0]
            cg += w * colors[d, 1]
            cb += w * colors[d, 2]
            a += w
            t *= 1.0 - og
            if t < t_min:
                break
        total += abs(cr + (1.0 - a) * bg[0] - tgt[p, 0])
        total += abs(cg + (1.0 - a) * bg[1] - tgt[p, 1])
        total += abs(cb + (1.0 - a) * bg[2] - tgt[p, 2])
    if n_masked == 0:
        raise ValueError("empty pixel mask")
    return total / (3.0 * n_masked)


def masked_loss_grad(offsets, fdisk, fg, opacity, colors, target, pixmask,
                     active, bg, t_min, threads=0):
    """Loss plus exact dLoss/dcolor and dLoss/dopacity for active disks.

    Gradients of inactive disks are exactly zero. The transmittance chain is
    differentiated in a second front-to-back pass using suffix sums.
    """
    n = opacity.shape[0]
    dcol = np.zeros((n, 3))
    dopac = np.zeros(n)
    total = 0.0
    n_masked = int(pixmask.sum())
    if n_masked == 0:
        raise ValueError("empty pixel mask")
    inv = 1.0 / (3.0 * n_masked)
    tgt = target.reshape(-1, 3)
    for p in np.nonzero(pixmask)[0]:
        lo, hi = offsets[p], offsets[p + 1]
        # pass 1: composite, channel residual signs, totals
        t = 1.0
        a = 0.0
        s = np.zeros(3)
        stop = hi
        for f in range(lo, hi):
            d = fdisk[f]
            og = opacity[d] * fg[f]
            w = og * t
            s += w * colors[d]
            a += w
            t *= 1.0 - og
            if t < t_min:
                stop = f + 1
                break
        r = s + (1.0 - a) * bg
        diff = r - tgt[p]
        total += np.abs(diff).sum()
        sign = np.sign(diff) * inv
        # pass 2: gradients via suffix sums
        t = 1.0
        pref_w = 0.0
        pref_s = np.zeros(3)
        for f in range(lo, stop):
            d = fdisk[f]
            g = fg[f]
            o = opacity[d]
            og = o * g
            w = og * t
            if active[d]:
                dcol[d] += sign * w
                dw_own = g * t
                suf_s = s - pref_s - w * colors[d]
                suf_w = a - pref_w - w
                one_m = 1.0 - og
                q = g / one_m if one_m > 1e-12 else 0.0
                dr_do = dw_own * colors[d] - q * suf_s - bg * (dw_own - q * suf_w)
                dopac[d] += float(sign @ dr_do)
            pref_s += w * colors[d]
            pref_w += w
            t *= 1.0 - og
    return total * inv, dcol, dopac


def weight_mass(offsets, fdisk, fg, opacity, pixmask, t_min, threads=0):
    """Per-disk sum of compositing weights over masked pixels (preconditioner)."""
    n = opacity.shape[0]
    mass = np.zeros(n)
    for p in np.nonzero(pixmask)[0]:
        t = 1.0
        for f in range(offsets[p], offsets[p + 1]):
            d = fdisk[f]
            og = opacity[d] * fg[f]
            mass[d] += og * t
            t *= 1.0 - og
            if t < t_min:
                break
    return mass


def occlusion_pair_sum(uqx, uqy, urho, uz, gqx, gqy, grho, gz, tau, margin,
                       exact, tau_scales_all, threads=0):
    """Sigmoid-relaxed count of un-grown disks occluded by grown disks.

    Pruning (exact=False) drops pairs with either sigmoid argument below
    -margin; their total contribution is bounded by n*m*exp(-margin).
    """
    total = 0.0
    chunk = max(1, int(4e6 // max(1, gqx.shape[0])))
    for i0 in range(0, uqx.shape[0], chunk):
        i1 = min(i0 + chunk, uqx.shape[0])
        dqx = uqx[i0:i1, None] - gqx[None, :]
        dqy = uqy[i0:i1, None] - gqy[None, :]
        dq2 = dqx * dqx + dqy * dqy
        rsum = urho[i0:i1, None] + grho[None, :]
        if tau_scales_all:
            arg1 = tau * (rsum * rsum - dq2)
        else:
            arg1 = tau * (rsum * rsum) - dq2
        arg2 = tau * (uz[i0:i1, None] - gz[None, :])
        if exact:
            total += float((_sigmoid(arg1) * _sigmoid(arg2)).sum())
        else:
            keep = (arg1 >= -margin) & (arg2 >= -margin)
            total += float((_sigmoid(arg1[keep]) * _sigmoid(arg2[keep])).sum())
    return total
