"""Pure-numpy lane of the surfel compositing kernels.

Semantics match ``_splat_nb`` (same guards, same constants). The forward
pass loops over sorted surfels and vectorizes over each surfel's screen
bounding box; the backward pass is fully vectorized over tape entries
with segmented suffix sums replacing the per-pixel reverse walk.
"""

import numpy as np


def _pixel_rays(H, W, fx, fy, cx, cy, Rcw):
    a = (np.arange(W) + 0.5 - cx) / fx
    b = (np.arange(H) + 0.5 - cy) / fy
    ga, gb = np.meshgrid(a, b)
    L = np.sqrt(ga * ga + gb * gb + 1.0)
    d = np.stack([ga, gb, np.ones_like(ga)], axis=-1) / L[..., None]
    wdir = d @ Rcw.T
    return wdir, L


def composite_forward(H, W, fx, fy, cx, cy, Rcw, ox, oy, oz,
                      cen, t1, t2, nr, sx, sy, opac, col,
                      order, bbox, stop_T, want_tape, cap):
    origin = np.array([ox, oy, oz])
    wdir, L = _pixel_rays(H, W, fx, fy, cx, cy, Rcw)
    HW = H * W
    cacc = np.zeros((HW, 3))
    nacc = np.zeros((HW, 3))
    dacc = np.zeros(HW)
    Wimg = np.zeros(HW)
    Timg = np.ones((H, W))
    px_grid = (np.arange(H)[:, None] * W + np.arange(W)[None, :])
    chunks_px, chunks_idx, chunks_alpha, chunks_wgt = [], [], [], []
    for j in order:
        x0, x1, y0, y1 = bbox[j]
        if x0 >= x1 or y0 >= y1:
            continue
        w = wdir[y0:y1, x0:x1]
        Ls = L[y0:y1, x0:x1]
        Ts = Timg[y0:y1, x0:x1]
        n = nr[j]
        nw = w @ n
        live = (Ts >= stop_T) & (np.abs(nw) >= 1e-9)
        t = np.where(live, np.dot(n, cen[j] - origin) / np.where(nw == 0, 1.0, nw), -1.0)
        live &= t >= 1e-9
        h = origin + t[..., None] * w - cen[j]
        u = h @ t1[j]
        v = h @ t2[j]
        ru = u / sx[j]
        rv = v / sy[j]
        r2 = ru * ru + rv * rv
        live &= r2 <= 9.0
        G = np.exp(-0.5 * np.where(live, r2, 0.0))
        al = np.minimum(opac[j] * G, 0.999)
        live &= al >= 1e-14
        if not live.any():
            continue
        alm = np.where(live, al, 0.0)
        wgt = Ts * alm
        sub = np.s_[y0:y1, x0:x1]
        pxs = px_grid[sub]
        np.add.at(cacc, pxs.ravel(), (wgt[..., None] * col[j]).reshape(-1, 3))
        np.add.at(nacc, pxs.ravel(), (wgt[..., None] * n).reshape(-1, 3))
        np.add.at(dacc, pxs.ravel(), (wgt * t / Ls).ravel())
        np.add.at(Wimg, pxs.ravel(), wgt.ravel())
        Timg[sub] = Ts * (1.0 - alm)
        if want_tape:
            sel = np.nonzero(live.ravel())[0]
            chunks_px.append(pxs.ravel()[sel])
            chunks_idx.append(np.full(sel.shape, j, dtype=np.int32))
            chunks_alpha.append(al.ravel()[sel])
            chunks_wgt.append(wgt.ravel()[sel])
    if chunks_px:
        tpx = np.concatenate(chunks_px)
        tidx = np.concatenate(chunks_idx)
        talp = np.concatenate(chunks_alpha)
        twgt = np.concatenate(chunks_wgt)
    else:
        tpx = np.zeros(0, dtype=np.int64)
        tidx = np.zeros(0, dtype=np.int32)
        talp = np.zeros(0)
        twgt = np.zeros(0)
    return cacc, nacc, dacc, Wimg, tpx.astype(np.int64), tidx, talp, twgt


def _segment_suffix(values: np.ndarray, pptr: np.ndarray,
                    seg_of_entry: np.ndarray) -> np.ndarray:
    """Exclusive suffix sums within CSR segments; values (M, K)."""
    cs = np.cumsum(values, axis=0)
    starts = pptr[seg_of_entry]                 # segment start per entry
    ends = pptr[seg_of_entry + 1]
    base = np.where(starts[:, None] > 0, cs[starts - 1], 0.0)
    totals = cs[ends - 1] - base
    incl = cs - base
    return totals - incl


def composite_backward(H, W, fx, fy, cx, cy, Rcw, ox, oy, oz,
                       cen, t1, t2, nr, sx, sy, opac, col,
                       pptr, eidx, ealp, ewgt,
                       gC, gAN, gAD, gW):
    N = cen.shape[0]
    out = (np.zeros((N, 3)), np.zeros((N, 3)), np.zeros((N, 3)),
           np.zeros((N, 3)), np.zeros(N), np.zeros(N), np.zeros(N),
           np.zeros((N, 3)))
    M = len(eidx)
    if M == 0:
        return out
    dcen, dt1_o, dt2_o, dnr_o, dsx_o, dsy_o, dop_o, dcol_o = out
    origin = np.array([ox, oy, oz])
    wdir_img, L_img = _pixel_rays(H, W, fx, fy, cx, cy, Rcw)

    counts = np.diff(pptr)
    seg = np.repeat(np.arange(H * W, dtype=np.int64), counts)
    w = wdir_img.reshape(-1, 3)[seg]
    L = L_img.ravel()[seg]
    dirz = 1.0 / L

    c = cen[eidx]
    a1 = t1[eidx]
    a2 = t2[eidx]
    n = nr[eidx]
    sxe = sx[eidx]
    sye = sy[eidx]
    ope = opac[eidx]
    rgb = col[eidx]

    nw = np.sum(n * w, axis=1)
    t = np.sum(n * (c - origin), axis=1) / nw
    h = origin + t[:, None] * w - c
    u = np.sum(h * a1, axis=1)
    v = np.sum(h * a2, axis=1)
    G = np.exp(-0.5 * ((u / sxe) ** 2 + (v / sye) ** 2))
    zdep = t * dirz
    T = ewgt / ealp

    gCps = gC[seg]
    gNps = gAN[seg]
    gDps = gAD[seg]
    gWps = gW[seg]

    # q-channels: rgb (3), normal (3), depth (1), energy (1)
    q = np.concatenate([rgb, n, zdep[:, None], np.ones((M, 1))], axis=1)
    gq = np.concatenate([gCps, gNps, gDps[:, None], gWps[:, None]], axis=1)
    suffix = _segment_suffix(ewgt[:, None] * q, pptr, seg)
    inv1a = 1.0 / (1.0 - ealp)
    dal = np.sum(gq * (T[:, None] * q - suffix * inv1a[:, None]), axis=1)

    np.add.at(dcol_o, eidx, ewgt[:, None] * gCps)
    np.add.at(dnr_o, eidx, ewgt[:, None] * gNps)
    dt_total = ewgt * gDps * dirz

    unclamped = ealp < 0.999
    dG = np.where(unclamped, dal * ope, 0.0)
    np.add.at(dop_o, eidx, np.where(unclamped, dal * G, 0.0))
    du = -dG * G * u / sxe ** 2
    dv = -dG * G * v / sye ** 2
    np.add.at(dsx_o, eidx, dG * G * u * u / sxe ** 3)
    np.add.at(dsy_o, eidx, dG * G * v * v / sye ** 3)

    wt1 = np.sum(w * a1, axis=1)
    wt2 = np.sum(w * a2, axis=1)
    fnw = (du * wt1 + dv * wt2 + dt_total) / nw
    np.add.at(dcen, eidx,
              fnw[:, None] * n - du[:, None] * a1 - dv[:, None] * a2)
    np.add.at(dt1_o, eidx, du[:, None] * h)
    np.add.at(dt2_o, eidx, dv[:, None] * h)
    np.add.at(dnr_o, eidx, -fnw[:, None] * h)
    return dcen, dt1_o, dt2_o, dnr_o, dsx_o, dsy_o, dop_o, dcol_o
