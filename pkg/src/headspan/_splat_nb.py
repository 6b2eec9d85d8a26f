"""Numba lane of the surfel compositing kernels.

Geometry and guard constants must stay in lockstep with ``_splat_np``:
a ray misses when |n.w| < 1e-9, when the hit parameter t < 1e-9, when
the elliptical radius^2 exceeds 9 (3 sigma), or when alpha < 1e-14;
alpha is clamped at 0.999. Per-pixel depth is camera-space z = t / L
where L is the length of the camera-space pixel vector (a, b, 1).
"""

import numpy as np
from numba import njit


@njit(cache=True)
def composite_forward(H, W, fx, fy, cx, cy, Rcw, ox, oy, oz,
                      cen, t1, t2, nr, sx, sy, opac, col,
                      order, bbox, stop_T, want_tape, cap):
    HW = H * W
    cacc = np.zeros((HW, 3), np.float64)
    nacc = np.zeros((HW, 3), np.float64)
    dacc = np.zeros(HW, np.float64)
    Wimg = np.zeros(HW, np.float64)
    Timg = np.ones(HW, np.float64)
    tpx = np.empty(cap, np.int64)
    tidx = np.empty(cap, np.int32)
    talp = np.empty(cap, np.float64)
    twgt = np.empty(cap, np.float64)
    m = 0
    for oi in range(order.shape[0]):
        j = order[oi]
        x0 = bbox[j, 0]
        x1 = bbox[j, 1]
        y0 = bbox[j, 2]
        y1 = bbox[j, 3]
        if x0 >= x1 or y0 >= y1:
            continue
        cjx = cen[j, 0]
        cjy = cen[j, 1]
        cjz = cen[j, 2]
        t1x = t1[j, 0]
        t1y = t1[j, 1]
        t1z = t1[j, 2]
        t2x = t2[j, 0]
        t2y = t2[j, 1]
        t2z = t2[j, 2]
        nx = nr[j, 0]
        ny = nr[j, 1]
        nz = nr[j, 2]
        sxj = sx[j]
        syj = sy[j]
        opj = opac[j]
        c0 = col[j, 0]
        c1 = col[j, 1]
        c2 = col[j, 2]
        pcx = cjx - ox
        pcy = cjy - oy
        pcz = cjz - oz
        ndotpc = nx * pcx + ny * pcy + nz * pcz
        for iy in range(y0, y1):
            rowbase = iy * W
            b = (iy + 0.5 - cy) / fy
            for ix in range(x0, x1):
                px = rowbase + ix
                T = Timg[px]
                if T < stop_T:
                    continue
                a = (ix + 0.5 - cx) / fx
                L = np.sqrt(a * a + b * b + 1.0)
                wx = (Rcw[0, 0] * a + Rcw[0, 1] * b + Rcw[0, 2]) / L
                wy = (Rcw[1, 0] * a + Rcw[1, 1] * b + Rcw[1, 2]) / L
                wz = (Rcw[2, 0] * a + Rcw[2, 1] * b + Rcw[2, 2]) / L
                nw = nx * wx + ny * wy + nz * wz
                if abs(nw) < 1e-9:
                    continue
                t = ndotpc / nw
                if t < 1e-9:
                    continue
                hx = ox + t * wx - cjx
                hy = oy + t * wy - cjy
                hz = oz + t * wz - cjz
                u = hx * t1x + hy * t1y + hz * t1z
                v = hx * t2x + hy * t2y + hz * t2z
                ru = u / sxj
                rv = v / syj
                r2 = ru * ru + rv * rv
                if r2 > 9.0:
                    continue
                G = np.exp(-0.5 * r2)
                al = opj * G
                if al > 0.999:
                    al = 0.999
                if al < 1e-14:
                    continue
                wgt = T * al
                cacc[px, 0] += wgt * c0
                cacc[px, 1] += wgt * c1
                cacc[px, 2] += wgt * c2
                nacc[px, 0] += wgt * nx
                nacc[px, 1] += wgt * ny
                nacc[px, 2] += wgt * nz
                dacc[px] += wgt * (t / L)
                Wimg[px] += wgt
                Timg[px] = T * (1.0 - al)
                if want_tape:
                    tpx[m] = px
                    tidx[m] = j
                    talp[m] = al
                    twgt[m] = wgt
                    m += 1
    return cacc, nacc, dacc, Wimg, tpx[:m], tidx[:m], talp[:m], twgt[:m]


@njit(cache=True)
def composite_backward(H, W, fx, fy, cx, cy, Rcw, ox, oy, oz,
                       cen, t1, t2, nr, sx, sy, opac, col,
                       pptr, eidx, ealp, ewgt,
                       gC, gAN, gAD, gW):
    N = cen.shape[0]
    dcen = np.zeros((N, 3), np.float64)
    dt1 = np.zeros((N, 3), np.float64)
    dt2 = np.zeros((N, 3), np.float64)
    dnr = np.zeros((N, 3), np.float64)
    dsx = np.zeros(N, np.float64)
    dsy = np.zeros(N, np.float64)
    dop = np.zeros(N, np.float64)
    dcol = np.zeros((N, 3), np.float64)
    HW = H * W
    for px in range(HW):
        s = pptr[px]
        e = pptr[px + 1]
        if e == s:
            continue
        gC0 = gC[px, 0]
        gC1 = gC[px, 1]
        gC2 = gC[px, 2]
        gN0 = gAN[px, 0]
        gN1 = gAN[px, 1]
        gN2 = gAN[px, 2]
        gD = gAD[px]
        gWp = gW[px]
        if (gC0 == 0.0 and gC1 == 0.0 and gC2 == 0.0 and gN0 == 0.0
                and gN1 == 0.0 and gN2 == 0.0 and gD == 0.0 and gWp == 0.0):
            continue
        iy = px // W
        ix = px % W
        a = (ix + 0.5 - cx) / fx
        b = (iy + 0.5 - cy) / fy
        L = np.sqrt(a * a + b * b + 1.0)
        wx = (Rcw[0, 0] * a + Rcw[0, 1] * b + Rcw[0, 2]) / L
        wy = (Rcw[1, 0] * a + Rcw[1, 1] * b + Rcw[1, 2]) / L
        wz = (Rcw[2, 0] * a + Rcw[2, 1] * b + Rcw[2, 2]) / L
        dirz = 1.0 / L
        SC0 = 0.0
        SC1 = 0.0
        SC2 = 0.0
        SN0 = 0.0
        SN1 = 0.0
        SN2 = 0.0
        SD = 0.0
        SW = 0.0
        for k in range(e - 1, s - 1, -1):
            j = eidx[k]
            al = ealp[k]
            wgt = ewgt[k]
            T = wgt / al
            cjx = cen[j, 0]
            cjy = cen[j, 1]
            cjz = cen[j, 2]
            t1x = t1[j, 0]
            t1y = t1[j, 1]
            t1z = t1[j, 2]
            t2x = t2[j, 0]
            t2y = t2[j, 1]
            t2z = t2[j, 2]
            nx = nr[j, 0]
            ny = nr[j, 1]
            nz = nr[j, 2]
            sxj = sx[j]
            syj = sy[j]
            opj = opac[j]
            c0 = col[j, 0]
            c1 = col[j, 1]
            c2 = col[j, 2]
            nw = nx * wx + ny * wy + nz * wz
            t = (nx * (cjx - ox) + ny * (cjy - oy) + nz * (cjz - oz)) / nw
            hx = ox + t * wx - cjx
            hy = oy + t * wy - cjy
            hz = oz + t * wz - cjz
            u = hx * t1x + hy * t1y + hz * t1z
            v = hx * t2x + hy * t2y + hz * t2z
            ru = u / sxj
            rv = v / syj
            G = np.exp(-0.5 * (ru * ru + rv * rv))
            zdep = t * dirz

            # direct contribution weights
            dcol[j, 0] += wgt * gC0
            dcol[j, 1] += wgt * gC1
            dcol[j, 2] += wgt * gC2
            dnr[j, 0] += wgt * gN0
            dnr[j, 1] += wgt * gN1
            dnr[j, 2] += wgt * gN2
            dt_total = wgt * gD * dirz

            # alpha gradient through the compositing chain
            inv1a = 1.0 / (1.0 - al)
            dal = (gC0 * (T * c0 - SC0 * inv1a)
                   + gC1 * (T * c1 - SC1 * inv1a)
                   + gC2 * (T * c2 - SC2 * inv1a)
                   + gN0 * (T * nx - SN0 * inv1a)
                   + gN1 * (T * ny - SN1 * inv1a)
                   + gN2 * (T * nz - SN2 * inv1a)
                   + gD * (T * zdep - SD * inv1a)
                   + gWp * (T - SW * inv1a))
            SC0 += wgt * c0
            SC1 += wgt * c1
            SC2 += wgt * c2
            SN0 += wgt * nx
            SN1 += wgt * ny
            SN2 += wgt * nz
            SD += wgt * zdep
            SW += wgt

            if al < 0.999:
                dG = dal * opj
                dop[j] += dal * G
            else:
                dG = 0.0
            du = -dG * G * u / (sxj * sxj)
            dv = -dG * G * v / (syj * syj)
            dsx[j] += dG * G * u * u / (sxj * sxj * sxj)
            dsy[j] += dG * G * v * v / (syj * syj * syj)

            wt1 = wx * t1x + wy * t1y + wz * t1z
            wt2 = wx * t2x + wy * t2y + wz * t2z
            fnw = (du * wt1 + dv * wt2 + dt_total) / nw
            dcen[j, 0] += fnw * nx - du * t1x - dv * t2x
            dcen[j, 1] += fnw * ny - du * t1y - dv * t2y
            dcen[j, 2] += fnw * nz - du * t1z - dv * t2z
            dt1[j, 0] += du * hx
            dt1[j, 1] += du * hy
            dt1[j, 2] += du * hz
            dt2[j, 0] += dv * hx
            dt2[j, 1] += dv * hy
            dt2[j, 2] += dv * hz
            dnr[j, 0] -= fnw * hx
            dnr[j, 1] -= fnw * hy
            dnr[j, 2] -= fnw * hz
    return dcen, dt1, dt2, dnr, dsx, dsy, dop, dcol
