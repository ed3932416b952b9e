"""JIT-compiled hot loops for field encoding.

Winding numbers and closest-point queries dominate dataset preparation, so
both have numba kernels; callers fall back to the vectorized numpy paths when
numba is unavailable.  Per-query work is sequential, so results do not depend
on the thread count.
"""

from __future__ import annotations

import warnings

import numpy as np

try:
    import numba

    # harmless on hosts whose TBB is too old for the parallel layer
    warnings.filterwarnings(
        "ignore", message=".*TBB.*", category=numba.NumbaWarning
    )
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    HAVE_NUMBA = False


if HAVE_NUMBA:

    @numba.njit(parallel=True, fastmath=False)
    def winding_sum(points, t0, t1, t2):
        Q = points.shape[0]
        F = t0.shape[0]
        out = np.empty(Q)
        for q in numba.prange(Q):
            px, py, pz = points[q, 0], points[q, 1], points[q, 2]
            acc = 0.0
            for f in range(F):
                ax = t0[f, 0] - px; ay = t0[f, 1] - py; az = t0[f, 2] - pz
                bx = t1[f, 0] - px; by = t1[f, 1] - py; bz = t1[f, 2] - pz
                cx = t2[f, 0] - px; cy = t2[f, 1] - py; cz = t2[f, 2] - pz
                la = np.sqrt(ax * ax + ay * ay + az * az)
                lb = np.sqrt(bx * bx + by * by + bz * bz)
                lc = np.sqrt(cx * cx + cy * cy + cz * cz)
                det = (
                    ax * (by * cz - bz * cy)
                    + ay * (bz * cx - bx * cz)
                    + az * (bx * cy - by * cx)
                )
                den = (
                    la * lb * lc
                    + (ax * bx + ay * by + az * bz) * lc
                    + (bx * cx + by * cy + bz * cz) * la
                    + (cx * ax + cy * ay + cz * az) * lb
                )
                acc += np.arctan2(det, den)
            out[q] = acc
        return out

    @numba.njit(inline="always")
    def _tri_closest(px, py, pz, ax, ay, az, bx, by, bz, cx, cy, cz):
        abx, aby, abz = bx - ax, by - ay, bz - az
        acx, acy, acz = cx - ax, cy - ay, cz - az
        apx, apy, apz = px - ax, py - ay, pz - az
        d1 = abx * apx + aby * apy + abz * apz
        d2 = acx * apx + acy * apy + acz * apz
        if d1 <= 0.0 and d2 <= 0.0:
            return ax, ay, az
        bpx, bpy, bpz = px - bx, py - by, pz - bz
        d3 = abx * bpx + aby * bpy + abz * bpz
        d4 = acx * bpx + acy * bpy + acz * bpz
        if d3 >= 0.0 and d4 <= d3:
            return bx, by, bz
        vc = d1 * d4 - d3 * d2
        if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
            den = d1 - d3
            v = d1 / den if den != 0.0 else 0.0
            return ax + v * abx, ay + v * aby, az + v * abz
        cpx, cpy, cpz = px - cx, py - cy, pz - cz
        d5 = abx * cpx + aby * cpy + abz * cpz
        d6 = acx * cpx + acy * cpy + acz * cpz
        if d6 >= 0.0 and d5 <= d6:
            return cx, cy, cz
        vb = d5 * d2 - d1 * d6
        if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
            den = d2 - d6
            w = d2 / den if den != 0.0 else 0.0
            return ax + w * acx, ay + w * acy, az + w * acz
        va = d3 * d6 - d5 * d4
        if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
            den = (d4 - d3) + (d5 - d6)
            w = (d4 - d3) / den if den != 0.0 else 0.0
            return bx + w * (cx - bx), by + w * (cy - by), bz + w * (cz - bz)
        den = va + vb + vc
        if den != 0.0:
            v = vb / den
            w = vc / den
        else:
            v = 0.0
            w = 0.0
        return (
            ax + v * abx + w * acx,
            ay + v * aby + w * acy,
            az + v * abz + w * acz,
        )

    @numba.njit(parallel=True, fastmath=False)
    def bvh_closest(points, node_lo, node_hi, node_left, node_right,
                    node_start, node_count, t0, t1, t2, face_ids):
        Q = points.shape[0]
        out_p = np.empty((Q, 3))
        out_d2 = np.empty(Q)
        out_f = np.empty(Q, dtype=np.int64)
        for q in numba.prange(Q):
            px, py, pz = points[q, 0], points[q, 1], points[q, 2]
            best = np.inf
            bfx = np.int64(-1)
            bx = by = bz = 0.0
            stack = np.empty(128, dtype=np.int64)
            stack[0] = 0
            sp = 1
            while sp > 0:
                sp -= 1
                ni = stack[sp]
                dx = max(max(node_lo[ni, 0] - px, px - node_hi[ni, 0]), 0.0)
                dy = max(max(node_lo[ni, 1] - py, py - node_hi[ni, 1]), 0.0)
                dz = max(max(node_lo[ni, 2] - pz, pz - node_hi[ni, 2]), 0.0)
                if dx * dx + dy * dy + dz * dz > best:
                    continue
                if node_left[ni] == -1:
                    s = node_start[ni]
                    for i in range(s, s + node_count[ni]):
                        qx, qy, qz = _tri_closest(
                            px, py, pz,
                            t0[i, 0], t0[i, 1], t0[i, 2],
                            t1[i, 0], t1[i, 1], t1[i, 2],
                            t2[i, 0], t2[i, 1], t2[i, 2],
                        )
                        ddx, ddy, ddz = px - qx, py - qy, pz - qz
                        d2 = ddx * ddx + ddy * ddy + ddz * ddz
                        if d2 < best:
                            best = d2
                            bfx = face_ids[i]
                            bx, by, bz = qx, qy, qz
                else:
                    li = node_left[ni]
                    ri = node_right[ni]
                    # visit the nearer child first (it is popped last-in)
                    lx = max(max(node_lo[li, 0] - px, px - node_hi[li, 0]), 0.0)
                    ly = max(max(node_lo[li, 1] - py, py - node_hi[li, 1]), 0.0)
                    lz = max(max(node_lo[li, 2] - pz, pz - node_hi[li, 2]), 0.0)
                    rx = max(max(node_lo[ri, 0] - px, px - node_hi[ri, 0]), 0.0)
                    ry = max(max(node_lo[ri, 1] - py, py - node_hi[ri, 1]), 0.0)
                    rz = max(max(node_lo[ri, 2] - pz, pz - node_hi[ri, 2]), 0.0)
                    dl = lx * lx + ly * ly + lz * lz
                    dr = rx * rx + ry * ry + rz * rz
                    if dl <= dr:
                        stack[sp] = ri; sp += 1
                        stack[sp] = li; sp += 1
                    else:
                        stack[sp] = li; sp += 1
                        stack[sp] = ri; sp += 1
            out_p[q, 0] = bx
            out_p[q, 1] = by
            out_p[q, 2] = bz
            out_d2[q] = best
            out_f[q] = bfx
        return out_p, out_d2, out_f
