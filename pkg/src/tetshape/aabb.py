"""Axis-aligned bounding-box tree over triangles with exact batched
closest-point queries.

The tree is a median split on face centroids along the longest axis.  Queries
run breadth-first over (query, node) pairs with lower-bound pruning against
the best distance found so far, so results equal a brute-force scan over all
triangles (up to ties in which realizing point is reported).
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from . import _kernels


def closest_point_on_triangles(p, a, b, c):
    """Closest points on triangles (a, b, c) to points p, all (M, 3).

    Vectorized region classification; degenerate triangles fall back to the
    nearest edge/vertex result produced by the guarded divisions.
    """
    ab = b - a
    ac = c - a
    ap = p - a

    def dot(u, v):
        return np.einsum("md,md->m", u, v)

    def safe_div(num, den):
        return np.where(den != 0.0, num / np.where(den == 0.0, 1.0, den), 0.0)

    d1 = dot(ab, ap)
    d2 = dot(ac, ap)
    bp = p - b
    d3 = dot(ab, bp)
    d4 = dot(ac, bp)
    cp = p - c
    d5 = dot(ab, cp)
    d6 = dot(ac, cp)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    out = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def assign(mask, value):
        nonlocal done
        m = mask & ~done
        if m.any():
            out[m] = value[m]
        done |= m

    assign((d1 <= 0) & (d2 <= 0), a)
    assign((d3 >= 0) & (d4 <= d3), b)
    assign((d6 >= 0) & (d5 <= d6), c)
    v_ab = safe_div(d1, d1 - d3)
    assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v_ab[:, None] * ab)
    w_ac = safe_div(d2, d2 - d6)
    assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w_ac[:, None] * ac)
    w_bc = safe_div(d4 - d3, (d4 - d3) + (d5 - d6))
    assign(
        (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0),
        b + w_bc[:, None] * (c - b),
    )
    denom = va + vb + vc
    v = safe_div(vb, denom)
    w = safe_div(vc, denom)
    assign(np.ones(len(p), dtype=bool), a + v[:, None] * ab + w[:, None] * ac)
    return out


def _aabb_sq_distance(points, lo, hi):
    d = np.maximum(np.maximum(lo - points, points - hi), 0.0)
    return np.einsum("md,md->m", d, d)


class AabbTree:
    def __init__(self, vertices, faces, leaf_size: int = 8):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(faces, dtype=np.int64)
        if len(self.faces) == 0:
            raise ValueError("cannot build a bounding-volume tree over an empty mesh")
        tri = self.vertices[self.faces]                   # (F, 3, 3)
        self._tri_a = tri[:, 0]
        self._tri_b = tri[:, 1]
        self._tri_c = tri[:, 2]
        centroids = tri.mean(axis=1)
        self._centroid_tree = cKDTree(centroids)
        f_lo = tri.min(axis=1)
        f_hi = tri.max(axis=1)

        order = np.arange(len(self.faces))
        node_lo, node_hi, node_left, node_right = [], [], [], []
        node_start, node_count = [], []
        # (start, count, node_index) work stack; children patched in afterwards
        stack = [(0, len(order), 0)]
        next_free = 1
        node_lo.append(None); node_hi.append(None)
        node_left.append(-1); node_right.append(-1)
        node_start.append(0); node_count.append(0)
        while stack:
            start, count, ni = stack.pop()
            seg = order[start : start + count]
            node_lo[ni] = f_lo[seg].min(axis=0)
            node_hi[ni] = f_hi[seg].max(axis=0)
            if count <= leaf_size:
                node_left[ni] = -1
                node_right[ni] = -1
                node_start[ni] = start
                node_count[ni] = count
                continue
            cen = centroids[seg]
            axis = int(np.argmax(cen.max(axis=0) - cen.min(axis=0)))
            half = count // 2
            part = np.argpartition(cen[:, axis], half, kind="introselect")
            order[start : start + count] = seg[part]
            li, ri = next_free, next_free + 1
            next_free += 2
            for _ in range(2):
                node_lo.append(None); node_hi.append(None)
                node_left.append(-1); node_right.append(-1)
                node_start.append(0); node_count.append(0)
            node_left[ni] = li
            node_right[ni] = ri
            stack.append((start, half, li))
            stack.append((start + half, count - half, ri))

        self.face_order = order
        self.node_lo = np.asarray(node_lo)
        self.node_hi = np.asarray(node_hi)
        self.node_left = np.asarray(node_left, dtype=np.int64)
        self.node_right = np.asarray(node_right, dtype=np.int64)
        self.node_start = np.asarray(node_start, dtype=np.int64)
        self.node_count = np.asarray(node_count, dtype=np.int64)
        # triangles permuted into leaf order for the jitted traversal
        self._leaf_a = np.ascontiguousarray(self._tri_a[order])
        self._leaf_b = np.ascontiguousarray(self._tri_b[order])
        self._leaf_c = np.ascontiguousarray(self._tri_c[order])

    def closest_points(self, points):
        """Exact closest points on the mesh.

        Returns (closest (Q, 3), distance (Q,), face (Q,)).
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if _kernels.HAVE_NUMBA:
            pts, d2, face = _kernels.bvh_closest(
                np.ascontiguousarray(points),
                self.node_lo, self.node_hi, self.node_left, self.node_right,
                self.node_start, self.node_count,
                self._leaf_a, self._leaf_b, self._leaf_c, self.face_order,
            )
            return pts, np.sqrt(d2), face
        return self._closest_points_numpy(points)

    def _closest_points_numpy(self, points):
        Q = len(points)
        # seed the upper bound with the face under the nearest centroid
        _, seed_face = self._centroid_tree.query(points)
        best_point = closest_point_on_triangles(
            points, self._tri_a[seed_face], self._tri_b[seed_face], self._tri_c[seed_face]
        )
        diff = points - best_point
        best_d2 = np.einsum("md,md->m", diff, diff)
        best_face = seed_face.astype(np.int64)

        qi = np.arange(Q)
        ni = np.zeros(Q, dtype=np.int64)
        while len(qi):
            lb = _aabb_sq_distance(points[qi], self.node_lo[ni], self.node_hi[ni])
            keep = lb <= best_d2[qi]
            qi, ni = qi[keep], ni[keep]
            if not len(qi):
                break
            is_leaf = self.node_left[ni] == -1
            lq, ln = qi[is_leaf], ni[is_leaf]
            if len(lq):
                counts = self.node_count[ln]
                starts = self.node_start[ln]
                cq = np.repeat(lq, counts)
                pos = np.concatenate([np.arange(s, s + c) for s, c in zip(starts, counts)])
                cf = self.face_order[pos]
                cand = closest_point_on_triangles(
                    points[cq], self._tri_a[cf], self._tri_b[cf], self._tri_c[cf]
                )
                d = points[cq] - cand
                d2 = np.einsum("md,md->m", d, d)
                # first strictly-better candidate per query, in (query, d2) order
                sel = np.lexsort((d2, cq))
                cq_s, d2_s = cq[sel], d2[sel]
                first = np.concatenate(([True], cq_s[1:] != cq_s[:-1]))
                cq_f = cq_s[first]
                d2_f = d2_s[first]
                better = d2_f < best_d2[cq_f]
                upd = sel[np.flatnonzero(first)[better]]
                best_d2[cq[upd]] = d2[upd]
                best_face[cq[upd]] = cf[upd]
                best_point[cq[upd]] = cand[upd]
            iq, innode = qi[~is_leaf], ni[~is_leaf]
            qi = np.concatenate([iq, iq])
            ni = np.concatenate([self.node_left[innode], self.node_right[innode]])
        return best_point, np.sqrt(best_d2), best_face

    def closest_points_brute(self, points):
        """Reference scan over every triangle (the oracle for the tree)."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        F = len(self.faces)
        best_d2 = np.full(len(points), np.inf)
        best_point = np.zeros_like(points)
        best_face = np.zeros(len(points), dtype=np.int64)
        chunk = max(1, int(2e6) // max(F, 1))
        for s in range(0, len(points), chunk):
            p = points[s : s + chunk]
            M = len(p)
            pp = np.repeat(p, F, axis=0)
            ta = np.tile(self._tri_a, (M, 1))
            tb = np.tile(self._tri_b, (M, 1))
            tc = np.tile(self._tri_c, (M, 1))
            cand = closest_point_on_triangles(pp, ta, tb, tc)
            d2 = np.einsum("md,md->m", pp - cand, pp - cand).reshape(M, F)
            fi = np.argmin(d2, axis=1)
            rows = np.arange(M)
            best_d2[s : s + chunk] = d2[rows, fi]
            best_point[s : s + chunk] = cand.reshape(M, F, 3)[rows, fi]
            best_face[s : s + chunk] = fi
        return best_point, np.sqrt(best_d2), best_face
