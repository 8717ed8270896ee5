"""Compiled inner loops for the mesh energy and the rasterizer.

Loops run serially in index order so every reduction has a fixed order and
results are reproducible bit for bit.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def _inv3(m, out):
    """Write the inverse of 3x3 ``m`` into ``out``; return the determinant."""
    a, b, c = m[0, 0], m[0, 1], m[0, 2]
    d, e, f = m[1, 0], m[1, 1], m[1, 2]
    g, h, i = m[2, 0], m[2, 1], m[2, 2]
    c00 = e * i - f * h
    c10 = f * g - d * i
    c20 = d * h - e * g
    det = a * c00 + b * c10 + c * c20
    if det == 0.0:
        return 0.0
    r = 1.0 / det
    out[0, 0] = c00 * r
    out[0, 1] = (c * h - b * i) * r
    out[0, 2] = (b * f - c * e) * r
    out[1, 0] = c10 * r
    out[1, 1] = (a * i - c * g) * r
    out[1, 2] = (c * d - a * f) * r
    out[2, 0] = c20 * r
    out[2, 1] = (b * g - a * h) * r
    out[2, 2] = (a * e - b * d) * r
    return det


@njit(cache=True)
def edge_inverses(x, tets):
    """Inverse edge matrices ``(D, 3, 3)`` and determinants of the edge matrices."""
    n_tets = tets.shape[0]
    out = np.empty((n_tets, 3, 3))
    dets = np.empty(n_tets)
    e = np.empty((3, 3))
    for t in range(n_tets):
        v0 = tets[t, 0]
        for j in range(3):
            vj = tets[t, j + 1]
            for r in range(3):
                e[r, j] = x[vj, r] - x[v0, r]
        dets[t] = _inv3(e, out[t])
    return out, dets


@njit(cache=True)
def energy(x, tets, anchor_inv, ref_vol, want_grad, grad):
    """Deformation energy; fills ``grad`` (zeroed here) when ``want_grad``.

    Returns ``inf`` as soon as a tetrahedron has ``det J <= 0``.
    """
    if want_grad:
        grad[:, :] = 0.0
    e = np.empty((3, 3))
    jac = np.empty((3, 3))
    inv = np.empty((3, 3))
    dfdj = np.empty((3, 3))
    total = 0.0
    for t in range(tets.shape[0]):
        v0 = tets[t, 0]
        for j in range(3):
            vj = tets[t, j + 1]
            for r in range(3):
                e[r, j] = x[vj, r] - x[v0, r]
        a = anchor_inv[t]
        for r in range(3):
            for s in range(3):
                jac[r, s] = e[r, 0] * a[0, s] + e[r, 1] * a[1, s] + e[r, 2] * a[2, s]
        det = _inv3(jac, inv)
        if not det > 0.0:
            return np.inf
        c = np.cbrt(det) ** 2
        fro = 0.0
        fro_inv = 0.0
        for r in range(3):
            for s in range(3):
                fro += jac[r, s] * jac[r, s]
                fro_inv += inv[r, s] * inv[r, s]
        f = (fro / c + fro_inv * c) / 6.0 - 1.0 + (det + 1.0 / det - 2.0) / 2.0
        # the shape term is >= 0 analytically; clip round-off below zero
        total += ref_vol[t] * max(f, 0.0)
        if not want_grad:
            continue
        coef = (-(2.0 / 3.0) * fro / c + (2.0 / 3.0) * fro_inv * c) / 6.0 + 0.5 * (det - 1.0 / det)
        # dfdj = V [ (J / c - c J^-T J^-1 J^-T) / 3 + coef J^-T ]
        for r in range(3):
            for s in range(3):
                # (J^-T J^-1 J^-T)[r, s] = sum_p sum_q inv[p, r] inv[p, q] inv[s, q]
                acc = 0.0
                for p in range(3):
                    row = 0.0
                    for q in range(3):
                        row += inv[p, q] * inv[s, q]
                    acc += inv[p, r] * row
                dfdj[r, s] = ref_vol[t] * ((jac[r, s] / c - c * acc) / 3.0 + coef * inv[s, r])
        # derivative w.r.t. edge column j is (dfdj A^-T)[:, j]
        for j in range(3):
            vj = tets[t, j + 1]
            for r in range(3):
                gr = dfdj[r, 0] * a[j, 0] + dfdj[r, 1] * a[j, 1] + dfdj[r, 2] * a[j, 2]
                grad[vj, r] += gr
                grad[v0, r] -= gr
    return total


@njit(cache=True)
def _bary(p, x0, tinv, out):
    r0 = p[0] - x0[0]
    r1 = p[1] - x0[1]
    r2 = p[2] - x0[2]
    lo = 1.0
    s = 0.0
    for j in range(3):
        lam = tinv[j, 0] * r0 + tinv[j, 1] * r1 + tinv[j, 2] * r2
        out[j + 1] = lam
        s += lam
    out[0] = 1.0 - s
    for j in range(4):
        if out[j] < lo:
            lo = out[j]
    return lo


@njit(cache=True)
def relocate(points, x, tets, tinv, owner, ring_ptr, ring_idx, tol, bary):
    """Update ``owner``/``bary`` in place from the previous owners.

    A voxel strictly inside its previous tetrahedron keeps it. Otherwise the
    tetrahedra sharing a node with the previous one are tried and the lowest
    index containing the voxel wins. Voxels left unresolved get owner ``-2``.
    """
    b = np.empty(4)
    for i in range(points.shape[0]):
        o = owner[i]
        if o < 0:
            owner[i] = -2
            continue
        lo = _bary(points[i], x[tets[o, 0]], tinv[o], b)
        if lo > tol:
            for j in range(4):
                bary[i, j] = b[j]
            continue
        best = -2
        for q in range(ring_ptr[o], ring_ptr[o + 1]):
            t = ring_idx[q]
            lo = _bary(points[i], x[tets[t, 0]], tinv[t], b)
            if lo >= -tol:
                best = t
                for j in range(4):
                    bary[i, j] = b[j]
                break  # ring lists are sorted, the first hit is the lowest index
        owner[i] = best


@njit(cache=True)
def interpolate(owner, bary, tets, alphas, out):
    """Barycentric priors; uncovered voxels get pure background."""
    n_ch = alphas.shape[1]
    for i in range(owner.shape[0]):
        o = owner[i]
        if o < 0:
            out[i, 0] = 1.0
            for k in range(1, n_ch):
                out[i, k] = 0.0
            continue
        for k in range(n_ch):
            v = 0.0
            for j in range(4):
                v += bary[i, j] * alphas[tets[o, j], k]
            out[i, k] = v


@njit(cache=True)
def contract(weights, owner, bary, tets, tinv, alphas, grad):
    """``grad`` (zeroed here) of ``sum_i weights[i] . priors[i]`` w.r.t. nodes."""
    grad[:, :] = 0.0
    n_ch = alphas.shape[1]
    g = np.empty((4, 3))
    aw = np.empty(4)
    for i in range(owner.shape[0]):
        o = owner[i]
        if o < 0:
            continue
        # spatial gradients of the barycentric coordinates
        for c in range(3):
            g[0, c] = -(tinv[o, 0, c] + tinv[o, 1, c] + tinv[o, 2, c])
            for j in range(3):
                g[j + 1, c] = tinv[o, j, c]
        for j in range(4):
            v = 0.0
            n = tets[o, j]
            for k in range(n_ch):
                v += weights[i, k] * alphas[n, k]
            aw[j] = v
        for c in range(3):
            s = aw[0] * g[0, c] + aw[1] * g[1, c] + aw[2] * g[2, c] + aw[3] * g[3, c]
            for j in range(4):
                grad[tets[o, j], c] -= bary[i, j] * s
