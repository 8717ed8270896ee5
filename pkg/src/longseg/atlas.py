"""Tetrahedral-mesh probabilistic atlas.

Node positions are ``(M, 3)`` float arrays in voxel units; voxel ``(i, j, k)``
has its center at coordinate ``(i, j, k)``. Each node carries a probability
vector over ``K + 1`` channels (``K`` anatomical classes followed by a lesion
channel). Priors inside a tetrahedron are barycentric interpolations of the
node vectors.

Deformation energy per tetrahedron, with ``J`` the Jacobian of the affine map
taking the anchor tetrahedron onto the deformed one and ``V`` its volume in the
reference mesh::

    U = V * [ (|J|_F^2 det(J)^(-2/3) + |J^-1|_F^2 det(J)^(2/3)) / 6 - 1
              + (det(J) + 1/det(J) - 2) / 2 ]

and ``U = inf`` once ``det(J) <= 0``. The first bracket penalizes shape change
and treats ``J`` and ``J^-1`` alike, the second penalizes volume change; the
energy is therefore symmetric in (deformed, anchor).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import DegenerateMeshError, GradientUndefinedError, SpecError
from .volume import Volume

_INSIDE_TOL = 1e-12

# Five-tetrahedra split of a cube; corner c encodes (x, y, z) bits as x + 2y + 4z.
_EVEN_CELL = ((0, 1, 2, 4), (3, 1, 2, 7), (5, 1, 4, 7), (6, 2, 4, 7), (1, 2, 4, 7))
_ODD_CELL = ((1, 0, 3, 5), (2, 0, 3, 6), (4, 0, 5, 6), (7, 3, 5, 6), (0, 3, 5, 6))


def _edge_matrices(x, tets):
    """Columns are the three edges leaving vertex 0 of each tetrahedron."""
    x = np.asarray(x)
    t = x.T  # (3, M): gathers below come out as (3, D) rows
    out = np.empty((tets.shape[0], 3, 3))
    origin = t[:, tets[:, 0]]
    for j in range(3):
        out[:, :, j] = (t[:, tets[:, j + 1]] - origin).T
    return out


def _det3(m):
    return (m[:, 0, 0] * (m[:, 1, 1] * m[:, 2, 2] - m[:, 1, 2] * m[:, 2, 1])
            - m[:, 0, 1] * (m[:, 1, 0] * m[:, 2, 2] - m[:, 1, 2] * m[:, 2, 0])
            + m[:, 0, 2] * (m[:, 1, 0] * m[:, 2, 1] - m[:, 1, 1] * m[:, 2, 0]))


def tet_volumes(x, tets):
    """Signed tetrahedron volumes."""
    return _det3(_edge_matrices(np.asarray(x, float), np.asarray(tets))) / 6.0


@dataclass
class TetMeshAtlas:
    nodes_ref: np.ndarray
    tets: np.ndarray
    alphas: np.ndarray
    class_names: list = field(default_factory=list)
    lesion_channel: int = -1

    def __post_init__(self):
        self.nodes_ref = np.asarray(self.nodes_ref, dtype=np.float64)
        self.tets = np.asarray(self.tets, dtype=np.int64)
        self.alphas = np.asarray(self.alphas, dtype=np.float64)
        m = self.nodes_ref.shape[0]
        if self.nodes_ref.shape != (m, 3) or self.alphas.shape[0] != m:
            raise SpecError("nodes_ref must be (M, 3) and alphas must have M rows")
        if self.tets.ndim != 2 or self.tets.shape[1] != 4:
            raise SpecError("tets must be (D, 4)")
        if self.tets.min() < 0 or self.tets.max() >= m:
            raise SpecError("tetrahedron references a missing node")
        if np.any(self.alphas < 0) or np.any(np.abs(self.alphas.sum(axis=1) - 1) > 1e-9):
            raise SpecError("node probability vectors must be non-negative and sum to 1")
        if np.any(tet_volumes(self.nodes_ref, self.tets) <= 0):
            raise DegenerateMeshError("reference mesh has non-positive tetrahedra")
        if self.lesion_channel < 0:
            self.lesion_channel = self.alphas.shape[1] - 1
        if not self.class_names:
            self.class_names = [f"class{k}" for k in range(self.n_classes)]

    @property
    def n_nodes(self):
        return self.nodes_ref.shape[0]

    @property
    def n_channels(self):
        return self.alphas.shape[1]

    @property
    def n_classes(self):
        """Number of anatomical classes (channels minus the lesion channel)."""
        return self.alphas.shape[1] - 1

    def to_dict(self):
        return {
            "nodes_ref": self.nodes_ref.tolist(),
            "tets": self.tets.tolist(),
            "alphas": self.alphas.tolist(),
            "class_names": list(self.class_names),
            "lesion_channel": int(self.lesion_channel),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["nodes_ref"], d["tets"], d["alphas"], list(d.get("class_names", [])),
                   int(d.get("lesion_channel", -1)))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# ------------------------------------------------------------------ deformation prior


class DeformationPrior:
    """Deformation energy relative to a fixed anchor mesh.

    Caches the anchor edge inverses and reference volumes so that repeated
    evaluations during a line search only touch the deformed mesh.
    """

    def __init__(self, anchor, tets, nodes_ref):
        self.tets = np.ascontiguousarray(tets, dtype=np.int64)
        self.anchor = np.ascontiguousarray(anchor, dtype=np.float64)
        self.da_inv, det_a = _kernels.edge_inverses(self.anchor, self.tets)
        if np.any(~(det_a > 0)):
            raise DegenerateMeshError("anchor mesh has non-positive tetrahedra")
        self.ref_vol = np.abs(tet_volumes(nodes_ref, self.tets))
        self._scratch = np.empty((0, 3))

    def energy(self, x):
        x = np.ascontiguousarray(x, dtype=np.float64)
        return float(_kernels.energy(x, self.tets, self.da_inv, self.ref_vol, False, self._scratch))

    def energy_and_gradient(self, x):
        x = np.ascontiguousarray(x, dtype=np.float64)
        grad = np.empty_like(x)
        e = _kernels.energy(x, self.tets, self.da_inv, self.ref_vol, True, grad)
        if not np.isfinite(e):
            raise GradientUndefinedError("deformation energy is infinite (folded tetrahedron)")
        return float(e), grad


def deformation_energy(x, anchor, tets, nodes_ref):
    """Total deformation energy of ``x`` relative to ``anchor``; ``inf`` on folding."""
    return DeformationPrior(anchor, tets, nodes_ref).energy(x)


def deformation_energy_and_gradient(x, anchor, tets, nodes_ref):
    """Energy and its gradient with respect to ``x``.

    Raises GradientUndefinedError when the energy is infinite.
    """
    return DeformationPrior(anchor, tets, nodes_ref).energy_and_gradient(x)


def deformation_gradient(x, anchor, tets, nodes_ref):
    return deformation_energy_and_gradient(x, anchor, tets, nodes_ref)[1]


# --------------------------------------------------------------------- rasterization


def _vertex_rings(tets, n_nodes):
    """CSR lists of the tetrahedra sharing at least one node with each tetrahedron."""
    n_tets = tets.shape[0]
    flat = tets.ravel()
    order = np.argsort(flat, kind="stable")
    node_ptr = np.concatenate([[0], np.cumsum(np.bincount(flat, minlength=n_nodes))])
    node_tets = order // 4
    rings = []
    for t in range(n_tets):
        parts = [node_tets[node_ptr[v]:node_ptr[v + 1]] for v in tets[t]]
        rings.append(np.unique(np.concatenate(parts)))
    ptr = np.concatenate([[0], np.cumsum([r.size for r in rings])]).astype(np.int64)
    return ptr, np.concatenate(rings).astype(np.int64)


class Rasterizer:
    """Voxelwise priors of an atlas on a fixed image grid.

    Keeps the containing tetrahedron of every voxel between calls; voxels that
    stay strictly inside their previous tetrahedron are not searched again.
    Voxels on shared faces go to the lowest-index tetrahedron containing them.
    """

    def __init__(self, atlas: TetMeshAtlas, dims):
        self.atlas = atlas
        self.dims = tuple(int(n) for n in dims)
        nx, ny, nz = self.dims
        gx, gy, gz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
        self.points = np.stack([gx.ravel(order="F"), gy.ravel(order="F"), gz.ravel(order="F")],
                               axis=1).astype(np.float64)
        self._owner = None
        self._ring_ptr, self._ring_idx = _vertex_rings(atlas.tets, atlas.n_nodes)

    @property
    def n_voxels(self):
        return self.points.shape[0]

    def _geometry(self, x):
        tets = self.atlas.tets
        tinv, det = _kernels.edge_inverses(x, tets)
        if np.any(~(det > 0)):
            bad = int(np.flatnonzero(~(det > 0))[0])
            raise DegenerateMeshError(f"tetrahedron {bad} is flipped or flat")
        return x[tets[:, 0]], tinv

    @staticmethod
    def _bary(points, origin, tinv):
        r = points - origin
        lam = (tinv[:, :, 0] * r[:, :1] + tinv[:, :, 1] * r[:, 1:2]) + tinv[:, :, 2] * r[:, 2:]
        return np.concatenate([1.0 - lam.sum(axis=1, keepdims=True), lam], axis=1)

    def _search(self, idx, x, origin, tinv):
        """Assign the lowest-index containing tetrahedron to voxels ``idx``.

        Candidates come from a bucket grid over tetrahedron bounding boxes.
        """
        tets = self.atlas.tets
        corners = x[tets]
        lo = corners.min(axis=1) - 1e-9
        hi = corners.max(axis=1) + 1e-9
        size = max(2.0, float(np.median(hi - lo)))
        base = lo.min(axis=0)
        blo = np.floor((lo - base) / size).astype(np.int64)
        bhi = np.floor((hi - base) / size).astype(np.int64)
        nb = bhi.max(axis=0) + 1
        # (bucket, tet) pairs for every bucket overlapped by each bounding box
        ext = bhi - blo + 1
        counts = ext.prod(axis=1)
        tet_of = np.repeat(np.arange(tets.shape[0]), counts)
        local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        ex, ey = ext[tet_of, 0], ext[tet_of, 1]
        bx = blo[tet_of, 0] + local % ex
        by = blo[tet_of, 1] + (local // ex) % ey
        bz = blo[tet_of, 2] + local // (ex * ey)
        bucket = bx + nb[0] * (by + nb[1] * bz)
        order = np.lexsort((tet_of, bucket))
        bucket, tet_of = bucket[order], tet_of[order]

        pts = self.points[idx]
        q = np.floor((pts - base) / size).astype(np.int64)
        valid = np.all((q >= 0) & (q < nb), axis=1)
        qb = np.where(valid, q[:, 0] + nb[0] * (q[:, 1] + nb[1] * q[:, 2]), -1)
        first = np.searchsorted(bucket, qb, side="left")
        last = np.searchsorted(bucket, qb, side="right")
        n_cand = np.where(valid, last - first, 0)
        vi = np.repeat(np.arange(idx.size), n_cand)
        offs = np.arange(n_cand.sum()) - np.repeat(np.cumsum(n_cand) - n_cand, n_cand)
        ti = tet_of[np.repeat(first, n_cand) + offs]
        b = self._bary(pts[vi], origin[ti], tinv[ti])
        inside = b.min(axis=1) >= -_INSIDE_TOL
        vi, ti = vi[inside], ti[inside]
        owner = np.full(idx.size, -1, dtype=np.int64)
        # pairs are ordered by tet within each voxel's bucket; keep the smallest
        best = np.full(idx.size, np.iinfo(np.int64).max)
        np.minimum.at(best, vi, ti)
        hit = best != np.iinfo(np.int64).max
        owner[hit] = best[hit]
        return owner

    def locate(self, x):
        """Return ``(owner, bary, tinv)``; ``owner`` is -1 for uncovered voxels."""
        x = np.ascontiguousarray(x, dtype=np.float64)
        origin, tinv = self._geometry(x)
        n = self.n_voxels
        if self._owner is None:
            owner = self._search(np.arange(n), x, origin, tinv)
            bary = np.zeros((n, 4))
            redo = np.flatnonzero(owner >= 0)
        else:
            owner = self._owner.copy()
            bary = np.zeros((n, 4))
            _kernels.relocate(self.points, x, self.atlas.tets, tinv, owner, self._ring_ptr,
                              self._ring_idx, _INSIDE_TOL, bary)
            redo = np.flatnonzero(owner == -2)
            if redo.size:
                owner[redo] = self._search(redo, x, origin, tinv)
                redo = redo[owner[redo] >= 0]
        if redo.size:
            bary[redo] = self._bary(self.points[redo], origin[owner[redo]], tinv[owner[redo]])
        self._owner = owner
        return owner, bary, tinv

    def priors(self, x, located=None):
        """``(n_voxels, K + 1)`` prior probabilities at node positions ``x``."""
        owner, bary, _ = located if located is not None else self.locate(x)
        out = np.empty((self.n_voxels, self.atlas.n_channels))
        _kernels.interpolate(owner, bary, self.atlas.tets, self.atlas.alphas, out)
        return out

    def contract_gradient(self, weights, located):
        """Gradient w.r.t. node positions of ``sum_i weights[i] . priors[i]``."""
        owner, bary, tinv = located
        grad = np.empty((self.atlas.n_nodes, 3))
        _kernels.contract(np.ascontiguousarray(weights, dtype=np.float64), owner, bary,
                          self.atlas.tets, tinv, self.atlas.alphas, grad)
        return grad


def rasterize_priors(atlas: TetMeshAtlas, x, dims, spacing=(1.0, 1.0, 1.0)) -> Volume:
    """Prior volume with ``K + 1`` channels for node positions ``x``."""
    r = Rasterizer(atlas, dims)
    p = r.priors(x)
    return Volume(p.reshape(tuple(dims) + (atlas.n_channels,), order="F"), spacing)


# ------------------------------------------------------------------------ grid atlases


def grid_mesh(dims, grid_step, margin=1.5):
    """Regular lattice over the image split into five tetrahedra per cell.

    The lattice spans ``[-margin, n - 1 + margin]`` along each axis with a cell
    size as close to ``grid_step`` as an integer cell count allows.
    """
    if grid_step < 2:
        raise SpecError("grid_step must be at least 2 voxels")
    axes = []
    for n in dims:
        span = (n - 1) + 2.0 * margin
        cells = max(1, int(round(span / grid_step)))
        axes.append(np.linspace(-margin, n - 1 + margin, cells + 1))
    shape = tuple(len(a) for a in axes)
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([gx.ravel(order="F"), gy.ravel(order="F"), gz.ravel(order="F")], axis=1)

    def nid(i, j, k):
        return i + shape[0] * (j + shape[1] * k)

    tets = []
    for k in range(shape[2] - 1):
        for j in range(shape[1] - 1):
            for i in range(shape[0] - 1):
                corner = [nid(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1)) for c in range(8)]
                pattern = _EVEN_CELL if (i + j + k) % 2 == 0 else _ODD_CELL
                tets.extend([corner[a] for a in t] for t in pattern)
    tets = np.array(tets, dtype=np.int64)
    neg = tet_volumes(nodes, tets) < 0
    tets[neg] = tets[neg][:, [1, 0, 2, 3]]
    return nodes, tets


def _finish_alphas(scores, lesion_baseline, wm_class):
    scores = np.asarray(scores, float)
    total = scores.sum(axis=1, keepdims=True)
    empty = total[:, 0] <= 0
    scores[empty] = 0.0
    scores[empty, 0] = 1.0
    probs = scores / scores.sum(axis=1, keepdims=True)
    lesion = np.zeros((probs.shape[0], 1))
    if lesion_baseline > 0:
        if wm_class is None:
            raise SpecError("a white-matter class is required for a lesion baseline")
        lesion[:, 0] = lesion_baseline * probs[:, wm_class]
        probs[:, wm_class] *= 1.0 - lesion_baseline
    alphas = np.concatenate([probs, lesion], axis=1)
    return alphas / alphas.sum(axis=1, keepdims=True)


def build_grid_atlas(dims, grid_step, class_blobs, lesion_baseline=0.0, wm_class=None,
                     margin=1.5) -> TetMeshAtlas:
    """Lattice atlas painted from Gaussian bumps.

    ``class_blobs`` is a list with one entry per anatomical class::

        {"name": "wm", "baseline": 0.0,
         "blobs": [{"center": [x, y, z], "sigma": s_or_xyz, "amplitude": 1.0}]}

    Node scores are ``baseline + sum(amplitude * gaussian)``, normalized over
    classes. A node where every score is zero is assigned to class 0. The lesion
    channel takes ``lesion_baseline`` of the white-matter probability.
    """
    if not class_blobs:
        raise SpecError("at least one class is required")
    nodes, tets = grid_mesh(dims, grid_step, margin)
    upper = np.asarray(dims, float) - 1
    scores = np.zeros((nodes.shape[0], len(class_blobs)))
    names = []
    for k, spec in enumerate(class_blobs):
        names.append(spec.get("name", f"class{k}"))
        scores[:, k] = float(spec.get("baseline", 0.0))
        for blob in spec.get("blobs", []):
            center = np.asarray(blob["center"], float)
            if center.shape != (3,) or np.any(center < 0) or np.any(center > upper):
                raise SpecError(f"blob center {blob['center']} lies outside the image domain")
            sigma = np.broadcast_to(np.asarray(blob.get("sigma", 1.0), float), (3,))
            if np.any(sigma <= 0):
                raise SpecError("blob sigma must be positive")
            z = (nodes - center) / sigma
            scores[:, k] += float(blob.get("amplitude", 1.0)) * np.exp(-0.5 * np.sum(z * z, axis=1))
    if np.any(scores < 0):
        raise SpecError("class scores must be non-negative")
    alphas = _finish_alphas(scores, lesion_baseline, wm_class)
    return TetMeshAtlas(nodes, tets, alphas, names + ["lesion"], len(class_blobs))


def atlas_from_labels(labels, n_classes, grid_step, sigma=1.5, floor=1e-3, lesion_baseline=0.0,
                      wm_class=None, class_names=None, margin=1.5) -> TetMeshAtlas:
    """Lattice atlas whose node probabilities are smoothed label fractions."""
    from scipy import ndimage

    labels = np.asarray(labels)
    nodes, tets = grid_mesh(labels.shape, grid_step, margin)
    coords = np.clip(nodes.T, 0, np.asarray(labels.shape, float)[:, None] - 1)
    scores = np.empty((nodes.shape[0], n_classes))
    for k in range(n_classes):
        smooth = ndimage.gaussian_filter((labels == k).astype(float), sigma, mode="nearest")
        scores[:, k] = ndimage.map_coordinates(smooth, coords, order=1, mode="nearest")
    scores = np.maximum(scores, 0.0) + floor
    alphas = _finish_alphas(scores, lesion_baseline, wm_class)
    names = list(class_names) if class_names else [f"class{k}" for k in range(n_classes)]
    return TetMeshAtlas(nodes, tets, alphas, names + ["lesion"], n_classes)
