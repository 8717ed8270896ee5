import numpy as np
import pytest

from longseg.atlas import (DeformationPrior, Rasterizer, TetMeshAtlas, build_grid_atlas, deformation_energy,
                           deformation_energy_and_gradient, deformation_gradient, grid_mesh, rasterize_priors)
from longseg.errors import DegenerateMeshError, GradientUndefinedError, SpecError


def single_tet_atlas(alphas):
    nodes = np.array([[0, 0, 0], [4, 0, 0], [0, 4, 0], [0, 0, 4]], float)
    return TetMeshAtlas(nodes, np.array([[0, 1, 2, 3]]), alphas)


def reference_energy(x, anchor, tets, ref):
    """Direct per-tetrahedron evaluation with numpy.linalg."""
    total = 0.0
    for t in tets:
        e = (x[t[1:]] - x[t[0]]).T
        a = (anchor[t[1:]] - anchor[t[0]]).T
        vol = np.linalg.det((ref[t[1:]] - ref[t[0]]).T) / 6.0
        j = e @ np.linalg.inv(a)
        d = np.linalg.det(j)
        if d <= 0:
            return np.inf
        ji = np.linalg.inv(j)
        shape = (np.sum(j * j) * d ** (-2 / 3) + np.sum(ji * ji) * d ** (2 / 3)) / 6.0 - 1.0
        total += vol * (shape + (d + 1 / d - 2) / 2)
    return total


@pytest.fixture(scope="module")
def small_mesh():
    nodes, tets = grid_mesh((8, 8, 8), 3.0)
    return nodes, tets


def perturbed(nodes, scale, seed):
    rng = np.random.default_rng(seed)
    return nodes + scale * rng.normal(size=nodes.shape)


# ---------------------------------------------------------------- interpolation


def test_constant_interpolation():
    atlas = single_tet_atlas(np.tile([1.0, 0.0], (4, 1)))
    pri = rasterize_priors(atlas, atlas.nodes_ref, (5, 5, 5)).data
    inside = np.array([[i, j, k] for i in range(5) for j in range(5) for k in range(5) if i + j + k <= 4])
    for i, j, k in inside:
        assert pri[i, j, k].tolist() == [1.0, 0.0]


def test_prior_at_node_and_centroid():
    alphas = np.eye(4)
    atlas = single_tet_atlas(alphas)
    pri = rasterize_priors(atlas, atlas.nodes_ref, (5, 5, 5)).data
    np.testing.assert_allclose(pri[4, 0, 0], alphas[1], atol=1e-12)
    np.testing.assert_allclose(pri[0, 0, 4], alphas[3], atol=1e-12)
    np.testing.assert_allclose(pri[1, 1, 1], [0.25] * 4, atol=1e-12)


def test_uncovered_voxels_are_background():
    atlas = single_tet_atlas(np.tile([0.0, 1.0], (4, 1)))
    pri = rasterize_priors(atlas, atlas.nodes_ref, (5, 5, 5)).data
    assert pri[4, 4, 4].tolist() == [1.0, 0.0]


def test_one_class_atlas():
    atlas = build_grid_atlas((16, 16, 16), 4.0, [{"name": "bg", "baseline": 1.0}])
    assert np.all(atlas.alphas == np.array([1.0, 0.0]))
    pri = rasterize_priors(atlas, atlas.nodes_ref, (16, 16, 16)).data
    np.testing.assert_allclose(pri[..., 0], 1.0, atol=1e-12)


def test_half_space_classes_soft_interface():
    blobs = [{"name": "left", "blobs": [{"center": [0, 7.5, 7.5], "sigma": [4, 100, 100]}]},
             {"name": "right", "blobs": [{"center": [15, 7.5, 7.5], "sigma": [4, 100, 100]}]}]
    atlas = build_grid_atlas((16, 16, 16), 3.0, blobs)
    pri = rasterize_priors(atlas, atlas.nodes_ref, (16, 16, 16)).data
    np.testing.assert_allclose(pri.sum(axis=-1), 1.0, atol=1e-12)
    mid = pri[7:9, :, :, 0]
    assert np.all((mid > 0) & (mid < 1))
    assert pri[0, 8, 8, 0] > 0.9 and pri[15, 8, 8, 1] > 0.9


def test_priors_sum_to_one_after_deformation(small_mesh):
    nodes, tets = small_mesh
    rng = np.random.default_rng(3)
    alphas = rng.dirichlet(np.ones(3), size=nodes.shape[0])
    atlas = TetMeshAtlas(nodes, tets, alphas)
    pri = rasterize_priors(atlas, perturbed(nodes, 0.1, 4), (8, 8, 8)).data
    np.testing.assert_allclose(pri.sum(axis=-1), 1.0, atol=1e-12)


def test_cached_location_matches_fresh_search(small_mesh):
    nodes, tets = small_mesh
    rng = np.random.default_rng(5)
    atlas = TetMeshAtlas(nodes, tets, rng.dirichlet(np.ones(3), size=nodes.shape[0]))
    cached = Rasterizer(atlas, (8, 8, 8))
    cached.locate(nodes)
    for step in range(4):
        x = perturbed(nodes, 0.15, 10 + step)
        o1, b1, _ = cached.locate(x)
        o2, b2, _ = Rasterizer(atlas, (8, 8, 8)).locate(x)
        assert np.array_equal(o1, o2)
        np.testing.assert_allclose(b1, b2, atol=1e-12)


def test_contract_gradient_finite_differences(small_mesh):
    nodes, tets = small_mesh
    rng = np.random.default_rng(6)
    atlas = TetMeshAtlas(nodes, tets, rng.dirichlet(np.ones(3), size=nodes.shape[0]))
    r = Rasterizer(atlas, (8, 8, 8))
    x = perturbed(nodes, 0.05, 7)
    w = rng.normal(size=(r.n_voxels, 3))
    g = r.contract_gradient(w, r.locate(x))
    h = 1e-6
    for node in rng.choice(nodes.shape[0], 8, replace=False):
        for c in range(3):
            xp, xm = x.copy(), x.copy()
            xp[node, c] += h
            xm[node, c] -= h
            fd = (np.sum(w * Rasterizer(atlas, (8, 8, 8)).priors(xp))
                  - np.sum(w * Rasterizer(atlas, (8, 8, 8)).priors(xm))) / (2 * h)
            assert g[node, c] == pytest.approx(fd, rel=1e-4, abs=1e-6)


def test_folded_mesh_rejected(small_mesh):
    nodes, tets = small_mesh
    atlas = TetMeshAtlas(nodes, tets, np.tile([1.0, 0.0], (nodes.shape[0], 1)))
    x = nodes.copy()
    t = tets[0]
    x[t[1]] = x[t[0]] - (x[t[1]] - x[t[0]])
    with pytest.raises(DegenerateMeshError):
        Rasterizer(atlas, (8, 8, 8)).locate(x)


def test_atlas_validation_and_roundtrip(tmp_path):
    atlas = single_tet_atlas(np.eye(4))
    p = tmp_path / "atlas.json"
    atlas.save(p)
    back = TetMeshAtlas.load(p)
    assert np.array_equal(back.nodes_ref, atlas.nodes_ref) and np.array_equal(back.alphas, atlas.alphas)
    with pytest.raises(SpecError):
        TetMeshAtlas(atlas.nodes_ref, [[0, 1, 2, 9]], np.eye(4))
    with pytest.raises(SpecError):
        TetMeshAtlas(atlas.nodes_ref, atlas.tets, np.full((4, 2), 0.3))


# ------------------------------------------------------------------ deformation


def test_energy_zero_at_anchor(small_mesh):
    nodes, tets = small_mesh
    anchor = perturbed(nodes, 0.1, 1)
    assert deformation_energy(anchor, anchor, tets, nodes) == pytest.approx(0.0, abs=1e-9)
    e, g = deformation_energy_and_gradient(anchor, anchor, tets, nodes)
    assert np.max(np.abs(g)) < 1e-9


def test_energy_uniform_scale():
    a = 6.0 ** (1 / 3)  # unit-volume corner tetrahedron
    nodes = np.array([[0, 0, 0], [a, 0, 0], [0, a, 0], [0, 0, a]])
    tets = np.array([[0, 1, 2, 3]])
    assert deformation_energy(2 * nodes, nodes, tets, nodes) == pytest.approx(3.0625, rel=1e-12)


def test_energy_rotation_is_free():
    nodes = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], float)
    tets = np.array([[0, 1, 2, 3]])
    c, s = np.cos(0.7), np.sin(0.7)
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    assert deformation_energy(nodes @ rot.T, nodes, tets, nodes) == pytest.approx(0.0, abs=1e-12)


def test_energy_folded_is_infinite(small_mesh):
    nodes, tets = small_mesh
    x = nodes.copy()
    t = tets[3]
    x[t[1]] = x[t[0]] - (x[t[1]] - x[t[0]])
    assert deformation_energy(x, nodes, tets, nodes) == np.inf
    with pytest.raises(GradientUndefinedError):
        deformation_gradient(x, nodes, tets, nodes)


def test_energy_matches_direct_formula(small_mesh):
    nodes, tets = small_mesh
    for seed in range(5):
        anchor = perturbed(nodes, 0.1, 100 + seed)
        x = perturbed(nodes, 0.2, 200 + seed)
        assert deformation_energy(x, anchor, tets, nodes) == pytest.approx(
            reference_energy(x, anchor, tets, nodes), rel=1e-10)


def test_energy_symmetric_in_meshes(small_mesh):
    nodes, tets = small_mesh
    a, b = perturbed(nodes, 0.15, 8), perturbed(nodes, 0.15, 9)
    assert deformation_energy(a, b, tets, nodes) == pytest.approx(deformation_energy(b, a, tets, nodes), rel=1e-12)


def test_gradient_rotation_equivariant(small_mesh):
    nodes, tets = small_mesh
    x = perturbed(nodes, 0.1, 11)
    c, s = np.cos(0.3), np.sin(0.3)
    rot = np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    g = deformation_gradient(x, nodes, tets, nodes)
    g_rot = deformation_gradient(x @ rot.T, nodes, tets, nodes)
    np.testing.assert_allclose(g_rot, g @ rot.T, rtol=1e-9, atol=1e-10)
    assert np.linalg.norm(g_rot) == pytest.approx(np.linalg.norm(g), rel=1e-10)


def test_gradient_central_differences(small_mesh):
    nodes, tets = small_mesh
    rng = np.random.default_rng(12)
    anchor = perturbed(nodes, 0.1, 13)
    x = perturbed(anchor, 0.05, 14)
    g = deformation_gradient(x, anchor, tets, nodes)
    prior = DeformationPrior(anchor, tets, nodes)
    h = 1e-5
    for node in rng.choice(nodes.shape[0], 10, replace=False):
        for c in range(3):
            xp, xm = x.copy(), x.copy()
            xp[node, c] += h
            xm[node, c] -= h
            fd = (prior.energy(xp) - prior.energy(xm)) / (2 * h)
            assert g[node, c] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_degenerate_anchor_rejected():
    nodes = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], float)
    flat = nodes.copy()
    flat[3] = [0.5, 0.5, 0.0]
    with pytest.raises(DegenerateMeshError):
        DeformationPrior(flat, np.array([[0, 1, 2, 3]]), nodes)
