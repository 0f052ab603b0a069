import itertools
import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from coarse2fine import meshkit as mk

TET_V = np.array([[1.0, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]])
TET_F = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])


def test_adjacency_single_triangle():
    A = mk.build_adjacency([[0, 1, 2]], 3).toarray()
    assert np.array_equal(A, np.ones((3, 3)) - np.eye(3))


def test_adjacency_two_triangles():
    A = mk.build_adjacency([[0, 1, 2], [1, 2, 3]], 4).toarray()
    assert A[0, 3] == 0 and A[1, 2] == 1
    assert np.array_equal(A, A.T)


def test_adjacency_tetrahedron():
    A = mk.build_adjacency(TET_F, 4).toarray()
    assert np.array_equal(A, np.ones((4, 4)) - np.eye(4))


def test_adjacency_rejects_bad_index():
    with pytest.raises(mk.MeshError):
        mk.build_adjacency([[0, 1, 5]], 3)


def test_mesh_rejects_degenerate_face():
    with pytest.raises(mk.MeshError):
        mk.Mesh(np.zeros((3, 3)), [[0, 0, 1]])


@pytest.mark.parametrize(
    "A, expected",
    [
        (sp.csr_matrix((1, 1)), np.array([[1.0]])),
        (sp.csr_matrix(np.array([[0.0, 1], [1, 0]])), np.full((2, 2), 0.5)),
        (sp.csr_matrix(np.ones((3, 3)) - np.eye(3)), np.full((3, 3), 1 / 3)),
    ],
)
def test_normalize_adjacency_examples(A, expected):
    assert np.allclose(mk.normalize_adjacency(A).toarray(), expected, atol=1e-15)


def test_laplacian_path_example():
    A = mk.build_adjacency([[0, 1, 2]], 3)
    A = sp.csr_matrix(np.array([[0.0, 1, 0], [1, 0, 1], [0, 1, 0]]))
    V = np.array([[0.0, 0, 0], [1, 0, 0], [3, 0, 0]])
    d = mk.laplacian_coords(V, A)
    assert np.allclose(d[1], [-0.5, 0, 0])


def test_laplacian_centroid_and_isolated():
    A = sp.csr_matrix(np.array([[0.0, 1, 1, 0], [1, 0, 0, 0], [1, 0, 0, 0], [0, 0, 0, 0]]))
    V = np.array([[1.0, 1, 0], [0, 0, 0], [2, 2, 0], [5, 6, 7]])
    d = mk.laplacian_coords(V, A)
    assert np.allclose(d[0], 0)
    assert np.array_equal(d[3], V[3])


@settings(max_examples=25, deadline=None)
@given(t=st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_laplacian_translation_invariant(t, toy_model):
    A = mk.build_adjacency(toy_model.faces, toy_model.n_vertices)
    V = toy_model.template
    diff = mk.laplacian_coords(V + np.array(t), A) - mk.laplacian_coords(V, A)
    assert np.abs(diff).max() < 1e-12


def test_decimate_identity_target():
    mesh = mk.uv_sphere(4, 6)
    Q_d, coarse = mk.decimate(mesh, mesh.n_vertices)
    assert np.array_equal(Q_d.toarray(), np.eye(mesh.n_vertices))
    assert np.array_equal(coarse.vertices, mesh.vertices)
    assert np.array_equal(coarse.faces, mesh.faces)


def test_decimate_rejects_small_target():
    with pytest.raises(ValueError):
        mk.decimate(mk.uv_sphere(4, 6), 2)


def test_decimate_tetrahedron_matches_brute_force():
    mesh = mk.Mesh(TET_V, TET_F)
    Q = mk.vertex_quadrics(mesh.vertices, mesh.faces)
    # exhaustive: every edge, keep the endpoint with lower summed quadric error
    best = None
    for i, j in itertools.combinations(range(4), 2):
        for keep in (i, j):
            cost = mk.quadric_error(Q[i] + Q[j], mesh.vertices[keep])
            cand = (cost, (i, j), keep)
            if best is None or cand[0] < best[0] - 1e-15:
                best = cand
    Q_d, coarse = mk.decimate(mesh, 3)
    kept = sorted(Q_d.tocoo().col.tolist())
    removed = ({0, 1, 2, 3} - set(kept)).pop()
    pair = best[1]
    assert removed in pair and best[2] in pair
    assert coarse.n_vertices == 3
    # all edges of the regular tetrahedron tie, so the lowest-index pair wins
    assert pair == (0, 1)


def test_sphere_hierarchy_sizes():
    h = mk.build_hierarchy(mk.uv_sphere(20, 24), 3, 4)
    assert h.sizes[0] == 482
    assert abs(h.sizes[1] - 121) <= 1 and abs(h.sizes[2] - 31) <= 1


def _check_hierarchy(h):
    for fine, coarse in zip(h.levels[:-1], h.levels[1:]):
        Qd, Qu = fine.down.tocsr(), fine.up.tocsr()
        assert Qd.shape == (coarse.mesh.n_vertices, fine.mesh.n_vertices)
        assert np.all(np.diff(Qd.indptr) == 1) and np.all(Qd.data == 1.0)
        assert np.abs(np.asarray(Qu.sum(axis=1)).ravel() - 1).max() < 1e-12
        V = fine.mesh.vertices
        kept = Qd.indices
        assert np.array_equal((Qu @ (Qd @ V))[kept], V[kept])
        assert np.array_equal(coarse.mesh.vertices, V[kept])
        assert len(coarse.mesh.faces) > 0
    for lvl in h.levels:
        At = lvl.norm_adjacency
        assert abs(At - At.T).max() < 1e-12 if At.nnz else True
        A_hat = lvl.adjacency + sp.identity(lvl.adjacency.shape[0])
        rows = np.asarray(A_hat.sum(axis=1)).ravel()
        walk = sp.diags(1 / rows) @ A_hat
        assert np.abs(np.asarray(walk.sum(axis=1)).ravel() - 1).max() < 1e-12
        assert not np.any(lvl.adjacency.diagonal())


def test_toy_hierarchy_invariants(toy_hierarchy):
    assert toy_hierarchy.sizes == [482, 121, 31]
    _check_hierarchy(toy_hierarchy)


def test_big_mesh_hierarchy_invariants(big_hierarchy):
    assert big_hierarchy.sizes[0] == 3889
    _check_hierarchy(big_hierarchy)


def test_upsample_identity():
    mesh = mk.uv_sphere(3, 5)
    Q_d = sp.identity(mesh.n_vertices, format="csr")
    Q_u = mk.upsample_transform(Q_d, mesh, mesh)
    assert np.array_equal(Q_u.toarray(), np.eye(mesh.n_vertices))


def test_upsample_removed_vertex_barycentric(toy_hierarchy):
    lvl, nxt = toy_hierarchy.levels[0], toy_hierarchy.levels[1]
    V = lvl.mesh.vertices
    rec = lvl.up @ (lvl.down @ V)
    removed = np.setdiff1d(np.arange(len(V)), lvl.down.indices)
    tri = nxt.mesh.vertices[nxt.mesh.faces]
    diam = max(np.linalg.norm(tri[:, a] - tri[:, b], axis=1).max() for a, b in ((0, 1), (1, 2), (0, 2)))
    err = np.linalg.norm(rec[removed] - V[removed], axis=1)
    assert err.max() <= diam
    # weights are a convex combination
    Qu = lvl.up.tocsr()[removed]
    assert Qu.data.min() >= -1e-12


def test_closest_point_barycentric_inside():
    tri = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
    w, d2 = mk.closest_point_barycentric(np.array([0.25, 0.25, 0.3]), tri[None])
    assert np.allclose(w[0], [0.5, 0.25, 0.25])
    assert np.isclose(d2[0], 0.09)


def test_decimated_faces_valid(big_hierarchy):
    for lvl in big_hierarchy.levels:
        mk.check_faces(lvl.mesh.faces, lvl.mesh.n_vertices)


def test_obj_roundtrip(tmp_path, toy_model):
    mesh = toy_model.mesh()
    path = tmp_path / "m.obj"
    mk.write_obj(mesh, path)
    back = mk.read_obj(path)
    assert np.array_equal(back.vertices, mesh.vertices)
    assert np.array_equal(back.faces, mesh.faces)


def test_hierarchy_cache_roundtrip(tmp_path, toy_hierarchy):
    path = tmp_path / "h.bin"
    mk.save_hierarchy(toy_hierarchy, path)
    back = mk.load_hierarchy(path)
    assert back.sizes == toy_hierarchy.sizes
    for a, b in zip(back.levels[:-1], toy_hierarchy.levels[:-1]):
        assert (a.down != b.down).nnz == 0 and (a.up != b.up).nnz == 0


def test_hierarchy_cache_truncated(tmp_path, toy_hierarchy):
    path = tmp_path / "h.bin"
    mk.save_hierarchy(toy_hierarchy, path)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(mk.MeshError):
        mk.load_hierarchy(path)


def test_uv_sphere_closed():
    mesh = mk.uv_sphere(5, 7)
    e = np.sort(np.concatenate([mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]], mesh.faces[:, [2, 0]]]), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    assert np.all(counts == 2)
    assert mesh.referenced().all()
    assert mesh.n_vertices == 5 * 7 + 2
    assert math.isclose(np.linalg.norm(mesh.vertices, axis=1).max(), 1.0)
