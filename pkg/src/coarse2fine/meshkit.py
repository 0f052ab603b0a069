"""Mesh connectivity, graph operators and the quadric-decimation hierarchy."""

from __future__ import annotations

import heapq
import math
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must be Cx3, got {v.shape}")
        check_faces(f, len(v))
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self):
        return len(self.vertices)

    def referenced(self):
        used = np.zeros(self.n_vertices, dtype=bool)
        used[self.faces.reshape(-1)] = True
        return used


def check_faces(faces, vertex_count):
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if faces.size and (faces.min() < 0 or faces.max() >= vertex_count):
        raise MeshError(f"face index out of range for {vertex_count} vertices")
    degenerate = (faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])
    if degenerate.any():
        raise MeshError(f"{int(degenerate.sum())} degenerate faces")
    return faces


def edges_of(faces):
    """Unique undirected edges as an (E, 2) array with i < j, sorted."""
    faces = np.asarray(faces, dtype=np.int64)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def build_adjacency(faces, vertex_count):
    """Binary symmetric C x C adjacency of the face edges (CSR, sorted indices)."""
    faces = check_faces(faces, vertex_count)
    e = edges_of(faces) if faces.size else np.zeros((0, 2), dtype=np.int64)
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    A = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(vertex_count, vertex_count))
    A.sort_indices()
    return A


def normalize_adjacency(A):
    """D^-1/2 (A + I) D^-1/2 with D the degree matrix of A + I."""
    A = sp.csr_matrix(A)
    A_hat = (A + sp.identity(A.shape[0], format="csr")).tocsr()
    d = np.asarray(A_hat.sum(axis=1)).ravel()
    inv_sqrt = sp.diags(1.0 / np.sqrt(d))
    out = (inv_sqrt @ A_hat @ inv_sqrt).tocsr()
    out.sort_indices()
    return out


def laplacian_operator(A):
    """Sparse L with (L V)_i = v_i - mean of neighbours; isolated rows are identity."""
    A = sp.csr_matrix(A)
    deg = np.asarray(A.sum(axis=1)).ravel()
    scale = np.where(deg > 0, 1.0 / np.maximum(deg, 1.0), 0.0)
    L = (sp.identity(A.shape[0], format="csr") - sp.diags(scale) @ A).tocsr()
    L.sort_indices()
    return L


def laplacian_coords(V, A):
    """Laplacian coordinates of ``V`` (C x 3 array, or a batched Tensor (..., C, 3))."""
    L = laplacian_operator(A)
    if isinstance(V, ad.Tensor):
        return ad.sparse_dense_matmul(L, V)
    return L @ np.asarray(V, dtype=np.float64)


# ------------------------------------------------------------------ quadrics


def vertex_quadrics(vertices, faces):
    """Per-vertex 4x4 quadric: sum of plane outer products of incident faces."""
    v = vertices[faces]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    norm = np.linalg.norm(n, axis=1)
    ok = norm > 0
    n = np.where(ok[:, None], n / np.where(ok, norm, 1.0)[:, None], 0.0)
    planes = np.concatenate([n, -(n * v[:, 0]).sum(axis=1, keepdims=True)], axis=1)
    K = planes[:, :, None] * planes[:, None, :]
    Q = np.zeros((len(vertices), 4, 4))
    for c in range(3):
        np.add.at(Q, faces[:, c], K)
    return Q


def quadric_error(Q, point):
    h = np.append(point, 1.0)
    return float(h @ Q @ h)


def collapse_cost(Q, vertices, i, j):
    """Cost and surviving endpoint for contracting edge (i, j), i < j.

    The pair's summed quadric is evaluated at each endpoint; the cheaper one
    survives, the lower index on a tie.
    """
    q = Q[i] + Q[j]
    ei = quadric_error(q, vertices[i])
    ej = quadric_error(q, vertices[j])
    return (ei, i) if ei <= ej else (ej, j)


def decimate(mesh, target_vertex_count):
    """Greedy minimum-quadric-error edge collapse down to ``target_vertex_count``.

    Returns ``(Q_d, coarse)`` where ``Q_d`` is a k x l binary selector of the
    surviving vertices (ascending original index) and ``coarse`` the re-indexed
    mesh with degenerate faces removed.
    """
    n = mesh.n_vertices
    if target_vertex_count < 3:
        raise ValueError("target vertex count must be >= 3")
    if target_vertex_count > n:
        raise ValueError(f"target {target_vertex_count} exceeds vertex count {n}")
    verts = mesh.vertices
    faces = [list(f) for f in mesh.faces]
    Q = vertex_quadrics(verts, mesh.faces)
    vert_faces = [set() for _ in range(n)]
    for fi, f in enumerate(faces):
        for v in f:
            vert_faces[v].add(fi)
    neighbours = [set() for _ in range(n)]
    for i, j in edges_of(mesh.faces):
        neighbours[i].add(int(j))
        neighbours[j].add(int(i))
    alive = np.ones(n, dtype=bool)
    face_alive = [True] * len(faces)
    version = [0] * n

    heap = []

    def push(i, j):
        i, j = min(i, j), max(i, j)
        cost, keep = collapse_cost(Q, verts, i, j)
        heapq.heappush(heap, (cost, i, j, keep, version[i], version[j]))

    for i in range(n):
        for j in neighbours[i]:
            if i < j:
                push(i, j)

    count = n
    while count > target_vertex_count and heap:
        cost, i, j, keep, vi, vj = heapq.heappop(heap)
        if not (alive[i] and alive[j]) or version[i] != vi or version[j] != vj:
            continue
        drop = j if keep == i else i
        alive[drop] = False
        count -= 1
        Q[keep] = Q[keep] + Q[drop]
        version[keep] += 1
        for fi in sorted(vert_faces[drop]):
            if not face_alive[fi]:
                continue
            f = faces[fi]
            f[f.index(drop)] = keep
            if len(set(f)) < 3:
                face_alive[fi] = False
                for v in f:
                    vert_faces[v].discard(fi)
            else:
                vert_faces[keep].add(fi)
        vert_faces[drop] = set()
        for nb in sorted(neighbours[drop]):
            neighbours[nb].discard(drop)
            if nb != keep:
                neighbours[nb].add(keep)
                neighbours[keep].add(nb)
        neighbours[keep].discard(drop)
        neighbours[drop] = set()
        for nb in sorted(neighbours[keep]):
            push(keep, nb)

    kept = np.flatnonzero(alive)
    remap = -np.ones(n, dtype=np.int64)
    remap[kept] = np.arange(len(kept))
    coarse_faces = np.array([faces[fi] for fi in range(len(faces)) if face_alive[fi]], dtype=np.int64)
    coarse_faces = remap[coarse_faces].reshape(-1, 3)
    Q_d = sp.csr_matrix(
        (np.ones(len(kept)), (np.arange(len(kept)), kept)), shape=(len(kept), n)
    )
    return Q_d, Mesh(verts[kept], coarse_faces)


# ------------------------------------------------------------------ upsample


def closest_point_barycentric(p, tri):
    """Barycentric coordinates of the point of each triangle nearest to ``p``.

    ``p`` is (3,), ``tri`` is (F, 3, 3).  Returns (weights (F, 3), sq_dist (F,)).
    Weights are nonnegative and sum to one.
    """
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    candidates = []
    ab, ac = b - a, c - a
    d00 = (ab * ab).sum(1)
    d01 = (ab * ac).sum(1)
    d11 = (ac * ac).sum(1)
    ap = p - a
    d20 = (ap * ab).sum(1)
    d21 = (ap * ac).sum(1)
    denom = d00 * d11 - d01 * d01
    safe = np.where(np.abs(denom) > 1e-300, denom, 1.0)
    wb = (d11 * d20 - d01 * d21) / safe
    wc = (d00 * d21 - d01 * d20) / safe
    wa = 1.0 - wb - wc
    inside = (np.abs(denom) > 1e-300) & (wa >= 0) & (wb >= 0) & (wc >= 0)
    w_in = np.stack([wa, wb, wc], axis=1)
    q = wa[:, None] * a + wb[:, None] * b + wc[:, None] * c
    d_in = np.where(inside, ((q - p) ** 2).sum(1), np.inf)
    candidates.append((w_in, d_in))
    for s, t, (ks, kt) in ((a, b, (0, 1)), (b, c, (1, 2)), (c, a, (2, 0))):
        e = t - s
        ee = (e * e).sum(1)
        u = np.clip(((p - s) * e).sum(1) / np.where(ee > 0, ee, 1.0), 0.0, 1.0)
        q = s + u[:, None] * e
        w = np.zeros((len(tri), 3))
        w[:, ks] = 1.0 - u
        w[:, kt] += u
        candidates.append((w, ((q - p) ** 2).sum(1)))
    dists = np.stack([d for _, d in candidates], axis=1)
    best = dists.argmin(axis=1)
    weights = np.stack([w for w, _ in candidates], axis=1)[np.arange(len(tri)), best]
    return weights, dists[np.arange(len(tri)), best]


def upsample_transform(Q_d, fine, coarse):
    """l x k matrix lifting coarse vertices back to the fine mesh.

    Surviving vertices copy their coarse counterpart; removed vertices take the
    barycentric weights of the nearest coarse face in the fine embedding.
    """
    Q_d = sp.csr_matrix(Q_d)
    l, k = fine.n_vertices, coarse.n_vertices
    coo = Q_d.tocoo()
    kept = coo.col[np.argsort(coo.row)]
    to_coarse = -np.ones(l, dtype=np.int64)
    to_coarse[kept] = np.arange(k)
    rows, cols, vals = [], [], []
    tri = coarse.vertices[coarse.faces] if len(coarse.faces) else None
    for v in range(l):
        if to_coarse[v] >= 0:
            rows.append(v)
            cols.append(to_coarse[v])
            vals.append(1.0)
            continue
        p = fine.vertices[v]
        if tri is None:
            nearest = int(np.argmin(((coarse.vertices - p) ** 2).sum(1)))
            rows.append(v)
            cols.append(nearest)
            vals.append(1.0)
            continue
        w, d = closest_point_barycentric(p, tri)
        f = int(np.argmin(d))
        merged = {}
        for corner in range(3):
            if w[f, corner] > 0:
                idx = int(coarse.faces[f, corner])
                merged[idx] = merged.get(idx, 0.0) + float(w[f, corner])
        for idx in sorted(merged):
            rows.append(v)
            cols.append(idx)
            vals.append(merged[idx])
    Q_u = sp.csr_matrix((vals, (rows, cols)), shape=(l, k))
    Q_u.sort_indices()
    return Q_u


# ----------------------------------------------------------------- hierarchy


@dataclass(frozen=True)
class HierarchyLevel:
    mesh: Mesh
    adjacency: sp.csr_matrix
    norm_adjacency: sp.csr_matrix
    down: sp.csr_matrix | None = None  # to the next coarser level
    up: sp.csr_matrix | None = None  # from the next coarser level


@dataclass(frozen=True)
class MeshHierarchy:
    levels: list = field(default_factory=list)

    @property
    def sizes(self):
        return [lvl.mesh.n_vertices for lvl in self.levels]

    def __len__(self):
        return len(self.levels)


def _level(mesh, down=None, up=None):
    A = build_adjacency(mesh.faces, mesh.n_vertices)
    return HierarchyLevel(mesh, A, normalize_adjacency(A), down, up)


def build_hierarchy(mesh, n_levels=3, factor=4):
    """Successive quadric decimations by ``factor``; ``n_levels`` resolutions in total."""
    meshes, downs, ups = [mesh], [], []
    for _ in range(n_levels - 1):
        fine = meshes[-1]
        target = max(3, math.ceil(fine.n_vertices / factor))
        Q_d, coarse = decimate(fine, target)
        downs.append(Q_d)
        ups.append(upsample_transform(Q_d, fine, coarse))
        meshes.append(coarse)
    levels = [
        _level(m, downs[i] if i < len(downs) else None, ups[i] if i < len(ups) else None)
        for i, m in enumerate(meshes)
    ]
    return MeshHierarchy(levels)


# ------------------------------------------------------------------ file I/O


def read_obj(path):
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif parts[0] == "f":
                    idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                    if len(idx) != 3:
                        raise MeshError(f"{path}:{lineno}: only triangles are supported")
                    faces.append([i - 1 for i in idx])
            except ValueError as exc:
                raise MeshError(f"{path}:{lineno}: {exc}") from exc
    return Mesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_obj(mesh, path):
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write("v " + " ".join(repr(float(x)) for x in v) + "\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


HIERARCHY_MAGIC = b"C2FHIER\0"
HIERARCHY_VERSION = 1


def _write_triplets(fh, M):
    coo = sp.coo_matrix(M)
    order = np.lexsort((coo.col, coo.row))
    fh.write(struct.pack("<qqq", M.shape[0], M.shape[1], coo.nnz))
    fh.write(coo.row[order].astype("<i8").tobytes())
    fh.write(coo.col[order].astype("<i8").tobytes())
    fh.write(coo.data[order].astype("<f8").tobytes())


def _read_exact(fh, n):
    buf = fh.read(n)
    if len(buf) != n:
        raise MeshError("hierarchy cache truncated")
    return buf


def _read_triplets(fh):
    m, n, nnz = struct.unpack("<qqq", _read_exact(fh, 24))
    rows = np.frombuffer(_read_exact(fh, 8 * nnz), "<i8")
    cols = np.frombuffer(_read_exact(fh, 8 * nnz), "<i8")
    vals = np.frombuffer(_read_exact(fh, 8 * nnz), "<f8")
    M = sp.csr_matrix((vals, (rows, cols)), shape=(m, n))
    M.sort_indices()
    return M


def save_hierarchy(hierarchy, path):
    """Binary cache: magic, version, level count, then per level the mesh and
    the down/up transforms as (row, col, value) triplets, all little-endian."""
    with open(path, "wb") as fh:
        fh.write(HIERARCHY_MAGIC)
        fh.write(struct.pack("<II", HIERARCHY_VERSION, len(hierarchy.levels)))
        for lvl in hierarchy.levels:
            m = lvl.mesh
            fh.write(struct.pack("<qq", m.n_vertices, len(m.faces)))
            fh.write(m.vertices.astype("<f8").tobytes())
            fh.write(m.faces.astype("<i8").tobytes())
        for lvl in hierarchy.levels[:-1]:
            _write_triplets(fh, lvl.down)
            _write_triplets(fh, lvl.up)


def load_hierarchy(path):
    with open(path, "rb") as fh:
        if fh.read(len(HIERARCHY_MAGIC)) != HIERARCHY_MAGIC:
            raise MeshError(f"{path}: not a hierarchy cache")
        version, n_levels = struct.unpack("<II", _read_exact(fh, 8))
        if version != HIERARCHY_VERSION:
            raise MeshError(f"{path}: unsupported hierarchy version {version}")
        meshes = []
        for _ in range(n_levels):
            nv, nf = struct.unpack("<qq", _read_exact(fh, 16))
            v = np.frombuffer(_read_exact(fh, 24 * nv), "<f8").reshape(nv, 3)
            f = np.frombuffer(_read_exact(fh, 24 * nf), "<i8").reshape(nf, 3)
            meshes.append(Mesh(v.copy(), f.copy()))
        transforms = [(_read_triplets(fh), _read_triplets(fh)) for _ in range(n_levels - 1)]
    levels = []
    for i, m in enumerate(meshes):
        down, up = transforms[i] if i < len(transforms) else (None, None)
        levels.append(_level(m, down, up))
    return MeshHierarchy(levels)


def uv_sphere(n_rings, n_segments, radius=1.0):
    """Closed UV sphere with ``n_rings * n_segments + 2`` vertices."""
    verts = [(0.0, radius, 0.0)]
    for r in range(1, n_rings + 1):
        phi = math.pi * r / (n_rings + 1)
        for s in range(n_segments):
            t = 2 * math.pi * s / n_segments
            verts.append((radius * math.sin(phi) * math.cos(t), radius * math.cos(phi), radius * math.sin(phi) * math.sin(t)))
    verts.append((0.0, -radius, 0.0))
    faces = []
    ring = lambda r, s: 1 + r * n_segments + (s % n_segments)  # noqa: E731
    south = len(verts) - 1
    for s in range(n_segments):
        faces.append((0, ring(0, s + 1), ring(0, s)))
    for r in range(n_rings - 1):
        for s in range(n_segments):
            a, b = ring(r, s), ring(r, s + 1)
            c, d = ring(r + 1, s), ring(r + 1, s + 1)
            faces.append((a, b, d))
            faces.append((a, d, c))
    for s in range(n_segments):
        faces.append((south, ring(n_rings - 1, s), ring(n_rings - 1, s + 1)))
    return Mesh(np.array(verts), np.array(faces, dtype=np.int64))
