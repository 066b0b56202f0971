"""Triangle mesh container, OBJ I/O and uniform-Laplacian utilities."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp


class MeshError(ValueError):
    pass


class ObjParseError(MeshError):
    def __init__(self, lineno, msg):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    labels: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if len(f):
            if len(v) < 3:
                raise MeshError("a mesh with faces needs at least 3 vertices")
            if f.min() < 0 or f.max() >= len(v):
                raise MeshError(f"face index out of range for {len(v)} vertices")
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise MeshError("degenerate face (repeated vertex index)")
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if len(lab) != len(v):
                raise MeshError(f"{len(lab)} labels for {len(v)} vertices")
            object.__setattr__(self, "labels", lab)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def with_vertices(self, vertices) -> "Mesh":
        """Same connectivity and labels, new positions."""
        return Mesh(vertices, self.faces, self.labels)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as an (E, 2) array with i < j, sorted."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)


# ---------------------------------------------------------------- OBJ I/O


def load_obj(path) -> Mesh:
    verts, faces = [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            if tok[0] == "v":
                if len(tok) < 4:
                    raise ObjParseError(lineno, "vertex record needs 3 coordinates")
                try:
                    verts.append([float(t) for t in tok[1:4]])
                except ValueError as exc:
                    raise ObjParseError(lineno, str(exc)) from None
            elif tok[0] == "f":
                if len(tok) != 4:
                    raise ObjParseError(lineno, "only triangular faces are supported")
                try:
                    idx = [int(t.split("/")[0]) for t in tok[1:]]
                except ValueError as exc:
                    raise ObjParseError(lineno, str(exc)) from None
                face = []
                for i in idx:
                    j = i - 1 if i > 0 else len(verts) + i
                    if not 0 <= j < len(verts):
                        raise ObjParseError(lineno, f"vertex index {i} out of range ({len(verts)} vertices)")
                    face.append(j)
                faces.append(face)
            # vt / vn / o / g / s / mtllib / usemtl are ignored
    return Mesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                np.array(faces, dtype=np.int64).reshape(-1, 3))


def obj_text(mesh: Mesh) -> str:
    lines = [f"v {x:.9f} {y:.9f} {z:.9f}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    return "\n".join(lines) + "\n"


def save_obj(mesh: Mesh, path) -> None:
    Path(path).write_text(obj_text(mesh))


def load_labels(path) -> np.ndarray:
    with open(path) as fh:
        return np.asarray(json.load(fh)["labels"], dtype=np.int64)


def save_labels(labels, path) -> None:
    Path(path).write_text(json.dumps({"labels": [int(x) for x in labels]}))


# ---------------------------------------------------------------- normals


def face_normals_unnormalized(vertices, faces) -> np.ndarray:
    """Cross products (v1-v0)x(v2-v0); length is twice the face area."""
    v0, v1, v2 = (vertices[faces[:, k]] for k in range(3))
    return np.cross(v1 - v0, v2 - v0)


def vertex_normals(mesh: Mesh, return_degenerate: bool = False):
    """Area-weighted vertex normals.

    Vertices whose accumulated normal vanishes get the zero vector; pass
    ``return_degenerate=True`` to also receive the boolean flag array.
    """
    acc = _accumulate_normals(mesh.vertices, mesh.faces)
    norm = np.linalg.norm(acc, axis=1)
    degenerate = norm < 1e-300
    out = np.zeros_like(acc)
    ok = ~degenerate
    out[ok] = acc[ok] / norm[ok, None]
    if return_degenerate:
        return out, degenerate
    return out


def _accumulate_normals(vertices, faces):
    fn = face_normals_unnormalized(vertices, faces)
    acc = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(acc, faces[:, k], fn)
    return acc


def vertex_normals_vjp(mesh: Mesh, grad_normals: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. unit vertex normals back onto vertex positions."""
    v, f = mesh.vertices, mesh.faces
    acc = _accumulate_normals(v, f)
    norm = np.linalg.norm(acc, axis=1)
    ok = norm > 1e-300
    n = np.zeros_like(acc)
    n[ok] = acc[ok] / norm[ok, None]
    # d(u/|u|) = (I - n n^T) du / |u|
    g_acc = np.zeros_like(acc)
    g = grad_normals[ok]
    g_acc[ok] = (g - n[ok] * np.sum(g * n[ok], axis=1, keepdims=True)) / norm[ok, None]
    g_fn = g_acc[f[:, 0]] + g_acc[f[:, 1]] + g_acc[f[:, 2]]
    v0, v1, v2 = (v[f[:, k]] for k in range(3))
    a, b = v1 - v0, v2 - v0
    # c = a x b  ->  dL/da = b x g, dL/db = g x a
    ga = np.cross(b, g_fn)
    gb = np.cross(g_fn, a)
    out = np.zeros_like(v)
    np.add.at(out, f[:, 1], ga)
    np.add.at(out, f[:, 2], gb)
    np.add.at(out, f[:, 0], -ga - gb)
    return out


# ---------------------------------------------------------------- Laplacian


def adjacency(mesh: Mesh) -> sp.csr_matrix:
    """Symmetric 0/1 vertex adjacency (CSR, sorted column indices)."""
    e = mesh.edges()
    n = mesh.n_vertices
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    a = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    a.sum_duplicates()
    a.sort_indices()
    return a


def uniform_laplacian(mesh: Mesh) -> sp.csr_matrix:
    """Matrix L with (L x)_i = x_i - mean of the 1-ring of i."""
    a = adjacency(mesh)
    deg = np.asarray(a.sum(axis=1)).ravel()
    if np.any(deg == 0):
        raise MeshError(f"isolated vertex {int(np.argmax(deg == 0))} has no neighbours")
    lap = sp.identity(mesh.n_vertices, format="csr") - sp.diags(1.0 / deg) @ a
    return lap.tocsr()


def laplacian_coordinates(mesh: Mesh, values=None) -> np.ndarray:
    """Uniform Laplacian coordinates of the mesh positions (or any per-vertex field)."""
    x = mesh.vertices if values is None else np.asarray(values, dtype=np.float64)
    return uniform_laplacian(mesh) @ x


def laplacian_smooth_field(mesh: Mesh, values, iterations: int = 10, step: float = 0.5) -> np.ndarray:
    """Explicit umbrella smoothing f <- f + step * (neighbour mean - f)."""
    if not 0.0 < step <= 1.0:
        raise ValueError(f"smoothing step must lie in (0, 1], got {step}")
    if iterations < 0:
        raise ValueError("iterations must be non-negative")
    f = np.array(values, dtype=np.float64)
    if f.shape[0] != mesh.n_vertices:
        raise MeshError(f"field has {f.shape[0]} rows, mesh has {mesh.n_vertices} vertices")
    if iterations == 0:
        return f
    a = adjacency(mesh)
    deg = np.asarray(a.sum(axis=1)).ravel()
    if np.any(deg == 0):
        raise MeshError("cannot smooth over isolated vertices")
    deg = deg.reshape((-1,) + (1,) * (f.ndim - 1))
    for _ in range(iterations):
        mean = (a @ f) / deg
        f = f + step * (mean - f)
    return f


# ---------------------------------------------------------------- queries


def point_triangle_distance(points, mesh: Mesh, chunk: int = 256) -> np.ndarray:
    """Unsigned distance from each point to the closest triangle (brute force)."""
    p_all = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    a = mesh.vertices[mesh.faces[:, 0]]
    b = mesh.vertices[mesh.faces[:, 1]]
    c = mesh.vertices[mesh.faces[:, 2]]
    out = np.empty(len(p_all))
    for s in range(0, len(p_all), chunk):
        p = p_all[s:s + chunk, None, :]
        out[s:s + chunk] = np.sqrt(_sq_dist_point_triangle(p, a, b, c).min(axis=1))
    return out


def _sq_dist_point_triangle(p, a, b, c):
    # Closest point by projection onto the plane, falling back to edges.
    ab, ac = b - a, c - a
    n = np.cross(ab, ac)
    nn = np.sum(n * n, axis=-1)
    ap = p - a
    t = np.sum(ap * n, axis=-1) / nn
    proj = p - t[..., None] * n
    # barycentric test of the projection
    v0, v1, v2 = ab, ac, proj - a
    d00 = np.sum(v0 * v0, -1)
    d01 = np.sum(v0 * v1, -1)
    d11 = np.sum(v1 * v1, -1)
    d20 = np.sum(v2 * v0, -1)
    d21 = np.sum(v2 * v1, -1)
    denom = d00 * d11 - d01 * d01
    bv = (d11 * d20 - d01 * d21) / denom
    bw = (d00 * d21 - d01 * d20) / denom
    inside = (bv >= 0) & (bw >= 0) & (bv + bw <= 1)
    d_plane = t * t * nn
    d_edges = np.minimum(np.minimum(_sq_dist_segment(p, a, b), _sq_dist_segment(p, b, c)),
                         _sq_dist_segment(p, c, a))
    return np.where(inside, d_plane, d_edges)


def _sq_dist_segment(p, a, b):
    ab = b - a
    t = np.clip(np.sum((p - a) * ab, -1) / np.sum(ab * ab, -1), 0.0, 1.0)
    d = p - (a + t[..., None] * ab)
    return np.sum(d * d, -1)


def winding_number(points, mesh: Mesh, chunk: int = 256) -> np.ndarray:
    """Generalized winding number (~1 inside a closed outward-oriented surface)."""
    p_all = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tri = mesh.vertices[mesh.faces]
    out = np.empty(len(p_all))
    for s in range(0, len(p_all), chunk):
        d = tri[None, :, :, :] - p_all[s:s + chunk, None, None, :]
        ln = np.linalg.norm(d, axis=-1)
        a, b, c = d[..., 0, :], d[..., 1, :], d[..., 2, :]
        la, lb, lc = ln[..., 0], ln[..., 1], ln[..., 2]
        num = np.sum(a * np.cross(b, c), axis=-1)
        den = (la * lb * lc + np.sum(a * b, -1) * lc + np.sum(b * c, -1) * la
               + np.sum(c * a, -1) * lb)
        out[s:s + chunk] = np.arctan2(num, den).sum(axis=1) / (2.0 * np.pi)
    return out
