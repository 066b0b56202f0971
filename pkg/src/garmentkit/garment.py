"""Garment template with a PCA shape space, free displacements and skinned posing."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import body as bm
from .body import BodyModel, Pose
from .mesh import Mesh

CATEGORIES = ("l-shirt", "s-shirt", "l-pant", "s-pant", "l-skirt", "s-skirt")
N_PCA = 64


class GarmentError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GarmentTemplate:
    category: str
    rest_mesh: Mesh
    pca_basis: np.ndarray        # (3V, 64), unit columns
    pca_scales: np.ndarray       # (64,), per-component standard deviation in meters
    segmentation_prior: np.ndarray

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise GarmentError(f"unknown garment category {self.category!r}")
        nv = self.rest_mesh.n_vertices
        basis = np.asarray(self.pca_basis, dtype=np.float64)
        scales = np.asarray(self.pca_scales, dtype=np.float64).reshape(-1)
        prior = np.asarray(self.segmentation_prior, dtype=np.int64).reshape(-1)
        if basis.shape != (3 * nv, N_PCA) or scales.shape != (N_PCA,):
            raise GarmentError(f"PCA basis must be ({3 * nv}, {N_PCA}) with {N_PCA} scales")
        if prior.shape != (nv,):
            raise GarmentError(f"segmentation prior has {prior.size} entries for {nv} vertices")
        live = np.linalg.norm(basis, axis=0) > 0
        gram = basis[:, live].T @ basis[:, live]
        if gram.size and np.abs(gram - np.eye(len(gram))).max() > 1e-8:
            raise GarmentError("PCA basis columns are not orthonormal")
        if np.any(scales[~live] != 0):
            raise GarmentError("zero basis columns must carry zero scale")
        object.__setattr__(self, "pca_basis", basis)
        object.__setattr__(self, "pca_scales", scales)
        object.__setattr__(self, "segmentation_prior", prior)
        m = self.rest_mesh
        if m.labels is None or not np.array_equal(m.labels, prior):
            object.__setattr__(self, "rest_mesh", Mesh(m.vertices, m.faces, prior))

    @property
    def n_vertices(self) -> int:
        return self.rest_mesh.n_vertices

    def to_json(self) -> dict:
        return {
            "category": self.category,
            "vertices": self.rest_mesh.vertices.tolist(),
            "faces": self.rest_mesh.faces.tolist(),
            "pca_basis": self.pca_basis.tolist(),
            "pca_scales": self.pca_scales.tolist(),
            "segmentation_prior": self.segmentation_prior.tolist(),
        }

    @classmethod
    def from_json(cls, d) -> "GarmentTemplate":
        return cls(
            category=d["category"],
            rest_mesh=Mesh(np.asarray(d["vertices"], dtype=np.float64), np.asarray(d["faces"], dtype=np.int64)),
            pca_basis=np.asarray(d["pca_basis"], dtype=np.float64),
            pca_scales=np.asarray(d["pca_scales"], dtype=np.float64),
            segmentation_prior=np.asarray(d["segmentation_prior"], dtype=np.int64),
        )


@dataclass(frozen=True, eq=False)
class GarmentParams:
    alpha: np.ndarray = field(default_factory=lambda: np.zeros(N_PCA))
    displacement: np.ndarray | None = None

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=np.float64).reshape(-1)
        if a.shape != (N_PCA,):
            raise GarmentError(f"alpha must have {N_PCA} entries, got {a.size}")
        if not np.all(np.isfinite(a)):
            raise GarmentError("alpha contains non-finite values")
        object.__setattr__(self, "alpha", a)
        if self.displacement is not None:
            d = np.asarray(self.displacement, dtype=np.float64).reshape(-1, 3)
            if not np.all(np.isfinite(d)):
                raise GarmentError("displacement contains non-finite values")
            object.__setattr__(self, "displacement", d)

    def displacement_for(self, n_vertices: int) -> np.ndarray:
        if self.displacement is None:
            return np.zeros((n_vertices, 3))
        if len(self.displacement) != n_vertices:
            raise GarmentError(f"displacement has {len(self.displacement)} rows, garment has {n_vertices}")
        return self.displacement

    def to_json(self, n_vertices: int) -> dict:
        return {"alpha": self.alpha.tolist(), "displacement": self.displacement_for(n_vertices).tolist()}

    @classmethod
    def from_json(cls, d) -> "GarmentParams":
        disp = d.get("displacement")
        return cls(np.asarray(d["alpha"], dtype=np.float64), None if disp is None else np.asarray(disp))


def save_template(template: GarmentTemplate, path) -> None:
    Path(path).write_text(json.dumps(template.to_json()))


def load_template(path) -> GarmentTemplate:
    with open(path) as fh:
        return GarmentTemplate.from_json(json.load(fh))


def save_params(params: GarmentParams, n_vertices: int, path) -> None:
    Path(path).write_text(json.dumps(params.to_json(n_vertices)))


def load_params(path) -> GarmentParams:
    with open(path) as fh:
        return GarmentParams.from_json(json.load(fh))


# ---------------------------------------------------------------- evaluation


def garment_rest(template: GarmentTemplate, alpha, displacement=None) -> Mesh:
    a = np.asarray(alpha, dtype=np.float64).reshape(-1)
    if a.shape != (N_PCA,):
        raise GarmentError(f"alpha must have {N_PCA} entries, got {a.size}")
    nv = template.n_vertices
    v = template.rest_mesh.vertices + (template.pca_basis @ (template.pca_scales * a)).reshape(nv, 3)
    if displacement is not None:
        d = np.asarray(displacement, dtype=np.float64)
        if d.shape != (nv, 3):
            raise GarmentError(f"displacement must be ({nv}, 3), got {d.shape}")
        v = v + d
    return template.rest_mesh.with_vertices(v)


def garment_mesh(template: GarmentTemplate, params: GarmentParams, weights,
                 body_model: BodyModel, beta, pose: Pose) -> Mesh:
    rest = garment_rest(template, params.alpha, params.displacement_for(template.n_vertices))
    tr = bm.forward_kinematics(bm.joints(body_model, beta), pose.theta, body_model.parents)
    return rest.with_vertices(bm.lbs(rest.vertices, tr, weights) + pose.translation)


# ---------------------------------------------------------------- PCA


@dataclass(frozen=True, eq=False)
class ShapeSpace:
    mean: np.ndarray    # (V, 3)
    basis: np.ndarray   # (3V, n_components)
    scales: np.ndarray  # (n_components,)


def build_pca(corpus, n_components: int = N_PCA, tol: float = 1e-12) -> ShapeSpace:
    """Centered SVD of a registered corpus.

    Columns are ordered by decreasing singular value, each signed so its
    first non-negligible entry is positive. Scales are singular values over
    sqrt(n - 1), i.e. the per-component standard deviation. Directions past
    the corpus rank are filled with an orthonormal completion at zero scale
    (plain zero columns once the vertex space is exhausted).
    """
    meshes = list(corpus)
    if len(meshes) < 2:
        raise GarmentError("PCA needs at least two meshes")
    ref = meshes[0]
    for m in meshes[1:]:
        if m.n_vertices != ref.n_vertices or not np.array_equal(m.faces, ref.faces):
            raise GarmentError("corpus meshes must share template connectivity")
    x = np.stack([m.vertices.reshape(-1) for m in meshes])
    mean = x.mean(axis=0)
    xc = x - mean
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    dim = x.shape[1]
    rank = int(np.sum(s > tol * max(1.0, s[0] if len(s) else 0.0)))
    rank = min(rank, n_components)
    basis = np.zeros((dim, n_components))
    scales = np.zeros(n_components)
    basis[:, :rank] = vt[:rank].T
    scales[:rank] = s[:rank] / np.sqrt(len(meshes) - 1)
    n_fill = min(n_components, dim) - rank
    if n_fill > 0:
        q, _ = np.linalg.qr(np.hstack([basis[:, :rank], np.eye(dim)[:, :rank + n_fill]]))
        basis[:, rank:rank + n_fill] = q[:, rank:rank + n_fill]
    for k in range(n_components):
        col = basis[:, k]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if len(nz) and col[nz[0]] < 0:
            basis[:, k] = -col
    return ShapeSpace(mean.reshape(-1, 3), basis, scales)


def template_from_corpus(category, corpus, segmentation_prior, n_components: int = N_PCA) -> GarmentTemplate:
    space = build_pca(corpus, n_components)
    return GarmentTemplate(category, corpus[0].with_vertices(space.mean), space.basis,
                           space.scales, segmentation_prior)


def project_to_pca(template: GarmentTemplate, mesh: Mesh) -> np.ndarray:
    if mesh.n_vertices != template.n_vertices or not np.array_equal(mesh.faces, template.rest_mesh.faces):
        raise GarmentError("mesh does not match the template connectivity")
    coeff = template.pca_basis.T @ (mesh.vertices - template.rest_mesh.vertices).reshape(-1)
    alpha = np.zeros(N_PCA)
    live = template.pca_scales > 0
    alpha[live] = coeff[live] / template.pca_scales[live]
    return alpha


# ---------------------------------------------------------------- transfer


def retarget_rest(rest_vertices, weights, source_joints, target_joints) -> np.ndarray:
    """Carry a rest garment from one skeleton to another by weighted joint offsets."""
    return rest_vertices + np.asarray(weights) @ (np.asarray(target_joints) - np.asarray(source_joints))


def transfer_garment(template: GarmentTemplate, params: GarmentParams, weights,
                     source_model: BodyModel, source_beta,
                     target_model: BodyModel, target_beta, target_pose: Pose,
                     target_weights=None) -> Mesh:
    """Dress a garment fitted to one body onto another body and pose.

    ``weights`` bind the garment to the source skeleton and carry the rest
    shape across; ``target_weights`` (defaulting to ``weights``) skin it on
    the target skeleton.
    """
    rest = garment_rest(template, params.alpha, params.displacement_for(template.n_vertices))
    j_src = bm.joints(source_model, source_beta)
    j_tgt = bm.joints(target_model, target_beta)
    w = bm._check_weights(weights, rest.n_vertices)
    moved = retarget_rest(rest.vertices, w, j_src, j_tgt)
    w_tgt = w if target_weights is None else target_weights
    tr = bm.forward_kinematics(j_tgt, target_pose.theta, target_model.parents)
    return rest.with_vertices(bm.lbs(moved, tr, w_tgt) + target_pose.translation)
