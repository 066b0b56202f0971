"""Supervision and registration loss terms with analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import body as bm
from .mesh import Mesh, uniform_laplacian, vertex_normals, vertex_normals_vjp

PAIR_MAX_DISTANCE = 0.02
PAIR_MAX_ANGLE = np.deg2rad(60.0)


class BehindCameraError(ValueError):
    pass


@dataclass(frozen=True)
class Camera:
    fx: float = 1000.0
    fy: float = 1000.0
    cx: float = 512.0
    cy: float = 512.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    def to_json(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_json(cls, d) -> "Camera":
        return cls(**{k: float(d[k]) for k in ("fx", "fy", "cx", "cy") if k in d})


@dataclass(frozen=True)
class CorrespondencePair:
    p: int
    q: int
    distance: float
    angle: float


# ---------------------------------------------------------------- parameter terms


def _rot(theta):
    return bm.rodrigues(np.asarray(theta, dtype=np.float64).reshape(bm.N_JOINTS, 3))


def param_losses(pred: dict, gt: dict) -> dict:
    """Squared errors on beta, rotation matrices, translation (body) and alpha (garment).

    Both dicts hold ``beta``, ``theta``, ``translation`` and ``alpha``; a
    missing key contributes nothing.
    """
    lb = 0.0
    if "beta" in pred:
        lb += float(np.sum((np.asarray(pred["beta"]) - np.asarray(gt["beta"])) ** 2))
    if "theta" in pred:
        lb += float(np.sum((_rot(pred["theta"]) - _rot(gt["theta"])) ** 2))
    if "translation" in pred:
        lb += float(np.sum((np.asarray(pred["translation"]) - np.asarray(gt["translation"])) ** 2))
    lg = 0.0
    if "alpha" in pred:
        lg = float(np.sum((np.asarray(pred["alpha"]) - np.asarray(gt["alpha"])) ** 2))
    return {"L_Bp": lb, "L_Gp": lg}


def param_losses_grad(pred: dict, gt: dict) -> dict:
    """Gradient of L_Bp + L_Gp w.r.t. each entry of ``pred``."""
    out = {}
    for k in ("beta", "translation", "alpha"):
        if k in pred:
            out[k] = 2.0 * (np.asarray(pred[k], dtype=np.float64) - np.asarray(gt[k]))
    if "theta" in pred:
        th = np.asarray(pred["theta"], dtype=np.float64).reshape(bm.N_JOINTS, 3)
        diff = 2.0 * (_rot(th) - _rot(gt["theta"]))
        out["theta"] = np.einsum("kcij,kij->kc", bm.rodrigues_jacobian(th), diff).reshape(np.shape(pred["theta"]))
    return out


# ---------------------------------------------------------------- geometry terms


def _points(x):
    return x.vertices if isinstance(x, Mesh) else np.asarray(x, dtype=np.float64).reshape(-1, 3)


def _sq(a, b):
    a, b = _points(a), _points(b)
    if a.shape != b.shape:
        raise ValueError(f"point counts differ: {a.shape} vs {b.shape}")
    return float(np.sum((a - b) ** 2))


def geometry_losses(pred_garment, gt_garment, pred_joints=None, gt_joints=None) -> dict:
    """Summed squared vertex distances (L_G) and joint distances (L_J3D)."""
    lj = 0.0 if pred_joints is None else _sq(pred_joints, gt_joints)
    return {"L_G": _sq(pred_garment, gt_garment), "L_J3D": lj}


def displacement_losses(pred_d, gt_d, garment: Mesh) -> dict:
    """l1 on displacements (L_D1) and squared error of their Laplacian coordinates (L_D2)."""
    a, b = np.asarray(pred_d, dtype=np.float64), np.asarray(gt_d, dtype=np.float64)
    if a.shape != b.shape or a.shape != (garment.n_vertices, 3):
        raise ValueError(f"displacements must both be ({garment.n_vertices}, 3)")
    lap = uniform_laplacian(garment)
    return {"L_D1": float(np.sum(np.abs(a - b))), "L_D2": float(np.sum((lap @ (a - b)) ** 2))}


def displacement_losses_grad(pred_d, gt_d, garment: Mesh) -> dict:
    diff = np.asarray(pred_d, dtype=np.float64) - np.asarray(gt_d)
    lap = uniform_laplacian(garment)
    return {"L_D1": np.sign(diff), "L_D2": 2.0 * (lap.T @ (lap @ diff))}


# ---------------------------------------------------------------- projection


def project(camera: Camera, points) -> np.ndarray:
    p = _points(points)
    if np.any(p[:, 2] <= 1e-6):
        raise BehindCameraError("points at or behind the camera plane")
    return np.stack([camera.fx * p[:, 0] / p[:, 2] + camera.cx,
                     camera.fy * p[:, 1] / p[:, 2] + camera.cy], axis=1)


def unproject(camera: Camera, pixels, depth) -> np.ndarray:
    uv = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    z = np.broadcast_to(np.asarray(depth, dtype=np.float64), (len(uv),))
    return np.stack([(uv[:, 0] - camera.cx) * z / camera.fx, (uv[:, 1] - camera.cy) * z / camera.fy, z], 1)


def projection_loss(camera: Camera, pred, gt) -> float:
    return float(np.sum((project(camera, pred) - project(camera, gt)) ** 2))


def projection_loss_grad(camera: Camera, pred, gt) -> np.ndarray:
    """Gradient of projection_loss w.r.t. the predicted 3D points."""
    p = _points(pred)
    r = 2.0 * (project(camera, p) - project(camera, gt))
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    g = np.empty_like(p)
    g[:, 0] = r[:, 0] * camera.fx / z
    g[:, 1] = r[:, 1] * camera.fy / z
    g[:, 2] = -(r[:, 0] * camera.fx * x + r[:, 1] * camera.fy * y) / z ** 2
    return g


def projection_losses(camera: Camera, pred_body, gt_body, pred_garment, gt_garment) -> dict:
    return {"L_B2D": projection_loss(camera, pred_body, gt_body),
            "L_G2D": projection_loss(camera, pred_garment, gt_garment)}


# ---------------------------------------------------------------- correspondences


def find_pair_arrays(P: Mesh, Q: Mesh, max_distance: float = PAIR_MAX_DISTANCE,
                     max_normal_angle: float = PAIR_MAX_ANGLE, p_normals=None, q_normals=None):
    """Nearest admissible q for every p, as index/distance/angle arrays.

    A q is admissible within ``max_distance`` and with normal angle at most
    ``max_normal_angle``; among admissible candidates the nearest wins
    (ties to the lower index).
    """
    pn = vertex_normals(P) if p_normals is None else p_normals
    qn = vertex_normals(Q) if q_normals is None else q_normals
    empty = (np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0), np.zeros(0))
    if P.n_vertices == 0 or Q.n_vertices == 0:
        return empty
    tree = cKDTree(Q.vertices)
    cand = tree.query_ball_point(P.vertices, max_distance * (1 + 1e-9) + 1e-12)
    lens = np.fromiter((len(c) for c in cand), dtype=np.int64, count=len(cand))
    if lens.sum() == 0:
        return empty
    pi = np.repeat(np.arange(P.n_vertices), lens)
    qj = np.concatenate([np.asarray(c, dtype=np.int64) for c in cand if len(c)])
    d = np.linalg.norm(P.vertices[pi] - Q.vertices[qj], axis=1)
    cos = np.clip(np.sum(pn[pi] * qn[qj], axis=1), -1.0, 1.0)
    ang = np.arccos(cos)
    ok = (d <= max_distance) & (ang <= max_normal_angle)
    pi, qj, d, ang = pi[ok], qj[ok], d[ok], ang[ok]
    order = np.lexsort((qj, d, pi))
    pi, qj, d, ang = pi[order], qj[order], d[order], ang[order]
    first = np.ones(len(pi), bool)
    first[1:] = pi[1:] != pi[:-1]
    return pi[first], qj[first], d[first], ang[first]


def find_pairs(P: Mesh, Q: Mesh, max_distance: float = PAIR_MAX_DISTANCE,
               max_normal_angle: float = PAIR_MAX_ANGLE) -> list:
    return [CorrespondencePair(int(a), int(b), float(c), float(e))
            for a, b, c, e in zip(*find_pair_arrays(P, Q, max_distance, max_normal_angle))]


def pair_indices(pairs):
    """(p_idx, q_idx) arrays from a list of CorrespondencePair or an index tuple."""
    if isinstance(pairs, tuple):
        return np.asarray(pairs[0], dtype=np.int64), np.asarray(pairs[1], dtype=np.int64)
    return (np.fromiter((c.p for c in pairs), np.int64, len(pairs)),
            np.fromiter((c.q for c in pairs), np.int64, len(pairs)))


# ---------------------------------------------------------------- interpenetration


def interpenetration_loss(P: Mesh, Q: Mesh, pairs, q_normals=None) -> float:
    """Mean over pairs of relu(-n_q . (p - q)); zero when there are no pairs."""
    pi, qj = pair_indices(pairs)
    if len(pi) == 0:
        return 0.0
    qn = vertex_normals(Q) if q_normals is None else q_normals
    depth = -np.sum(qn[qj] * (P.vertices[pi] - Q.vertices[qj]), axis=1)
    return float(np.sum(np.maximum(depth, 0.0)) / len(pi))


def interpenetration_grad(P: Mesh, Q: Mesh, pairs):
    """Gradients of interpenetration_loss w.r.t. P and Q vertices (Q normals included)."""
    pi, qj = pair_indices(pairs)
    gp = np.zeros_like(P.vertices)
    gq = np.zeros_like(Q.vertices)
    if len(pi) == 0:
        return gp, gq
    qn = vertex_normals(Q)
    diff = P.vertices[pi] - Q.vertices[qj]
    active = (-np.sum(qn[qj] * diff, axis=1) > 0).astype(np.float64)[:, None] / len(pi)
    np.add.at(gp, pi, -active * qn[qj])
    np.add.at(gq, qj, active * qn[qj])
    g_n = np.zeros_like(Q.vertices)
    np.add.at(g_n, qj, -active * diff)
    return gp, gq + vertex_normals_vjp(Q, g_n)


def layered_interpenetration(garment_rest: Mesh, body_rest: Mesh, garment_posed: Mesh, body_posed: Mesh,
                             max_distance: float = PAIR_MAX_DISTANCE,
                             max_normal_angle: float = PAIR_MAX_ANGLE) -> dict:
    """Garment-inside-body penalty in the neutral and the posed configuration."""
    rest = interpenetration_loss(garment_rest, body_rest,
                                 find_pair_arrays(garment_rest, body_rest, max_distance, max_normal_angle))
    posed = interpenetration_loss(garment_posed, body_posed,
                                  find_pair_arrays(garment_posed, body_posed, max_distance, max_normal_angle))
    return {"rest": rest, "posed": posed, "L_inters": rest + posed}


# ---------------------------------------------------------------- point to plane


def point_to_plane(source: Mesh, target: Mesh, pairs, target_normals=None) -> float:
    """Mean over pairs of (n_q . (p - q))^2; zero without pairs."""
    pi, qj = pair_indices(pairs)
    if len(pi) == 0:
        return 0.0
    qn = vertex_normals(target) if target_normals is None else target_normals
    r = np.sum(qn[qj] * (source.vertices[pi] - target.vertices[qj]), axis=1)
    return float(np.mean(r * r))


def point_to_plane_grad(source: Mesh, target: Mesh, pairs, target_normals=None) -> np.ndarray:
    """Gradient w.r.t. source vertices; the target is held fixed."""
    pi, qj = pair_indices(pairs)
    g = np.zeros_like(source.vertices)
    if len(pi) == 0:
        return g
    qn = vertex_normals(target) if target_normals is None else target_normals
    r = np.sum(qn[qj] * (source.vertices[pi] - target.vertices[qj]), axis=1)
    np.add.at(g, pi, (2.0 / len(pi)) * r[:, None] * qn[qj])
    return g
