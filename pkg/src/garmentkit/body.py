"""SMPL-style skinned body: blend shapes, joint regression, kinematics and LBS."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mesh import Mesh

N_JOINTS = 24
N_BETAS = 10
N_POSE_FEATURES = 9 * (N_JOINTS - 1)

JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder",
    "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
    "left_hand", "right_hand",
)
SMPL_PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21)

# Body-part tags shared by body vertices and garment segmentation priors.
TORSO, LEFT_LEG, RIGHT_LEG, LEFT_ARM, RIGHT_ARM, HEAD, LOWER_BODY = range(7)
PART_NAMES = ("torso", "left_leg", "right_leg", "left_arm", "right_arm", "head", "lower_body")
JOINT_PART = (
    TORSO, LEFT_LEG, RIGHT_LEG, TORSO, LEFT_LEG, RIGHT_LEG, TORSO, LEFT_LEG, RIGHT_LEG,
    TORSO, LEFT_LEG, RIGHT_LEG, TORSO, LEFT_ARM, RIGHT_ARM, HEAD, LEFT_ARM, RIGHT_ARM,
    LEFT_ARM, RIGHT_ARM, LEFT_ARM, RIGHT_ARM, LEFT_ARM, RIGHT_ARM,
)


class BodyModelError(ValueError):
    pass


class SkinningError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Pose:
    theta: np.ndarray = field(default_factory=lambda: np.zeros((N_JOINTS, 3)))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        th = np.asarray(self.theta, dtype=np.float64).reshape(N_JOINTS, 3)
        tr = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(th)) and np.all(np.isfinite(tr))):
            raise ValueError("pose contains non-finite values")
        object.__setattr__(self, "theta", th)
        object.__setattr__(self, "translation", tr)

    @classmethod
    def rest(cls, translation=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(np.zeros((N_JOINTS, 3)), translation)

    def to_json(self) -> dict:
        return {"theta": self.theta.ravel().tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_json(cls, d) -> "Pose":
        return cls(np.asarray(d["theta"], dtype=np.float64), d.get("translation", [0.0, 0.0, 0.0]))


@dataclass(frozen=True, eq=False)
class BodyModel:
    template: Mesh
    shape_basis: np.ndarray      # (3V, 10)
    pose_basis: np.ndarray       # (3V, 207)
    joint_regressor: np.ndarray  # (24, V)
    weights: np.ndarray          # (V, 24)
    parents: tuple = SMPL_PARENTS

    def __post_init__(self):
        nv = self.template.n_vertices
        sb = np.asarray(self.shape_basis, dtype=np.float64)
        pb = np.asarray(self.pose_basis, dtype=np.float64)
        jr = np.asarray(self.joint_regressor, dtype=np.float64)
        w = np.asarray(self.weights, dtype=np.float64)
        parents = tuple(int(p) for p in self.parents)
        if sb.shape != (3 * nv, N_BETAS):
            raise BodyModelError(f"shape_basis must be ({3 * nv}, {N_BETAS}), got {sb.shape}")
        if pb.shape != (3 * nv, N_POSE_FEATURES):
            raise BodyModelError(f"pose_basis must be ({3 * nv}, {N_POSE_FEATURES}), got {pb.shape}")
        if jr.shape != (N_JOINTS, nv):
            raise BodyModelError(f"joint_regressor must be ({N_JOINTS}, {nv}), got {jr.shape}")
        if w.shape != (nv, N_JOINTS):
            raise BodyModelError(f"weights must be ({nv}, {N_JOINTS}), got {w.shape}")
        if jr.min() < 0 or np.abs(jr.sum(axis=1) - 1).max() > 1e-6:
            raise BodyModelError("joint_regressor rows must be non-negative and sum to 1")
        if w.min() < 0 or np.abs(w.sum(axis=1) - 1).max() > 1e-6:
            raise BodyModelError("skinning weight rows must be non-negative and sum to 1")
        _check_tree(parents)
        object.__setattr__(self, "shape_basis", sb)
        object.__setattr__(self, "pose_basis", pb)
        object.__setattr__(self, "joint_regressor", jr)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "parents", parents)

    @property
    def n_vertices(self) -> int:
        return self.template.n_vertices

    def part_labels(self) -> np.ndarray:
        """Body-part tag of each vertex: template labels if present, else the dominant bone's part."""
        if self.template.labels is not None:
            return self.template.labels
        return np.asarray(JOINT_PART)[np.argmax(self.weights, axis=1)]

    def to_json(self) -> dict:
        d = {
            "vertices": self.template.vertices.tolist(),
            "faces": self.template.faces.tolist(),
            "shape_basis": self.shape_basis.tolist(),
            "pose_basis": self.pose_basis.tolist(),
            "joint_regressor": self.joint_regressor.tolist(),
            "weights": self.weights.tolist(),
            "parents": list(self.parents),
        }
        if self.template.labels is not None:
            d["labels"] = self.template.labels.tolist()
        return d

    @classmethod
    def from_json(cls, d) -> "BodyModel":
        parents = [-1 if p is None else int(p) for p in d["parents"]]
        return cls(
            template=Mesh(np.asarray(d["vertices"], dtype=np.float64), np.asarray(d["faces"], dtype=np.int64),
                          None if d.get("labels") is None else np.asarray(d["labels"], dtype=np.int64)),
            shape_basis=np.asarray(d["shape_basis"], dtype=np.float64),
            pose_basis=np.asarray(d["pose_basis"], dtype=np.float64),
            joint_regressor=np.asarray(d["joint_regressor"], dtype=np.float64),
            weights=np.asarray(d["weights"], dtype=np.float64),
            parents=tuple(parents),
        )


def _check_tree(parents):
    if len(parents) != N_JOINTS or parents[0] != -1:
        raise BodyModelError("parents must list 24 joints with parent[0] = -1")
    for j in range(1, N_JOINTS):
        # Parents must precede children; this also rules out cycles.
        if not 0 <= parents[j] < j:
            raise BodyModelError(f"joint {j} has invalid parent {parents[j]}")


def save_body_model(model: BodyModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_json()))


def load_body_model(path) -> BodyModel:
    with open(path) as fh:
        return BodyModel.from_json(json.load(fh))


def import_smpl_arrays(d) -> BodyModel:
    """Build a model from a JSON export of SMPL arrays.

    Accepts the usual SMPL key names (``v_template``, ``f``, ``shapedirs``
    as (V, 3, >=10), ``posedirs`` as (V, 3, 207), ``J_regressor``,
    ``weights``, ``kintree_table``).
    """
    v = np.asarray(d["v_template"], dtype=np.float64)
    nv = len(v)
    shapedirs = np.asarray(d["shapedirs"], dtype=np.float64)[:, :, :N_BETAS].reshape(3 * nv, N_BETAS)
    posedirs = np.asarray(d["posedirs"], dtype=np.float64).reshape(3 * nv, N_POSE_FEATURES)
    kt = np.asarray(d["kintree_table"], dtype=np.int64)
    parents = [-1] + [int(p) for p in kt[0, 1:]]
    jr = np.asarray(d["J_regressor"], dtype=np.float64)
    jr = np.clip(jr, 0.0, None)
    jr = jr / jr.sum(axis=1, keepdims=True)
    return BodyModel(Mesh(v, np.asarray(d["f"], dtype=np.int64)), shapedirs, posedirs, jr,
                     np.asarray(d["weights"], dtype=np.float64), tuple(parents))


# ---------------------------------------------------------------- rotations


def _skew(w):
    w = np.asarray(w, dtype=np.float64)
    z = np.zeros(w.shape[:-1])
    return np.stack([
        np.stack([z, -w[..., 2], w[..., 1]], -1),
        np.stack([w[..., 2], z, -w[..., 0]], -1),
        np.stack([-w[..., 1], w[..., 0], z], -1),
    ], -2)


_SMALL_ANGLE = 1e-6


def rodrigues(axis_angle) -> np.ndarray:
    """Axis-angle vector(s) (..., 3) to rotation matrices (..., 3, 3)."""
    w = np.asarray(axis_angle, dtype=np.float64)
    theta = np.linalg.norm(w, axis=-1)
    k = _skew(w)
    k2 = k @ k
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta ** 2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta ** 2 / 24.0, (1.0 - np.cos(safe)) / safe ** 2)
    return np.eye(3) + a[..., None, None] * k + b[..., None, None] * k2


def rodrigues_jacobian(axis_angle) -> np.ndarray:
    """dR/dw_c for each component c: array (..., 3, 3, 3) indexed [..., c, i, j]."""
    w = np.asarray(axis_angle, dtype=np.float64)
    lead = w.shape[:-1]
    w2 = w.reshape(-1, 3)
    out = np.empty((len(w2), 3, 3, 3))
    eye = np.eye(3)
    for n, v in enumerate(w2):
        th2 = float(v @ v)
        if th2 < _SMALL_ANGLE ** 2:
            kv = _skew(v)
            for c in range(3):
                ke = _skew(eye[c])
                out[n, c] = ke + 0.5 * (ke @ kv + kv @ ke)
            continue
        r = rodrigues(v)
        kv = _skew(v)
        imr = eye - r
        for c in range(3):
            # Gallego & Yezzi closed form
            out[n, c] = (v[c] * kv + _skew(np.cross(v, imr[:, c]))) @ r / th2
    return out.reshape(lead + (3, 3, 3))


def pose_features(theta) -> np.ndarray:
    """Vectorized (R(theta_j) - I) over the 23 non-root joints."""
    rot = rodrigues(np.asarray(theta, dtype=np.float64).reshape(N_JOINTS, 3))
    return (rot[1:] - np.eye(3)).reshape(-1)


# ---------------------------------------------------------------- model evaluation


def _check_beta(beta):
    b = np.asarray(beta, dtype=np.float64).reshape(-1)
    if b.shape != (N_BETAS,):
        raise BodyModelError(f"beta must have {N_BETAS} entries, got {b.size}")
    return b


def shaped_vertices(model: BodyModel, beta) -> np.ndarray:
    b = _check_beta(beta)
    return model.template.vertices + (model.shape_basis @ b).reshape(-1, 3)


def rest_body(model: BodyModel, beta, theta=None) -> Mesh:
    v = shaped_vertices(model, beta)
    if theta is not None:
        th = np.asarray(theta, dtype=np.float64)
        if th.size != 3 * N_JOINTS:
            raise BodyModelError(f"theta must have {3 * N_JOINTS} entries, got {th.size}")
        v = v + (model.pose_basis @ pose_features(th)).reshape(-1, 3)
    return model.template.with_vertices(v)


def joints(model: BodyModel, beta) -> np.ndarray:
    return model.joint_regressor @ shaped_vertices(model, beta)


def forward_kinematics(joint_positions, theta, parents=SMPL_PARENTS) -> np.ndarray:
    """Rest-to-posed 4x4 transforms (rest joint positions subtracted)."""
    j = np.asarray(joint_positions, dtype=np.float64).reshape(N_JOINTS, 3)
    rot = rodrigues(np.asarray(theta, dtype=np.float64).reshape(N_JOINTS, 3))
    glob = _global_transforms(j, rot, parents)
    out = glob.copy()
    out[:, :3, 3] = glob[:, :3, 3] - np.einsum("kij,kj->ki", glob[:, :3, :3], j)
    return out


def _global_transforms(j, rot, parents):
    glob = np.zeros((N_JOINTS, 4, 4))
    glob[:, 3, 3] = 1.0
    glob[0, :3, :3] = rot[0]
    glob[0, :3, 3] = j[0]
    for k in range(1, N_JOINTS):
        p = parents[k]
        glob[k, :3, :3] = glob[p, :3, :3] @ rot[k]
        glob[k, :3, 3] = glob[p, :3, :3] @ (j[k] - j[p]) + glob[p, :3, 3]
    return glob


def forward_kinematics_vjp(joint_positions, theta, grad_transforms, parents=SMPL_PARENTS):
    """Reverse-mode pass through ``forward_kinematics``.

    ``grad_transforms`` is dE/dS for the top 3x4 block of each returned
    transform. Returns (dE/djoints (24, 3), dE/dtheta (24, 3)).
    """
    j = np.asarray(joint_positions, dtype=np.float64).reshape(N_JOINTS, 3)
    th = np.asarray(theta, dtype=np.float64).reshape(N_JOINTS, 3)
    rot = rodrigues(th)
    glob = _global_transforms(j, rot, parents)
    gs = np.asarray(grad_transforms, dtype=np.float64)[:, :3, :4]
    rg, tg = glob[:, :3, :3], glob[:, :3, 3]
    g_j = -np.einsum("kji,kj->ki", rg, gs[:, :, 3])
    g_rg = gs[:, :, :3] - gs[:, :, 3][:, :, None] * j[:, None, :]
    g_tg = gs[:, :, 3].copy()
    g_rot = np.zeros((N_JOINTS, 3, 3))
    for k in range(N_JOINTS - 1, 0, -1):
        p = parents[k]
        tau = j[k] - j[p]
        g_rot[k] = rg[p].T @ g_rg[k]
        g_tau = rg[p].T @ g_tg[k]
        g_rg[p] += g_rg[k] @ rot[k].T + np.outer(g_tg[k], tau)
        g_tg[p] += g_tg[k]
        g_j[k] += g_tau
        g_j[p] -= g_tau
    g_rot[0] = g_rg[0]
    g_j[0] += g_tg[0]
    jac = rodrigues_jacobian(th)  # (24, 3, 3, 3)
    g_theta = np.einsum("kcij,kij->kc", jac, g_rot)
    return g_j, g_theta


def _check_weights(weights, n):
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n, N_JOINTS):
        raise SkinningError(f"weights must be ({n}, {N_JOINTS}), got {w.shape}")
    dev = np.abs(w.sum(axis=1) - 1.0)
    if dev.max(initial=0.0) > 1e-4:
        raise SkinningError(f"weight row {int(np.argmax(dev))} sums to {w.sum(axis=1)[np.argmax(dev)]:.6f}")
    return w


def blend_transforms(transforms, weights) -> np.ndarray:
    return np.einsum("vk,kij->vij", weights, transforms[:, :3, :])


def lbs(rest_vertices, transforms, weights) -> np.ndarray:
    v = np.asarray(rest_vertices, dtype=np.float64).reshape(-1, 3)
    w = _check_weights(weights, len(v))
    t = blend_transforms(np.asarray(transforms, dtype=np.float64), w)
    return np.einsum("vij,vj->vi", t[:, :, :3], v) + t[:, :, 3]


def lbs_vjp(rest_vertices, transforms, weights, grad_out):
    """Gradients of E w.r.t. rest vertices and the 3x4 transform blocks."""
    v = np.asarray(rest_vertices, dtype=np.float64).reshape(-1, 3)
    t = blend_transforms(np.asarray(transforms, dtype=np.float64), weights)
    g_v = np.einsum("vij,vi->vj", t[:, :, :3], grad_out)
    vh = np.concatenate([v, np.ones((len(v), 1))], axis=1)
    g_t = np.einsum("vk,vi,vj->kij", weights, grad_out, vh)
    return g_v, g_t


def body_mesh(model: BodyModel, beta, pose: Pose) -> Mesh:
    rest = rest_body(model, beta, pose.theta)
    tr = forward_kinematics(joints(model, beta), pose.theta, model.parents)
    posed = lbs(rest.vertices, tr, model.weights) + pose.translation
    return rest.with_vertices(posed)


def posed_joints(model: BodyModel, beta, pose: Pose) -> np.ndarray:
    j = joints(model, beta)
    tr = forward_kinematics(j, pose.theta, model.parents)
    return np.einsum("kij,kj->ki", tr[:, :3, :3], j) + tr[:, :3, 3] + pose.translation
