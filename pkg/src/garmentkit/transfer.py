"""Garment skinning weights from a dressed body: filtered K-NN, IDW, smoothing."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import body as bm
from .body import BodyModel, Pose, N_JOINTS
from .mesh import Mesh, laplacian_smooth_field, vertex_normals
from .synth import GARMENT_COMPATIBILITY

COINCIDENT = 1e-9


@dataclass(frozen=True)
class TransferConfig:
    k: int = 4
    max_distance: float = 0.05
    max_normal_angle: float = np.deg2rad(60.0)
    idw_power: float = 2.0
    smooth_iterations: int = 10
    smooth_lambda: float = 0.5
    compatibility: dict = field(default_factory=lambda: dict(GARMENT_COMPATIBILITY))

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.max_distance <= 0:
            raise ValueError("max_distance must be positive")
        if self.idw_power <= 0:
            raise ValueError("idw_power must be positive")

    def compatible(self, garment_tag: int, body_tags: np.ndarray) -> np.ndarray:
        allowed = self.compatibility.get(int(garment_tag), (int(garment_tag),))
        return np.isin(body_tags, allowed)

    def to_json(self) -> dict:
        return {"k": self.k, "max_distance": self.max_distance,
                "max_normal_angle": self.max_normal_angle, "idw_power": self.idw_power,
                "smooth_iterations": self.smooth_iterations, "smooth_lambda": self.smooth_lambda}

    @classmethod
    def from_json(cls, d) -> "TransferConfig":
        return cls(**{k: v for k, v in d.items() if k != "compatibility"})


def check_simplex(weights, tol: float = 1e-6) -> None:
    w = np.asarray(weights)
    if w.ndim != 2 or w.shape[1] != N_JOINTS:
        raise ValueError(f"weights must have {N_JOINTS} columns")
    if w.min(initial=0.0) < 0 or np.abs(w.sum(axis=1) - 1).max(initial=0.0) > tol:
        raise ValueError("weight rows are not on the simplex")


def save_weights(weights, path) -> None:
    Path(path).write_text(json.dumps({"weights": np.asarray(weights).tolist()}))


def load_weights(path) -> np.ndarray:
    with open(path) as fh:
        w = np.asarray(json.load(fh)["weights"], dtype=np.float64)
    check_simplex(w, tol=1e-4)
    return w


# ---------------------------------------------------------------- neighbour selection


def _tags(mesh: Mesh):
    return np.full(mesh.n_vertices, -1) if mesh.labels is None else mesh.labels


def _sorted_pairs(dist, idx):
    order = np.lexsort((idx, dist), axis=-1)
    return np.take_along_axis(dist, order, -1), np.take_along_axis(idx, order, -1)


def select_neighbors(garment: Mesh, body: Mesh, config: TransferConfig,
                     garment_normals=None, body_normals=None):
    """Donor body vertices per garment vertex.

    Returns ``(idx, dist)`` arrays of shape (Ng, K): indices are -1 and
    distances +inf where fewer than K donors pass the filters.
    """
    gv, bv = garment.vertices, body.vertices
    gn = vertex_normals(garment) if garment_normals is None else garment_normals
    bn = vertex_normals(body) if body_normals is None else body_normals
    gt, btag = _tags(garment), _tags(body)
    k = config.k
    cos_max = np.cos(config.max_normal_angle)
    idx_out = np.full((len(gv), k), -1, dtype=np.int64)
    dist_out = np.full((len(gv), k), np.inf)
    for tag in np.unique(gt):
        rows = np.flatnonzero(gt == tag)
        allowed = np.ones(len(bv), bool) if tag < 0 else config.compatible(tag, btag)
        pool = np.flatnonzero(allowed)
        found = np.zeros(len(rows), bool)
        if len(pool):
            tree = cKDTree(bv[pool])
            kq = min(len(pool), max(4 * k, 16))
            todo = np.arange(len(rows))
            while len(todo):
                d_, j_ = tree.query(gv[rows[todo]], k=kq,
                                    distance_upper_bound=config.max_distance * (1 + 1e-9) + 1e-12)
                d_, j_ = d_.reshape(len(todo), kq), j_.reshape(len(todo), kq)
                hit = np.isfinite(d_)
                cand = np.where(hit, pool[np.minimum(j_, len(pool) - 1)], -1)
                p = gv[rows[todo]]
                dist = np.linalg.norm(bv[np.maximum(cand, 0)] - p[:, None, :], axis=-1)
                cosang = np.sum(bn[np.maximum(cand, 0)] * gn[rows[todo]][:, None, :], axis=-1)
                ok = hit & (dist <= config.max_distance) & (cosang >= cos_max)
                dist = np.where(ok, dist, np.inf)
                cand = np.where(ok, cand, np.iinfo(np.int64).max)
                dist, cand = _sorted_pairs(dist, cand)
                n_ok = ok.sum(axis=1)
                # all kq slots in range and too few accepted: there may be more donors further out
                again = (n_ok < k) & hit.all(axis=1) & (kq < len(pool))
                done = ~again
                take = min(k, kq)
                r = rows[todo[done]]
                c, dd = cand[done, :take], dist[done, :take]
                good = np.isfinite(dd)
                idx_out[r, :take] = np.where(good, c, -1)
                dist_out[r, :take] = dd
                found[todo[done]] = n_ok[done] > 0
                todo = todo[again]
                kq = min(len(pool), 2 * kq)
        for rr in np.flatnonzero(~found):
            i = rows[rr]
            idx_out[i], dist_out[i] = _fallback(gv[i], bv, allowed, k)
    return idx_out, dist_out


def _fallback(point, body_vertices, allowed, k):
    """Nearest K by distance only, compatible vertices ranked first."""
    d = np.linalg.norm(body_vertices - point, axis=1)
    order = np.lexsort((np.arange(len(d)), d, ~allowed))[:k]
    idx = np.full(k, -1, dtype=np.int64)
    dist = np.full(k, np.inf)
    idx[:len(order)] = order
    dist[:len(order)] = d[order]
    return idx, dist


def candidate_neighbors(vertex: int, garment: Mesh, body: Mesh, config: TransferConfig | None = None):
    config = config or TransferConfig()
    idx, _ = select_neighbors(garment, body, config)
    row = idx[vertex]
    return [int(i) for i in row if i >= 0]


# ---------------------------------------------------------------- IDW


def idw_weights(idx, dist, body_weights, power: float) -> np.ndarray:
    """Inverse-distance blend of donor rows; exact coincidence copies the donor."""
    ng, k = idx.shape
    valid = idx >= 0
    safe = np.where(valid, idx, 0)
    far = valid & (dist >= COINCIDENT)
    inv = np.where(far, np.where(far, dist, 1.0) ** (-power), 0.0)
    num = np.zeros((ng, body_weights.shape[1]))
    for c in range(k):
        num += inv[:, c, None] * body_weights[safe[:, c]]
    den = inv.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = num / den[:, None]
    coincident = valid & (dist < COINCIDENT)
    hit = coincident.any(axis=1)
    first = np.argmax(coincident, axis=1)
    out[hit] = body_weights[safe[hit, first[hit]]]
    return out


def normalize_rows(w) -> np.ndarray:
    w = np.clip(w, 0.0, 1.0)
    s = w.sum(axis=1, keepdims=True)
    # rows already on the simplex up to roundoff are left bit-identical
    s = np.where(np.abs(s - 1.0) <= 64 * np.finfo(float).eps, 1.0, s)
    return w / s


def idw_transfer(garment: Mesh, body: Mesh, body_weights, config: TransferConfig | None = None) -> np.ndarray:
    """Garment weights from the dressed neutral body.

    ``garment.labels`` and ``body.labels`` carry the segmentation tags used
    by the part filter; missing labels disable it.
    """
    config = config or TransferConfig()
    if garment.n_vertices == 0:
        raise ValueError("garment mesh is empty")
    bw = np.asarray(body_weights, dtype=np.float64)
    check_simplex(bw)
    idx, dist = select_neighbors(garment, body, config)
    w = idw_weights(idx, dist, bw, config.idw_power)
    if config.smooth_iterations > 0:
        w = laplacian_smooth_field(garment, w, config.smooth_iterations, config.smooth_lambda)
    return normalize_rows(w)


# ---------------------------------------------------------------- evaluation


def deform_with_weights(garment: Mesh, weights, body_model: BodyModel, beta, pose: Pose) -> Mesh:
    tr = bm.forward_kinematics(bm.joints(body_model, beta), pose.theta, body_model.parents)
    return garment.with_vertices(bm.lbs(garment.vertices, tr, weights) + pose.translation)


def weight_errors(pred, gt, garment: Mesh, body_model: BodyModel, beta, poses):
    """Raw error samples: |pred - gt| entries and per-vertex-per-pose distances (m)."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[0] != garment.n_vertices:
        raise ValueError(f"weight shapes {pred.shape} / {gt.shape} do not match {garment.n_vertices} vertices")
    l1 = np.abs(pred - gt).ravel()
    j = bm.joints(body_model, beta)
    dists = []
    for pose in poses:
        tr = bm.forward_kinematics(j, pose.theta, body_model.parents)
        a = bm.lbs(garment.vertices, tr, pred)
        b = bm.lbs(garment.vertices, tr, gt)
        dists.append(np.linalg.norm(a - b, axis=1))
    return l1, (np.concatenate(dists) if dists else np.zeros(0))


def summarize_errors(l1, dist) -> dict:
    return {
        "l1_mean": float(np.mean(l1)), "l1_std": float(np.std(l1)),
        "med_mean": float(np.mean(dist) * 1000.0) if len(dist) else 0.0,
        "med_std": float(np.std(dist) * 1000.0) if len(dist) else 0.0,
    }


def weight_metrics(pred, gt, garment: Mesh, body_model: BodyModel, beta, poses) -> dict:
    """l1 mean/std over weight entries; MED mean/std (mm) of the deformed garment."""
    return summarize_errors(*weight_errors(pred, gt, garment, body_model, beta, poses))


def random_poses(n: int, seed: int, sigma: float = 0.2) -> list:
    """Per-joint axis-angle components ~ N(0, sigma^2) with the root held fixed."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        th = rng.normal(0.0, sigma, size=(N_JOINTS, 3))
        th[0] = 0.0
        out.append(Pose(th))
    return out
