"""Fit body and garment parameters to a segmented target scan.

The energy is evaluated in millimetres so that the data terms and the
unitless regularizers on alpha and beta live on comparable scales.
Correspondences are re-found at the start of every iteration and held
fixed for the line search, so each accepted step decreases the energy it
was taken on.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import body as bm
from .body import BodyModel, Pose, N_BETAS, N_JOINTS
from .garment import N_PCA, GarmentParams, GarmentTemplate
from .losses import (PAIR_MAX_ANGLE, PAIR_MAX_DISTANCE, find_pair_arrays, interpenetration_grad,
                     interpenetration_loss, point_to_plane, point_to_plane_grad)
from .mesh import Mesh, point_triangle_distance, vertex_normals

log = logging.getLogger(__name__)

MM = 1000.0


class FitDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TermWeights:
    point_to_plane: float = 1.0
    point_to_point: float = 1.0
    interpenetration: float = 10.0
    reg_alpha: float = 1e-3
    reg_beta: float = 1e-3
    reg_disp: float = 1e-1

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"term weight {k} must be non-negative")


@dataclass(frozen=True)
class FitSettings:
    max_iters: int = 400
    optimizer: str = "lbfgs"          # "lbfgs", "momentum" or "adam"
    lr: float = 1.0                   # initial trial step (lbfgs/momentum) or Adam step size
    momentum: float = 0.9
    convergence_tol: float = 1e-6
    patience: int = 5
    disp_release: float = 0.5         # fraction of iterations with D frozen
    data_max_distance: float = 0.05
    data_max_angle: float = np.deg2rad(60.0)
    pair_max_distance: float = PAIR_MAX_DISTANCE
    pair_max_angle: float = PAIR_MAX_ANGLE
    history: int = 10
    max_backtracks: int = 40

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.optimizer not in ("lbfgs", "momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass(frozen=True)
class FitParams:
    alpha: np.ndarray
    displacement: np.ndarray
    beta: np.ndarray
    theta: np.ndarray
    translation: np.ndarray

    @classmethod
    def zeros(cls, n_garment_vertices: int) -> "FitParams":
        return cls(np.zeros(N_PCA), np.zeros((n_garment_vertices, 3)), np.zeros(N_BETAS),
                   np.zeros((N_JOINTS, 3)), np.zeros(3))

    def __post_init__(self):
        for k in ("alpha", "displacement", "beta", "theta", "translation"):
            a = np.array(getattr(self, k), dtype=np.float64)
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{k} contains non-finite values")
            object.__setattr__(self, k, a)
        object.__setattr__(self, "theta", self.theta.reshape(N_JOINTS, 3))
        object.__setattr__(self, "displacement", self.displacement.reshape(-1, 3))

    @property
    def pose(self) -> Pose:
        return Pose(self.theta, self.translation)

    @property
    def garment(self) -> GarmentParams:
        return GarmentParams(self.alpha, self.displacement)

    def to_json(self) -> dict:
        return {"alpha": self.alpha.tolist(), "displacement": self.displacement.tolist(),
                "beta": self.beta.tolist(), "theta": self.theta.ravel().tolist(),
                "translation": self.translation.tolist()}

    @classmethod
    def from_json(cls, d, n_garment_vertices: int) -> "FitParams":
        disp = d.get("displacement")
        return cls(d.get("alpha", np.zeros(N_PCA)),
                   np.zeros((n_garment_vertices, 3)) if disp is None else disp,
                   d.get("beta", np.zeros(N_BETAS)), d.get("theta", np.zeros(3 * N_JOINTS)),
                   d.get("translation", np.zeros(3)))


@dataclass(frozen=True, eq=False)
class FitProblem:
    target_garment: Mesh
    target_skin: Mesh
    body_model: BodyModel
    template: GarmentTemplate
    garment_weights: np.ndarray
    weights: TermWeights = field(default_factory=TermWeights)
    settings: FitSettings = field(default_factory=FitSettings)

    def __post_init__(self):
        w = bm._check_weights(self.garment_weights, self.template.n_vertices)
        object.__setattr__(self, "garment_weights", w)


@dataclass
class FitResult:
    params: FitParams
    energy_trace: list        # energy after each accepted step, under that iteration's pairs
    start_trace: list         # energy before each step, same pairs
    terms: dict
    residual_med_mm: float
    converged: bool
    iterations: int
    initial_energy_final_pairs: float = float("nan")
    final_energy: float = float("nan")
    stage1: "FitResult | None" = None

    def to_json(self) -> dict:
        d = {"params": self.params.to_json(), "energy_trace": list(map(float, self.energy_trace)),
             "start_trace": list(map(float, self.start_trace)), "terms": self.terms,
             "residual_med_mm": self.residual_med_mm, "converged": self.converged,
             "iterations": self.iterations, "final_energy": self.final_energy,
             "initial_energy_final_pairs": self.initial_energy_final_pairs}
        if self.stage1 is not None:
            d["stage1"] = self.stage1.to_json()
        return d


def split_target(mesh: Mesh, labels, garment_label: int = 1):
    """(garment, skin) sub-meshes of a segmented scan; faces must not straddle labels."""
    lab = np.asarray(labels, dtype=np.int64)
    if lab.shape != (mesh.n_vertices,):
        raise ValueError(f"{lab.size} labels for {mesh.n_vertices} vertices")
    out = []
    for sel in (lab == garment_label, lab != garment_label):
        keep = sel[mesh.faces].all(axis=1)
        remap = np.full(mesh.n_vertices, -1)
        remap[sel] = np.arange(int(sel.sum()))
        out.append(Mesh(mesh.vertices[sel], remap[mesh.faces[keep]]))
    return out[0], out[1]


def join_scan(garment: Mesh, skin: Mesh, garment_label: int = 1):
    """Inverse of split_target: one mesh plus per-vertex labels (garment first)."""
    mesh = Mesh(np.vstack([garment.vertices, skin.vertices]),
                np.vstack([garment.faces, skin.faces + garment.n_vertices]))
    labels = np.concatenate([np.full(garment.n_vertices, garment_label),
                             np.full(skin.n_vertices, 0 if garment_label != 0 else -1)])
    return mesh, labels


# ---------------------------------------------------------------- model evaluation


@dataclass
class _Eval:
    shaped: np.ndarray
    body_rest: np.ndarray
    joints: np.ndarray
    transforms: np.ndarray
    body: Mesh
    garment_rest0: np.ndarray
    garment_rest: np.ndarray
    garment: Mesh


def _evaluate(problem: FitProblem, prm: FitParams) -> _Eval:
    m, t = problem.body_model, problem.template
    shaped = bm.shaped_vertices(m, prm.beta)
    rest = shaped + (m.pose_basis @ bm.pose_features(prm.theta)).reshape(-1, 3)
    j = m.joint_regressor @ shaped
    tr = bm.forward_kinematics(j, prm.theta, m.parents)
    vb = bm.lbs(rest, tr, m.weights) + prm.translation
    g0 = t.rest_mesh.vertices + (t.pca_basis @ (t.pca_scales * prm.alpha)).reshape(-1, 3)
    g = g0 + prm.displacement
    vg = bm.lbs(g, tr, problem.garment_weights) + prm.translation
    return _Eval(shaped, rest, j, tr, m.template.with_vertices(vb), g0, g,
                 t.rest_mesh.with_vertices(vg))


def fitted_meshes(problem: FitProblem, prm: FitParams):
    """(posed garment, posed body) for a parameter set."""
    ev = _evaluate(problem, prm)
    return ev.garment, ev.body


@dataclass
class _Pairs:
    garment: tuple
    skin: tuple
    rest: tuple
    posed: tuple


def _find_pairs(problem: FitProblem, ev: _Eval) -> _Pairs:
    s = problem.settings
    tg, sk = problem.target_garment, problem.target_skin
    g_rest = ev.garment.with_vertices(ev.garment_rest0)
    b_rest = ev.body.with_vertices(ev.shaped)
    return _Pairs(
        find_pair_arrays(ev.garment, tg, s.data_max_distance, s.data_max_angle)[:2],
        find_pair_arrays(ev.body, sk, s.data_max_distance, s.data_max_angle)[:2],
        find_pair_arrays(g_rest, b_rest, s.pair_max_distance, s.pair_max_angle)[:2],
        find_pair_arrays(ev.garment, ev.body, s.pair_max_distance, s.pair_max_angle)[:2],
    )


def _point_to_point(src, tgt, pairs):
    pi, qj = pairs
    if len(pi) == 0:
        return 0.0, np.zeros_like(src.vertices)
    d = src.vertices[pi] - tgt.vertices[qj]
    g = np.zeros_like(src.vertices)
    np.add.at(g, pi, (2.0 / len(pi)) * d)
    return float(np.mean(np.sum(d * d, axis=1))), g


class _Objective:
    """Energy and gradient over the packed vector [alpha, beta, theta, t_mm, D_mm]."""

    def __init__(self, problem: FitProblem):
        self.problem = problem
        self.nv = problem.template.n_vertices
        self.sizes = [("alpha", N_PCA), ("beta", N_BETAS), ("theta", 3 * N_JOINTS),
                      ("translation", 3), ("displacement", 3 * self.nv)]
        self.slices = {}
        o = 0
        for k, n in self.sizes:
            self.slices[k] = slice(o, o + n)
            o += n
        self.size = o
        self.tgt_garment_n = vertex_normals(problem.target_garment)
        self.tgt_skin_n = vertex_normals(problem.target_skin)

    def pack(self, prm: FitParams) -> np.ndarray:
        z = np.empty(self.size)
        z[self.slices["alpha"]] = prm.alpha
        z[self.slices["beta"]] = prm.beta
        z[self.slices["theta"]] = prm.theta.ravel()
        z[self.slices["translation"]] = prm.translation * MM
        z[self.slices["displacement"]] = prm.displacement.ravel() * MM
        return z

    def unpack(self, z) -> FitParams:
        s = self.slices
        return FitParams(z[s["alpha"]], z[s["displacement"]].reshape(-1, 3) / MM, z[s["beta"]],
                         z[s["theta"]].reshape(N_JOINTS, 3), z[s["translation"]] / MM)

    def mask(self, names) -> np.ndarray:
        m = np.zeros(self.size, bool)
        for k in names:
            m[self.slices[k]] = True
        return m

    def pairs(self, z) -> _Pairs:
        return _find_pairs(self.problem, _evaluate(self.problem, self.unpack(z)))

    def __call__(self, z, pairs: _Pairs, grad: bool = True):
        p = self.problem
        w = p.weights
        prm = self.unpack(z)
        ev = _evaluate(p, prm)
        g_rest = ev.garment.with_vertices(ev.garment_rest0)
        b_rest = ev.body.with_vertices(ev.shaped)
        mm2 = MM * MM
        terms = {
            "point_to_plane_garment": mm2 * point_to_plane(ev.garment, p.target_garment, pairs.garment, self.tgt_garment_n),
            "point_to_plane_body": mm2 * point_to_plane(ev.body, p.target_skin, pairs.skin, self.tgt_skin_n),
            "interpenetration_rest": MM * interpenetration_loss(g_rest, b_rest, pairs.rest),
            "interpenetration_posed": MM * interpenetration_loss(ev.garment, ev.body, pairs.posed),
            "reg_alpha": float(prm.alpha @ prm.alpha),
            "reg_beta": float(prm.beta @ prm.beta),
            "reg_disp": mm2 * float(np.mean(np.sum(prm.displacement ** 2, axis=1))),
        }
        ppg, ppg_grad = _point_to_point(ev.garment, p.target_garment, pairs.garment)
        ppb, ppb_grad = _point_to_point(ev.body, p.target_skin, pairs.skin)
        terms["point_to_point"] = mm2 * (ppg + ppb)
        energy = (w.point_to_plane * (terms["point_to_plane_garment"] + terms["point_to_plane_body"])
                  + w.point_to_point * terms["point_to_point"]
                  + w.interpenetration * (terms["interpenetration_rest"] + terms["interpenetration_posed"])
                  + w.reg_alpha * terms["reg_alpha"] + w.reg_beta * terms["reg_beta"]
                  + w.reg_disp * terms["reg_disp"])
        if not grad:
            return energy, terms
        # gradients w.r.t. posed garment/body vertices and the two neutral shapes
        gg = mm2 * (w.point_to_plane * point_to_plane_grad(ev.garment, p.target_garment, pairs.garment, self.tgt_garment_n)
                    + w.point_to_point * ppg_grad)
        gb = mm2 * (w.point_to_plane * point_to_plane_grad(ev.body, p.target_skin, pairs.skin, self.tgt_skin_n)
                    + w.point_to_point * ppb_grad)
        a, b = interpenetration_grad(ev.garment, ev.body, pairs.posed)
        gg += (w.interpenetration * MM) * a
        gb += (w.interpenetration * MM) * b
        a, b = interpenetration_grad(g_rest, b_rest, pairs.rest)
        g_grest0 = (w.interpenetration * MM) * a
        g_shaped = (w.interpenetration * MM) * b
        m, t = p.body_model, p.template
        g_brest, g_tr = bm.lbs_vjp(ev.body_rest, ev.transforms, m.weights, gb)
        g_grest, g_tr2 = bm.lbs_vjp(ev.garment_rest, ev.transforms, p.garment_weights, gg)
        g_j, g_theta = bm.forward_kinematics_vjp(ev.joints, prm.theta, g_tr + g_tr2, m.parents)
        if np.any(m.pose_basis):
            g_pf = (m.pose_basis.T @ g_brest.ravel()).reshape(N_JOINTS - 1, 3, 3)
            jac = bm.rodrigues_jacobian(prm.theta[1:])
            g_theta[1:] += np.einsum("kcij,kij->kc", jac, g_pf)
        g_shaped = g_shaped + g_brest + m.joint_regressor.T @ g_j
        out = np.empty(self.size)
        s = self.slices
        out[s["alpha"]] = t.pca_scales * (t.pca_basis.T @ (g_grest + g_grest0).ravel()) + 2 * w.reg_alpha * prm.alpha
        out[s["beta"]] = m.shape_basis.T @ g_shaped.ravel() + 2 * w.reg_beta * prm.beta
        out[s["theta"]] = g_theta.ravel()
        out[s["translation"]] = (gg.sum(axis=0) + gb.sum(axis=0)) / MM
        g_d = g_grest / MM + (2 * w.reg_disp / self.nv) * prm.displacement * MM
        out[s["displacement"]] = g_d.ravel()
        return energy, terms, out


def total_energy(problem: FitProblem, params: FitParams, pairs=None):
    """(energy, terms, gradient as FitParams-shaped dict); pairs default to those of ``params``."""
    obj = _Objective(problem)
    z = obj.pack(params)
    pr = obj.pairs(z) if pairs is None else pairs
    e, terms, g = obj(z, pr)
    s = obj.slices
    grad = {"alpha": g[s["alpha"]], "beta": g[s["beta"]], "theta": g[s["theta"]].reshape(N_JOINTS, 3),
            "translation": g[s["translation"]] * MM, "displacement": g[s["displacement"]].reshape(-1, 3) * MM}
    return e, terms, grad


# ---------------------------------------------------------------- optimizer


class _Lbfgs:
    def __init__(self, m):
        self.m = m
        self.s, self.y = [], []

    def reset(self):
        self.s, self.y = [], []

    def direction(self, g):
        q = g.copy()
        alphas = []
        for s, y in zip(reversed(self.s), reversed(self.y)):
            rho = 1.0 / (y @ s)
            a = rho * (s @ q)
            q -= a * y
            alphas.append((rho, a, s, y))
        if self.s:
            q *= (self.s[-1] @ self.y[-1]) / (self.y[-1] @ self.y[-1])
        for rho, a, s, y in reversed(alphas):
            q += s * (a - rho * (y @ q))
        return -q

    def update(self, s, y):
        if s @ y > 1e-12 * np.sqrt((s @ s) * (y @ y)):
            self.s.append(s)
            self.y.append(y)
            if len(self.s) > self.m:
                self.s.pop(0)
                self.y.pop(0)


def _scales(obj: _Objective, z, mask) -> np.ndarray:
    """Diagonal Gauss-Newton preconditioner: inverse sqrt of the per-variable curvature.

    Curvature is estimated from how far each variable moves the posed
    vertices (finite differences over the low-dimensional parameters, closed
    form for the per-vertex displacements).
    """
    p = obj.problem
    w = p.weights
    data = 2.0 * (w.point_to_plane + w.point_to_point)
    s = obj.slices
    diag = np.zeros(obj.size)
    base = _evaluate(p, obj.unpack(z))
    h = 1e-4
    low = [i for k in ("alpha", "beta", "theta", "translation") for i in range(s[k].start, s[k].stop) if mask[i]]
    for i in low:
        zi = z.copy()
        zi[i] += h
        ev = _evaluate(p, obj.unpack(zi))
        dg = (ev.garment.vertices - base.garment.vertices) * (MM / h)
        db = (ev.body.vertices - base.body.vertices) * (MM / h)
        diag[i] = data * (np.mean(np.sum(dg * dg, axis=1)) + np.mean(np.sum(db * db, axis=1)))
    diag[s["alpha"]] += 2 * w.reg_alpha
    diag[s["beta"]] += 2 * w.reg_beta
    diag[s["displacement"]] = (data + 2 * w.reg_disp) / obj.nv
    live = mask & (diag > 0)
    floor = 1e-8 * diag[live].max() if live.any() else 1.0
    return 1.0 / np.sqrt(np.maximum(diag, floor))


def _run(obj: _Objective, z0, stages, settings: FitSettings):
    """Minimize over successive variable masks; returns (z, starts, ends, converged, iters).

    Every step is taken in preconditioned coordinates u = z / scale.
    """
    z = z0.copy()
    starts, ends = [], []
    it = 0
    converged = False
    for names, budget in stages:
        mask = obj.mask(names)
        sc = _scales(obj, z, mask)
        lb = _Lbfgs(settings.history)
        vel = np.zeros_like(z)
        m1, m2 = np.zeros_like(z), np.zeros_like(z)
        stage_ends = []
        converged = False
        prev = None
        failed = False
        for k in range(budget):
            pairs = obj.pairs(z)
            e0, _, gz = obj(z, pairs)
            if not np.isfinite(e0) or not np.all(np.isfinite(gz)):
                raise FitDiverged(f"energy became {e0} at iteration {it}")
            g = np.where(mask, gz * sc, 0.0)
            if prev is not None:
                lb.update((z - prev[0]) / sc, g - prev[1])
            gnorm = np.linalg.norm(g)
            if gnorm < 1e-12:
                starts.append(e0)
                ends.append(e0)
                stage_ends.append(e0)
                it += 1
                converged = True
                break
            if settings.optimizer == "adam":
                t = k + 1
                m1 = 0.9 * m1 + 0.1 * g
                m2 = 0.999 * m2 + 0.001 * g * g
                d = -(m1 / (1 - 0.9 ** t)) / (np.sqrt(m2 / (1 - 0.999 ** t)) + 1e-8)
                step0 = settings.lr
            elif settings.optimizer == "momentum":
                d = settings.momentum * vel - g
                if d @ g >= 0:
                    d = -g
                step0 = settings.lr
            else:
                d = lb.direction(g) if lb.s else -g * (settings.lr / max(gnorm, 1.0))
                if d @ g >= 0:
                    lb.reset()
                    d = -g * (settings.lr / max(gnorm, 1.0))
                step0 = 1.0
            step, e1, accepted = step0, e0, False
            slope = float(d @ g)
            for _ in range(settings.max_backtracks):
                zt = z + step * sc * d
                et, _ = obj(zt, pairs, grad=False)
                if np.isfinite(et) and et <= e0 + 1e-4 * step * min(slope, 0.0):
                    accepted = True
                    e1 = et
                    break
                step *= 0.5
            prev = (z.copy(), g)
            if accepted:
                vel = step * d
                z = zt
            else:
                vel[:] = 0.0
                lb.reset()
                prev = None
            starts.append(e0)
            ends.append(e1)
            stage_ends.append(e1)
            it += 1
            if not accepted:
                if failed:
                    converged = True
                    break
                failed = True
                continue
            failed = False
            n = settings.patience
            if len(stage_ends) > n:
                old = stage_ends[-1 - n]
                if abs(old - e1) <= settings.convergence_tol * max(abs(e1), 1e-12):
                    converged = True
                    break
            if e1 < 1e-14:
                converged = True
                break
    return z, starts, ends, converged, it


def _result(obj: _Objective, z, z0, starts, ends, converged, iters) -> FitResult:
    prm = obj.unpack(z)
    pairs = obj.pairs(z)
    e, terms = obj(z, pairs, grad=False)
    e_init, _ = obj(z0, pairs, grad=False)
    p = obj.problem
    ev = _evaluate(p, prm)
    res = np.concatenate([point_triangle_distance(ev.garment.vertices, p.target_garment),
                          point_triangle_distance(ev.body.vertices, p.target_skin)])
    return FitResult(prm, ends, starts, {k: float(v) for k, v in terms.items()} | {"total": float(e)},
                     float(np.mean(res) * MM), converged, iters, float(e_init), float(e))


_ALL = ("alpha", "beta", "theta", "translation", "displacement")
_NO_DISP = ("alpha", "beta", "theta", "translation")


def fit_rigged(problem: FitProblem, init: FitParams | None = None, seed: int = 0) -> FitResult:
    """Fit (alpha, D, beta, theta, t) with D frozen for the first part of the run.

    ``seed`` only matters for optimizers with stochastic choices; the
    default ones are deterministic.
    """
    del seed
    obj = _Objective(problem)
    s = problem.settings
    init = init or FitParams.zeros(problem.template.n_vertices)
    z0 = obj.pack(init)
    frozen = int(round(s.max_iters * s.disp_release))
    stages = [(_NO_DISP, frozen), (_ALL, s.max_iters - frozen)]
    stages = [st for st in stages if st[1] > 0]
    z, starts, ends, conv, it = _run(obj, z0, stages, s)
    r = _result(obj, z, z0, starts, ends, conv, it)
    log.info("rigged fit: %d iterations, energy %.6g, residual %.3f mm", it, r.final_energy, r.residual_med_mm)
    return r


def fit_posed(problem: FitProblem, init: FitResult | FitParams) -> FitResult:
    """Fit (theta, t) from a rigged solution, then fine-tune everything."""
    obj = _Objective(problem)
    s = problem.settings
    prm = init.params if isinstance(init, FitResult) else init
    z0 = obj.pack(prm)
    z1, st1, en1, conv1, it1 = _run(obj, z0, [(("theta", "translation"), s.max_iters)], s)
    stage1 = _result(obj, z1, z0, st1, en1, conv1, it1)
    z2, st2, en2, conv2, it2 = _run(obj, z1, [(_ALL, s.max_iters)], s)
    r = _result(obj, z2, z0, st1 + st2, en1 + en2, conv2, it1 + it2)
    r.stage1 = stage1
    log.info("posed fit: %d + %d iterations, energy %.6g", it1, it2, r.final_energy)
    return r


def save_report(result: FitResult, path) -> None:
    with open(path, "w") as fh:
        json.dump(result.to_json(), fh)

