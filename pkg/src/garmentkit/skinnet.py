"""Graph-attention regressor for garment skinning weights, trained with a KL loss.

Everything is plain numpy: the forward pass caches what the hand-written
backward pass needs. Several garments are packed into one disconnected
graph so a minibatch is a handful of dense matmuls; the global max-pool
runs per garment.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import body as bm
from .body import BodyModel, N_JOINTS
from .mesh import Mesh, vertex_normals
from .transfer import summarize_errors, weight_errors

log = logging.getLogger(__name__)

N_FEATURES = 3 + 3 + N_JOINTS
KL_EPS = 1e-8


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------- features and graphs


def compute_features(mesh: Mesh, joint_positions) -> np.ndarray:
    """Per-vertex [position, unit normal, distance to each of the 24 joints]."""
    j = np.asarray(joint_positions, dtype=np.float64)
    if j.shape != (N_JOINTS, 3):
        raise ValueError(f"joints must be ({N_JOINTS}, 3), got {j.shape}")
    n, degenerate = vertex_normals(mesh, return_degenerate=True)
    if degenerate.any():
        log.warning("%d vertices have degenerate normals", int(degenerate.sum()))
    d = np.linalg.norm(mesh.vertices[:, None, :] - j[None, :, :], axis=-1)
    return np.concatenate([mesh.vertices, n, d], axis=1)


@dataclass(frozen=True, eq=False)
class GraphBatch:
    """Disjoint union of garment graphs; edges (incl. self-loops) sorted by target."""
    features: np.ndarray
    target: np.ndarray   # i of each edge (receives the message)
    source: np.ndarray   # j of each edge
    offsets: np.ndarray  # graph g owns vertices offsets[g]:offsets[g+1]

    @property
    def n_vertices(self) -> int:
        return len(self.features)

    @property
    def n_graphs(self) -> int:
        return len(self.offsets) - 1

    def graph_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_graphs), np.diff(self.offsets))


def mesh_edges_with_self_loops(mesh: Mesh):
    e = mesh.edges()
    n = mesh.n_vertices
    loops = np.arange(n)
    tgt = np.concatenate([e[:, 0], e[:, 1], loops])
    src = np.concatenate([e[:, 1], e[:, 0], loops])
    order = np.lexsort((src, tgt))
    return tgt[order], src[order]


def pack(meshes, features) -> GraphBatch:
    feats, tgts, srcs, offs = [], [], [], [0]
    for m, f in zip(meshes, features):
        t, s = mesh_edges_with_self_loops(m)
        tgts.append(t + offs[-1])
        srcs.append(s + offs[-1])
        feats.append(np.asarray(f, dtype=np.float64))
        offs.append(offs[-1] + m.n_vertices)
    return GraphBatch(np.concatenate(feats), np.concatenate(tgts), np.concatenate(srcs),
                      np.asarray(offs, dtype=np.int64))


@dataclass(frozen=True, eq=False)
class WeightSample:
    mesh: Mesh
    features: np.ndarray
    weights: np.ndarray
    category: str = ""
    beta: np.ndarray = field(default_factory=lambda: np.zeros(bm.N_BETAS))


def pack_samples(samples) -> GraphBatch:
    return pack([s.mesh for s in samples], [s.features for s in samples])


# ---------------------------------------------------------------- parameters


@dataclass
class SkinNetParams:
    arrays: dict
    width: int = 64
    blocks: int = 3
    heads: int = 1
    leaky_slope: float = 0.2

    @property
    def global_width(self) -> int:
        return self.arrays["glob_W"].shape[1]

    def names(self):
        return list(self.arrays)

    def copy(self) -> "SkinNetParams":
        return SkinNetParams({k: v.copy() for k, v in self.arrays.items()},
                             self.width, self.blocks, self.heads, self.leaky_slope)

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.arrays.values()])

    def header(self) -> dict:
        return {"F": self.width, "B": self.blocks, "H": self.heads, "leaky_slope": self.leaky_slope}

    def to_json(self) -> dict:
        return {**self.header(), "arrays": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                                            for k, v in self.arrays.items()}}

    @classmethod
    def from_json(cls, d) -> "SkinNetParams":
        arrays = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in d["arrays"].items()}
        return cls(arrays, d["F"], d["B"], d["H"], d.get("leaky_slope", 0.2))


def _glorot(rng, shape, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


def init_params(seed: int = 0, width: int = 64, blocks: int = 3, heads: int = 1,
                global_width: int | None = None, leaky_slope: float = 0.2) -> SkinNetParams:
    rng = np.random.default_rng(seed)
    f, g = width, global_width or width
    a = {"in_W": _glorot(rng, (N_FEATURES, f), N_FEATURES, f), "in_b": np.zeros(f)}
    for b in range(blocks):
        a[f"gat{b}_W"] = _glorot(rng, (heads, f, f), f, f)
        a[f"gat{b}_asrc"] = _glorot(rng, (heads, f), f, 1)
        a[f"gat{b}_adst"] = _glorot(rng, (heads, f), f, 1)
        a[f"mlt{b}_W"] = _glorot(rng, (f, f), f, f)
        a[f"mlt{b}_b"] = np.zeros(f)
    a["glob_W"] = _glorot(rng, (f, g), f, g)
    a["glob_b"] = np.zeros(g)
    a["out_W"] = _glorot(rng, (f + g, N_JOINTS), f + g, N_JOINTS)
    a["out_b"] = np.zeros(N_JOINTS)
    return SkinNetParams(a, f, blocks, heads, leaky_slope)


def save_checkpoint(params: SkinNetParams, path) -> None:
    Path(path).write_text(json.dumps(params.to_json()))


def load_checkpoint(path) -> SkinNetParams:
    with open(path) as fh:
        return SkinNetParams.from_json(json.load(fh))


# ---------------------------------------------------------------- layers


def _elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def _elu_grad(x, y=None):
    """Derivative of elu at x; y = elu(x) saves the exp when given."""
    if y is None:
        return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))
    return np.where(x > 0, 1.0, y + 1.0)


def _segment_starts(target, n):
    return np.searchsorted(target, np.arange(n))


def gat_layer(h, target, source, W, a_src, a_dst, slope=0.2, cache=None):
    """One graph-attention layer; heads are averaged before the elu."""
    n = len(h)
    heads = W.shape[0]
    starts = _segment_starts(target, n)
    indptr = np.append(starts, len(target))
    z, att, pre, mats = [], [], [], []
    agg = np.zeros((n, W.shape[2]))
    for hh in range(heads):
        zh = h @ W[hh]
        p = (zh @ a_dst[hh])[target] + (zh @ a_src[hh])[source]
        e = np.where(p > 0, p, slope * p)
        ex = np.exp(e - np.maximum.reduceat(e, starts)[target])
        ah = ex / np.add.reduceat(ex, starts)[target]
        A = sp.csr_matrix((ah, source, indptr), shape=(n, n))
        agg += A @ zh
        z.append(zh)
        att.append(ah)
        pre.append(p)
        mats.append(A)
    avg = agg / heads
    out = _elu(avg)
    if cache is not None:
        cache.update(h=h, z=z, pre=pre, att=att, mats=mats, avg=avg, out=out, starts=starts)
    return out


def gat_layer_backward(g_out, target, source, W, a_src, a_dst, slope, cache):
    h, starts = cache["h"], cache["starts"]
    n, heads = len(h), W.shape[0]
    g_agg = g_out * _elu_grad(cache["avg"], cache["out"]) / heads  # same for every head
    g_agg_t = g_agg[target]
    g_h = np.zeros_like(h)
    g_W, g_asrc, g_adst = np.empty_like(W), np.empty_like(a_src), np.empty_like(a_dst)
    for hh in range(heads):
        zh, ah, p = cache["z"][hh], cache["att"][hh], cache["pre"][hh]
        g_z = cache["mats"][hh].T @ g_agg
        g_att = np.einsum("ek,ek->e", g_agg_t, zh[source])
        g_e = ah * (g_att - np.add.reduceat(ah * g_att, starts)[target])
        g_pre = g_e * np.where(p > 0, 1.0, slope)
        g_s = np.bincount(target, g_pre, minlength=n)
        g_t = np.bincount(source, g_pre, minlength=n)
        g_adst[hh] = g_s @ zh
        g_asrc[hh] = g_t @ zh
        g_z += np.outer(g_s, a_dst[hh]) + np.outer(g_t, a_src[hh])
        g_W[hh] = h.T @ g_z
        g_h += g_z @ W[hh].T
    return g_h, g_W, g_asrc, g_adst


# ---------------------------------------------------------------- network


def _log_softmax(x):
    m = x.max(axis=1, keepdims=True)
    y = x - m
    return y - np.log(np.exp(y).sum(axis=1, keepdims=True))


def forward(params: SkinNetParams, batch: GraphBatch, cache=None) -> np.ndarray:
    """Predicted weights, one row per packed vertex (rows on the simplex)."""
    P = params.arrays
    slope = params.leaky_slope
    x = batch.features
    u0 = x @ P["in_W"] + P["in_b"]
    h0 = _elu(u0)
    h = h0
    blocks = []
    for b in range(params.blocks):
        c = {}
        g = gat_layer(h, batch.target, batch.source, P[f"gat{b}_W"], P[f"gat{b}_asrc"],
                      P[f"gat{b}_adst"], slope, cache=c)
        um = g @ P[f"mlt{b}_W"] + P[f"mlt{b}_b"]
        m = _elu(um)
        h = h + m
        c.update(g=g, um=um, m=m)
        blocks.append(c)
    mid = h
    ug = mid @ P["glob_W"] + P["glob_b"]
    q = _elu(ug)
    off = batch.offsets
    pooled = np.maximum.reduceat(q, off[:-1], axis=0)
    gid = batch.graph_index()
    cat = np.concatenate([mid, pooled[gid]], axis=1)
    logits = cat @ P["out_W"] + P["out_b"]
    logp = _log_softmax(logits)
    if cache is not None:
        cache.update(x=x, u0=u0, h0=h0, blocks=blocks, mid=mid, ug=ug, q=q, pooled=pooled,
                     gid=gid, cat=cat, logp=logp)
    return np.exp(logp)


def clamp_labels(gt, eps: float = KL_EPS) -> np.ndarray:
    """Entries below eps become eps; the rest shrink so each row still sums to 1."""
    g = np.asarray(gt, dtype=np.float64)
    low = g < eps
    free = np.where(low, 0.0, g)
    room = 1.0 - eps * low.sum(axis=1, keepdims=True)
    return np.where(low, eps, free * (room / free.sum(axis=1, keepdims=True)))


def kl_loss(pred, gt, eps: float = KL_EPS) -> float:
    """sum_ij pred_ij * log(pred_ij / gt_ij), gt clamped to eps and renormalized."""
    p = np.asarray(pred, dtype=np.float64)
    g = clamp_labels(gt, eps)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(g)), 0.0)
    return float(terms.sum())


def _kl_from_logp(logp, log_gt):
    return float(np.sum(np.exp(logp) * (logp - log_gt)))


def backward(params: SkinNetParams, batch: GraphBatch, gt, cache, scale: float = 1.0,
             forward_weight: float = 0.0) -> dict:
    """Gradient of scale * kl_loss(forward(batch), gt) for every parameter array.

    ``forward_weight`` > 0 adds that multiple of the reversed divergence
    KL(gt || pred), whose logit gradient pred - gt never vanishes.
    """
    P = params.arrays
    slope = params.leaky_slope
    logp = cache["logp"]
    p = np.exp(logp)
    g = clamp_labels(gt)
    r = logp - np.log(g)
    g_logits = scale * p * (r - np.sum(p * r, axis=1, keepdims=True))
    if forward_weight:
        g_logits += (scale * forward_weight) * (p - g)
    grads = {}
    cat = cache["cat"]
    grads["out_W"] = cat.T @ g_logits
    grads["out_b"] = g_logits.sum(axis=0)
    g_cat = g_logits @ P["out_W"].T
    f = params.width
    g_mid = g_cat[:, :f].copy()
    g_pooled = np.add.reduceat(g_cat[:, f:], batch.offsets[:-1], axis=0)
    q, pooled, gid = cache["q"], cache["pooled"], cache["gid"]
    # route each pooled channel to the first vertex attaining the max
    big = np.iinfo(np.int64).max
    idx = np.arange(len(q))[:, None]
    is_max = q == pooled[gid]
    first = np.minimum.reduceat(np.where(is_max, idx, big), batch.offsets[:-1], axis=0)
    g_q = np.zeros_like(q)
    cols = np.broadcast_to(np.arange(q.shape[1]), first.shape)
    g_q[first.ravel(), cols.ravel()] = g_pooled.ravel()
    g_ug = g_q * _elu_grad(cache["ug"], q)
    grads["glob_W"] = cache["mid"].T @ g_ug
    grads["glob_b"] = g_ug.sum(axis=0)
    g_h = g_mid + g_ug @ P["glob_W"].T
    for b in reversed(range(params.blocks)):
        c = cache["blocks"][b]
        g_um = g_h * _elu_grad(c["um"], c["m"])
        grads[f"mlt{b}_W"] = c["g"].T @ g_um
        grads[f"mlt{b}_b"] = g_um.sum(axis=0)
        g_g = g_um @ P[f"mlt{b}_W"].T
        g_hin, gW, gas, gad = gat_layer_backward(g_g, batch.target, batch.source, P[f"gat{b}_W"],
                                                P[f"gat{b}_asrc"], P[f"gat{b}_adst"], slope, c)
        grads[f"gat{b}_W"], grads[f"gat{b}_asrc"], grads[f"gat{b}_adst"] = gW, gas, gad
        g_h = g_h + g_hin
    g_u0 = g_h * _elu_grad(cache["u0"], cache["h0"])
    grads["in_W"] = cache["x"].T @ g_u0
    grads["in_b"] = g_u0.sum(axis=0)
    return {k: grads[k] for k in P}


def loss_and_grad(params: SkinNetParams, batch: GraphBatch, gt, scale: float = 1.0,
                  forward_weight: float = 0.0):
    """(scale * KL(pred || gt), gradients); the reported loss never includes the warm-up term."""
    cache = {}
    forward(params, batch, cache)
    loss = scale * _kl_from_logp(cache["logp"], np.log(clamp_labels(gt)))
    if not np.isfinite(loss):
        return loss, None
    return loss, backward(params, batch, gt, cache, scale, forward_weight)


def predict(params: SkinNetParams, mesh: Mesh, joint_positions) -> np.ndarray:
    return forward(params, pack([mesh], [compute_features(mesh, joint_positions)]))


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-2
    momentum: float = 0.9
    batch_size: int = 20
    optimizer: str = "sgd"     # "sgd" (momentum, cosine decay) or "adam"
    grad_clip: float | None = 10.0
    warmup: float = 0.5        # fraction of steps over which the KL(gt || pred) term fades out
    seed: int = 0


def _schedule(lr, step, total):
    return 0.5 * lr * (1.0 + np.cos(np.pi * step / max(total, 1)))


def train(samples, config: TrainConfig | None = None, params: SkinNetParams | None = None,
          **init_kw):
    """Minibatch training on the per-vertex mean KL; returns (params, history).

    history holds one mean KL per epoch, evaluated on the parameters that
    entered that epoch.
    """
    config = config or TrainConfig()
    samples = list(samples)
    if not samples:
        raise ValueError("training set is empty")
    params = params.copy() if params is not None else init_params(config.seed, **init_kw)
    if config.epochs == 0:
        return params, []
    rng = np.random.default_rng(config.seed + 7919)
    n = len(samples)
    bs = min(config.batch_size, n)
    n_batches = -(-n // bs)
    total = config.epochs * n_batches
    vel = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    sq = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    history = []
    step = 0
    packed_cache = {}
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss, epoch_vertices = 0.0, 0
        for bi in range(n_batches):
            ids = tuple(sorted(order[bi * bs:(bi + 1) * bs]))
            if ids not in packed_cache:
                chosen = [samples[i] for i in ids]
                packed_cache[ids] = (pack_samples(chosen), np.concatenate([s.weights for s in chosen]))
                if len(packed_cache) > 4 * n_batches:
                    packed_cache.pop(next(iter(packed_cache)))
            batch, gt = packed_cache[ids]
            nv = batch.n_vertices
            fw = max(0.0, 1.0 - step / (config.warmup * total)) if config.warmup > 0 else 0.0
            loss, grads = loss_and_grad(params, batch, gt, 1.0 / nv, fw)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at epoch {epoch}, batch {bi}")
            epoch_loss += loss * nv
            epoch_vertices += nv
            if config.grad_clip is not None:
                norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
                if norm > config.grad_clip:
                    grads = {k: g * (config.grad_clip / norm) for k, g in grads.items()}
            lr = _schedule(config.lr, step, total)
            step += 1
            if config.optimizer == "adam":
                b1, b2 = 0.9, 0.999
                for k, g in grads.items():
                    vel[k] = b1 * vel[k] + (1 - b1) * g
                    sq[k] = b2 * sq[k] + (1 - b2) * g * g
                    mhat = vel[k] / (1 - b1 ** step)
                    vhat = sq[k] / (1 - b2 ** step)
                    params.arrays[k] -= lr * mhat / (np.sqrt(vhat) + 1e-8)
            else:
                for k, g in grads.items():
                    vel[k] = config.momentum * vel[k] - lr * g
                    params.arrays[k] += vel[k]
        history.append(epoch_loss / epoch_vertices)
        if epoch % 10 == 0 or epoch == config.epochs - 1:
            log.info("epoch %d mean KL %.6g", epoch, history[-1])
    return params, history


def save_history(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_kl"])
        for i, v in enumerate(history):
            w.writerow([i, repr(float(v))])


def mean_kl(params: SkinNetParams, samples) -> float:
    batch = pack_samples(samples)
    gt = np.concatenate([s.weights for s in samples])
    return kl_loss(forward(params, batch), gt) / batch.n_vertices


def predict_samples(params: SkinNetParams, samples) -> list:
    batch = pack_samples(samples)
    pred = forward(params, batch)
    return [pred[a:b] for a, b in zip(batch.offsets[:-1], batch.offsets[1:])]


def evaluate(params: SkinNetParams, samples, body_model: BodyModel, poses, by_category: bool = False):
    """weight_metrics over a test set; optionally also per garment category."""
    preds = predict_samples(params, samples)
    l1_all, d_all = [], []
    per_cat = {}
    for s, p in zip(samples, preds):
        l1, d = weight_errors(p, s.weights, s.mesh, body_model, s.beta, poses)
        l1_all.append(l1)
        d_all.append(d)
        acc = per_cat.setdefault(s.category, ([], []))
        acc[0].append(l1)
        acc[1].append(d)
    out = summarize_errors(np.concatenate(l1_all), np.concatenate(d_all))
    if by_category:
        out = {"all": out, "categories": {c: summarize_errors(np.concatenate(a), np.concatenate(b))
                                          for c, (a, b) in per_cat.items()}}
    return out
