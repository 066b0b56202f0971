"""Procedural stand-ins for licensed body assets and simulated garments.

The body is a "tube-man": closed tubes for torso, head and four limbs with
one cross-section ring at every joint, so that a ring-average joint
regressor reproduces the skeleton exactly. Garments are open tubes (shirts,
pants) or a flared tube (skirts) placed a few centimetres outside it.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from . import body as bm
from .body import (HEAD, LEFT_ARM, LEFT_LEG, LOWER_BODY, RIGHT_ARM, RIGHT_LEG, TORSO,
                   BodyModel, N_BETAS, N_JOINTS, N_POSE_FEATURES)
from .garment import CATEGORIES, GarmentTemplate, template_from_corpus
from .mesh import Mesh


@dataclass(frozen=True)
class _Part:
    tag: int
    origin: tuple
    axis: tuple
    radius: float
    extent: tuple     # axial start/end of the closed tube
    chain: tuple      # (joint, axial station) pairs; bones run station to station
    rings: tuple      # joints that own a ring on this part
    aspect: float = 1.0  # cross-section half-axes are radius * (aspect, 1 / aspect)


_X, _Y = (1.0, 0.0, 0.0), (0.0, 1.0, 0.0)
_NX, _NY = (-1.0, 0.0, 0.0), (0.0, -1.0, 0.0)

TUBE_MAN_PARTS = (
    _Part(TORSO, (0, 0, 0), _Y, 0.13, (-0.12, 0.56),
          ((0, 0.0), (3, 0.10), (6, 0.22), (9, 0.34), (12, 0.50)), (0, 3, 6, 9, 12), 1.15),
    _Part(HEAD, (0, 0, 0), _Y, 0.08, (0.52, 0.76), ((12, 0.50), (15, 0.62)), (15,), 0.9),
    _Part(LEFT_LEG, (0.09, 0, 0), _NY, 0.06, (0.0, 1.0),
          ((0, 0.0), (1, 0.08), (4, 0.48), (7, 0.88), (10, 0.95)), (1, 4, 7, 10), 0.9),
    _Part(RIGHT_LEG, (-0.09, 0, 0), _NY, 0.06, (0.0, 1.0),
          ((0, 0.0), (2, 0.08), (5, 0.48), (8, 0.88), (11, 0.95)), (2, 5, 8, 11), 0.9),
    _Part(LEFT_ARM, (0, 0.45, 0), _X, 0.045, (0.02, 0.82),
          ((9, 0.0), (13, 0.07), (16, 0.18), (18, 0.45), (20, 0.70), (22, 0.78)), (13, 16, 18, 20, 22), 1.1),
    _Part(RIGHT_ARM, (0, 0.45, 0), _NX, 0.045, (0.02, 0.82),
          ((9, 0.0), (14, 0.07), (17, 0.18), (19, 0.45), (21, 0.70), (23, 0.78)), (14, 17, 19, 21, 23), 1.1),
)


def _frame(axis):
    d = np.asarray(axis, dtype=np.float64)
    helper = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(helper, d)
    u /= np.linalg.norm(u)
    w = np.cross(d, u)  # u x w = d
    return d, u, w


def _capsule_radius(s, part):
    lo, hi = part.extent
    dist = min(s - lo, hi - s)
    u = dist / part.radius
    if u >= 1.0:
        return part.radius
    return part.radius * np.sqrt(max(u * (2.0 - u), 0.0))


def _tube(center_fn, radius_fn, axis, stations, n_around, caps=None):
    """Ring-stacked tube; faces wound so normals point away from the axis.

    ``radius_fn`` returns a radius or a pair of half-axes along the frame's
    (u, w) directions. ``caps`` gives the axial positions of the start/end apex vertices for a
    closed tube; ``None`` leaves both ends open.
    """
    d, u, w = _frame(axis)
    phi = 2.0 * np.pi * np.arange(n_around) / n_around
    cu, sw = np.cos(phi)[:, None] * u, np.sin(phi)[:, None] * w
    verts = []
    for s in stations:
        ru, rw = np.broadcast_to(radius_fn(s), (2,))
        verts.append(center_fn(s) + ru * cu + rw * sw)
    verts = np.concatenate(verts) if verts else np.zeros((0, 3))
    faces = []
    m = n_around
    for r in range(len(stations) - 1):
        a0, b0 = r * m, (r + 1) * m
        for k in range(m):
            k1 = (k + 1) % m
            faces.append((a0 + k, a0 + k1, b0 + k))
            faces.append((a0 + k1, b0 + k1, b0 + k))
    if caps is not None:
        start = len(verts)
        verts = np.vstack([verts, center_fn(caps[0]), center_fn(caps[1])])
        last = (len(stations) - 1) * m
        for k in range(m):
            k1 = (k + 1) % m
            faces.append((start, k1, k))
            faces.append((start + 1, last + k, last + k1))
    return verts, np.asarray(faces, dtype=np.int64).reshape(-1, 3)


def _ring_stations(parts, n_segments):
    """Joint rings first, then extra rings bisecting the widest gaps."""
    stations = []
    for p in parts:
        st = dict(p.chain)
        stations.append(sorted(st[j] for j in p.rings))
    extra = n_segments - sum(len(s) for s in stations)
    heap = []

    def push(pi, a, b):
        heapq.heappush(heap, (-(b - a), pi, a, b))

    for pi, (p, st) in enumerate(zip(parts, stations)):
        pts = [p.extent[0]] + st + [p.extent[1]]
        for a, b in zip(pts[:-1], pts[1:]):
            push(pi, a, b)
    while extra > 0:
        _, pi, a, b = heapq.heappop(heap)
        mid = 0.5 * (a + b)
        stations[pi].append(mid)
        push(pi, a, mid)
        push(pi, mid, b)
        extra -= 1
    return [sorted(s) for s in stations]


def _bone_weights(s, part):
    """Smoothstep blend between consecutive bone midpoints along the chain."""
    chain = part.chain
    ends = [st for _, st in chain[1:]] + [part.extent[1]]
    centers = [0.5 * (st + e) for (_, st), e in zip(chain, ends)]
    w = np.zeros(N_JOINTS)
    if s <= centers[0]:
        w[chain[0][0]] = 1.0
    elif s >= centers[-1]:
        w[chain[-1][0]] = 1.0
    else:
        k = int(np.searchsorted(centers, s, side="right")) - 1
        t = (s - centers[k]) / (centers[k + 1] - centers[k])
        h = t * t * (3.0 - 2.0 * t)
        w[chain[k][0]] += 1.0 - h
        w[chain[k + 1][0]] += h
    return w


def synth_body_model(seed: int = 0, n_ring: int = 16, n_segments: int = 64) -> BodyModel:
    if n_ring < 3:
        raise ValueError("n_ring must be at least 3")
    if n_segments < N_JOINTS:
        raise ValueError(f"n_segments must be at least {N_JOINTS}")
    parts = TUBE_MAN_PARTS
    all_stations = _ring_stations(parts, n_segments)
    verts, faces, labels, weights, axial, radial = [], [], [], [], [], []
    ring_index = {}
    offset = 0
    for p, st in zip(parts, all_stations):
        origin = np.asarray(p.origin, dtype=np.float64)
        d, u, w = _frame(p.axis)
        v, f = _tube(lambda s: origin + s * d,
                     lambda s: _capsule_radius(s, p) * np.array([p.aspect, 1.0 / p.aspect]),
                     p.axis, st, n_ring, caps=p.extent)
        chain_pos = dict(p.chain)
        for j in p.rings:
            r = st.index(chain_pos[j])
            ring_index[j] = offset + r * n_ring + np.arange(n_ring)
        s_all = (v - origin) @ d
        rad = v - origin - s_all[:, None] * d
        verts.append(v)
        faces.append(f + offset)
        labels.append(np.full(len(v), p.tag))
        weights.extend(_bone_weights(s, p) for s in s_all)
        axial.append(s_all)
        radial.append(rad)
        offset += len(v)
    verts = np.concatenate(verts)
    faces = np.concatenate(faces)
    labels = np.concatenate(labels)
    weights = np.asarray(weights)
    nv = len(verts)
    regressor = np.zeros((N_JOINTS, nv))
    for j, idx in ring_index.items():
        regressor[j, idx] = 1.0 / len(idx)

    radial = np.concatenate(radial)
    rnorm = np.linalg.norm(radial, axis=1, keepdims=True)
    radial_dir = np.divide(radial, rnorm, out=np.zeros_like(radial), where=rnorm > 1e-12)
    fields = []
    for tag in (TORSO, HEAD, LEFT_LEG, RIGHT_LEG, LEFT_ARM, RIGHT_ARM):
        fields.append(radial_dir * (labels == tag)[:, None])
    y, x = verts[:, 1], verts[:, 0]
    fields.append(np.stack([np.zeros(nv), np.minimum(y, 0.0), np.zeros(nv)], 1))
    fields.append(np.stack([np.zeros(nv), np.maximum(y, 0.0), np.zeros(nv)], 1))
    arm = np.isin(labels, (LEFT_ARM, RIGHT_ARM))
    reach = np.sign(x) * np.maximum(np.abs(x) - 0.13, 0.0) * arm
    fields.append(np.stack([reach, np.zeros(nv), np.zeros(nv)], 1))
    fields.append(np.stack([x, np.zeros(nv), np.zeros(nv)], 1))
    f = np.stack([fi.reshape(-1) for fi in fields], axis=1)
    rng = np.random.default_rng(seed)
    mix, _ = np.linalg.qr(rng.standard_normal((N_BETAS, N_BETAS)))
    q, r = np.linalg.qr(f @ mix)
    q = q * np.sign(np.diag(r))
    shape_basis = q * (0.01 * np.sqrt(nv))

    template = Mesh(verts, faces, labels)
    return BodyModel(template, shape_basis, np.zeros((3 * nv, N_POSE_FEATURES)),
                     regressor, weights, bm.SMPL_PARENTS)


def scaled_body_model(model: BodyModel, factor: float) -> BodyModel:
    """Uniformly scale a body model about the origin."""
    t = model.template
    return BodyModel(Mesh(t.vertices * factor, t.faces, t.labels), model.shape_basis * factor,
                     model.pose_basis * factor, model.joint_regressor, model.weights, model.parents)


# ---------------------------------------------------------------- garments


GARMENT_COMPATIBILITY = {
    TORSO: (TORSO,),
    LEFT_LEG: (LEFT_LEG,),
    RIGHT_LEG: (RIGHT_LEG,),
    LEFT_ARM: (LEFT_ARM,),
    RIGHT_ARM: (RIGHT_ARM,),
    HEAD: (HEAD,),
    LOWER_BODY: (TORSO, LEFT_LEG, RIGHT_LEG),
}


@dataclass(frozen=True)
class _GarmentShape:
    girth: float    # offset outside the body, meters
    limb_girth: float
    length: float   # fraction in [0, 1] of the category's length range
    flare: float


def _body_layout(host: BodyModel):
    """Skeleton plus measured half-axes (along the tube frame's u, w) of torso, legs and arms."""
    j = bm.joints(host, np.zeros(N_BETAS))
    v = host.template.vertices
    tags = host.part_labels()

    def half_axes(tag, a, b):
        sel = v[tags == tag] - a
        d, u, w = _frame((b - a) / np.linalg.norm(b - a))
        return np.array([np.max(np.abs(sel @ u)), np.max(np.abs(sel @ w))])

    return {
        "joints": j,
        "torso_r": half_axes(TORSO, j[0], j[12]),
        "leg_r": np.maximum(half_axes(LEFT_LEG, j[1], j[7]), half_axes(RIGHT_LEG, j[2], j[8])),
        "arm_r": np.maximum(half_axes(LEFT_ARM, j[16], j[20]), half_axes(RIGHT_ARM, j[17], j[21])),
    }


def _limb_tube(a, b, radius, n_len, n_around, s0, s1):
    """Open tube along the segment a->b between fractions s0 and s1 of a parameterized line."""
    axis = b - a
    length = np.linalg.norm(axis)
    d = axis / length
    stations = np.linspace(s0, s1, n_len)
    return _tube(lambda s: a + s * d, lambda s: radius, d, stations, n_around)


def _garment_geometry(category, layout, shape: _GarmentShape, res):
    j = layout["joints"]
    rt, rl, ra = layout["torso_r"], layout["leg_r"], layout["arm_r"]
    pieces = []
    n_body, n_limb, len_body, len_limb = res
    up = np.array([0.0, 1.0, 0.0])
    pelvis = j[0]
    if category in ("l-shirt", "s-shirt"):
        arm_y = 0.5 * (j[16][1] + j[17][1])
        top = arm_y - j[0][1] - ra[0] - 0.045
        bottom = -0.02 - 0.10 * (0.6 + 0.8 * shape.length)
        r = rt + shape.girth
        pieces.append((_tube(lambda s: pelvis + s * up, lambda s: r, up,
                             np.linspace(bottom, top, len_body), n_body), TORSO))
        reach = (0.80, 0.92) if category == "l-shirt" else (0.30, 0.42)
        frac = reach[0] + (reach[1] - reach[0]) * shape.length
        for c, wr, tag in ((13, 20, LEFT_ARM), (14, 21, RIGHT_ARM)):
            a, b = j[c], j[wr]
            start = r[0] + 0.005 - abs(a[0])
            span = np.linalg.norm(b - a)
            pieces.append((_limb_tube(a, b, ra + shape.limb_girth, len_limb, n_limb,
                                      start, frac * span), tag))
    elif category in ("l-pant", "s-pant"):
        r = rt + shape.girth
        top = 0.06 + 0.03 * shape.length
        pieces.append((_tube(lambda s: pelvis + s * up, lambda s: r, up,
                             np.linspace(-0.05, top, len_body // 2 + 1), n_body), TORSO))
        reach = (0.80, 0.90) if category == "l-pant" else (0.40, 0.50)
        frac = reach[0] + (reach[1] - reach[0]) * shape.length
        for hip, ankle, tag in ((1, 7, LEFT_LEG), (2, 8, RIGHT_LEG)):
            a, b = j[hip], j[ankle]
            span = np.linalg.norm(b - a)
            pieces.append((_limb_tube(a, b, rl + shape.limb_girth, len_limb, n_limb,
                                      0.06, frac * span), tag))
    else:
        hip_r = np.maximum(rt, [abs(j[1][0]) + rl[0], rl[1]])
        r_top = hip_r + shape.girth
        reach = (0.78, 0.86) if category == "l-skirt" else (0.32, 0.42)
        leg_len = abs(j[7][1] - j[1][1])
        bottom = j[1][1] - j[0][1] - (reach[0] + (reach[1] - reach[0]) * shape.length) * leg_len
        top = 0.06
        flare = shape.flare

        def radius(s):
            return r_top + flare * (top - s) / (top - bottom)

        pieces.append((_tube(lambda s: pelvis + s * up, radius, up,
                             np.linspace(top, bottom, len_body + len_limb), n_body), LOWER_BODY))
    verts, faces, prior = [], [], []
    off = 0
    for (v, f), tag in pieces:
        if category.endswith("skirt"):
            f = f[:, ::-1]  # stations run downward, flip to keep normals outward
        verts.append(v)
        faces.append(f + off)
        prior.append(np.full(len(v), tag))
        off += len(v)
    return np.concatenate(verts), np.concatenate(faces), np.concatenate(prior)


DEFAULT_GARMENT_RESOLUTION = (16, 10, 8, 8)


def _random_shape(rng) -> _GarmentShape:
    return _GarmentShape(girth=rng.uniform(0.01, 0.03), limb_girth=rng.uniform(0.01, 0.025),
                         length=rng.uniform(0.0, 1.0), flare=rng.uniform(0.06, 0.12))


NOMINAL_SHAPE = _GarmentShape(girth=0.02, limb_girth=0.0175, length=0.5, flare=0.09)


def random_garment_mesh(category, host: BodyModel, rng, resolution=DEFAULT_GARMENT_RESOLUTION) -> Mesh:
    v, f, prior = _garment_geometry(category, _body_layout(host), _random_shape(rng), resolution)
    return Mesh(v, f, prior)


def synth_garment_template(category: str, seed: int, host: BodyModel, n_corpus: int = 50,
                           resolution=DEFAULT_GARMENT_RESOLUTION):
    """Template with a PCA space fitted to a randomized corpus; returns (template, corpus)."""
    if category not in CATEGORIES:
        raise ValueError(f"unknown garment category {category!r}")
    layout = _body_layout(host)
    rng = np.random.default_rng([seed, CATEGORIES.index(category)])
    corpus = []
    prior = None
    for _ in range(n_corpus):
        v, f, prior = _garment_geometry(category, layout, _random_shape(rng), resolution)
        corpus.append(Mesh(v, f))
    template = template_from_corpus(category, corpus, prior)
    return template, corpus


def nominal_garment_mesh(category, host: BodyModel, resolution=DEFAULT_GARMENT_RESOLUTION) -> Mesh:
    v, f, prior = _garment_geometry(category, _body_layout(host), NOMINAL_SHAPE, resolution)
    return Mesh(v, f, prior)


def tube_garment(host: BodyModel, seed: int, n_around: int = 12, n_len: int = 8) -> Mesh:
    """A single random sleeve-like tube around a random limb, for oracle checks."""
    rng = np.random.default_rng(seed)
    layout = _body_layout(host)
    j = layout["joints"]
    choice = rng.integers(4)
    a, b, tag, r = [(j[1], j[7], LEFT_LEG, layout["leg_r"]), (j[2], j[8], RIGHT_LEG, layout["leg_r"]),
                    (j[16], j[20], LEFT_ARM, layout["arm_r"]), (j[17], j[21], RIGHT_ARM, layout["arm_r"])][choice]
    span = np.linalg.norm(b - a)
    s0 = rng.uniform(0.05, 0.3) * span
    s1 = rng.uniform(0.6, 0.95) * span
    v, f = _limb_tube(a, b, r + rng.uniform(0.008, 0.03), n_len, n_around, s0, s1)
    return Mesh(v, f, np.full(len(v), tag))
