import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from garmentkit import body as bm, synth
from garmentkit.body import LEFT_LEG, RIGHT_LEG, TORSO, BodyModel, Pose
from garmentkit.dataset import dressed_body
from garmentkit.garment import GarmentParams, garment_mesh
from garmentkit.mesh import Mesh, vertex_normals
from garmentkit.transfer import (TransferConfig, candidate_neighbors, deform_with_weights, idw_transfer,
                                 idw_weights, load_weights, save_weights, select_neighbors, weight_metrics)

from conftest import grid_mesh, random_simplex
from oracles import brute_idw


def _one_hot(n, cols):
    w = np.zeros((n, 24))
    w[np.arange(n), cols] = 1.0
    return w


def test_config_validation():
    for kw in ({"k": 0}, {"max_distance": 0.0}, {"idw_power": -1.0}):
        with pytest.raises(ValueError):
            TransferConfig(**kw)
    c = TransferConfig(k=3)
    assert TransferConfig.from_json(c.to_json()) == c


def test_coincident_vertex_k1():
    body = grid_mesh(5, 5)
    garment = Mesh(body.vertices[[7]] + [0, 0, 0], [])
    assert candidate_neighbors(0, garment, body, TransferConfig(k=1)) == [7]


def test_prior_filter_picks_matching_leg():
    # two parallel strips, left-leg at x=0 and right-leg at x=0.02; garment vertex in the middle
    a, b = grid_mesh(2, 4), grid_mesh(2, 4)
    v = np.vstack([a.vertices * 0.01, b.vertices * 0.01 + [0.02, 0, 0]])
    body = Mesh(v, np.vstack([a.faces, b.faces + a.n_vertices]),
                np.r_[np.full(a.n_vertices, LEFT_LEG), np.full(b.n_vertices, RIGHT_LEG)])
    garment = Mesh([[0.015, 0.015, 0.001]], [], [RIGHT_LEG])
    got = candidate_neighbors(0, garment, body, TransferConfig(k=4))
    assert len(got) == 4 and all(body.labels[j] == RIGHT_LEG for j in got)


def test_far_vertex_fallback():
    body = grid_mesh(4, 4)
    body = Mesh(body.vertices, body.faces, np.r_[np.full(8, TORSO), np.full(8, LEFT_LEG)])
    garment = Mesh([[10.0, 10.0, 10.0]], [], [LEFT_LEG])
    got = candidate_neighbors(0, garment, body, TransferConfig(k=4))
    assert len(got) == 4 and all(body.labels[j] == LEFT_LEG for j in got)
    # fewer compatible than K: compatible ones come first, then nearest others
    got = candidate_neighbors(0, garment, body, TransferConfig(k=10))
    assert len(got) == 10 and all(body.labels[j] == LEFT_LEG for j in got[:8])


def test_normal_filter():
    body = grid_mesh(3, 3)
    flipped = Mesh(body.vertices, body.faces[:, ::-1])
    g = Mesh([[1.0, 1.0, 0.01], [0, 0, 0.01], [1, 0, 0.01]], [[0, 1, 2]][:0])
    # no faces on the garment: zero normals, every donor fails the angle test, so fallback applies
    idx, _ = select_neighbors(g, body, TransferConfig(k=1, max_distance=1.0))
    assert idx[0, 0] == 4
    up = np.tile([0.0, 0.0, 1.0], (3, 1))
    idx_ok, d_ok = select_neighbors(g, body, TransferConfig(k=9, max_distance=5.0), garment_normals=up)
    idx_no, _ = select_neighbors(g, flipped, TransferConfig(k=9, max_distance=5.0), garment_normals=up)
    assert np.all(idx_ok >= 0) and np.all(np.isfinite(d_ok))
    # flipped body: nothing passes, so fallback fills by distance alone
    assert np.array_equal(np.sort(idx_no, 1), np.sort(idx_ok, 1))


def test_coincident_patch_copies_rows():
    rng = np.random.default_rng(0)
    body = grid_mesh(6, 6)
    bw = random_simplex(rng, body.n_vertices)
    sub = np.arange(0, 36, 3)
    garment = Mesh(body.vertices[sub], [])
    w = idw_transfer(garment, body, bw, TransferConfig(smooth_iterations=0))
    assert np.array_equal(w, bw[sub])


def test_symmetric_idw():
    idx = np.array([[0, 1]])
    dist = np.array([[0.3, 0.3]])
    w = idw_weights(idx, dist, _one_hot(2, [3, 9]), 2.0)
    assert w[0, 3] == 0.5 and w[0, 9] == 0.5 and w.sum() == 1.0


def test_idw_hand_values():
    idx = np.array([[0, 1]])
    w = idw_weights(idx, np.array([[1.0, 2.0]]), _one_hot(2, [0, 1]), 2.0)
    assert np.allclose(w[0, :2], [0.8, 0.2], atol=1e-15)


def test_empty_garment_rejected():
    body = grid_mesh()
    with pytest.raises(ValueError):
        idw_transfer(Mesh(np.zeros((0, 3))), body, _one_hot(body.n_vertices, 0))


def test_bad_body_weights_rejected():
    body = grid_mesh()
    w = _one_hot(body.n_vertices, 0) * 0.5
    with pytest.raises(ValueError):
        idw_transfer(body, body, w)


def _tube_case(small_body, category, seed):
    rng = np.random.default_rng(seed)
    t = synth.synth_garment_template(category, seed, small_body, n_corpus=5)[0]
    from garmentkit.garment import garment_rest
    g = garment_rest(t, np.where(t.pca_scales > 0, rng.normal(size=64), 0))
    return g, dressed_body(small_body, np.zeros(10))


@pytest.mark.parametrize("category", ["l-pant", "s-skirt", "s-shirt"])
def test_matches_brute_force(small_body, category):
    g, body = _tube_case(small_body, category, 3)
    cfg = TransferConfig()
    w = idw_transfer(g, body, small_body.weights, cfg)
    ref = brute_idw(g, body, small_body.weights, cfg.compatibility, normals=vertex_normals)
    assert np.abs(w.sum(1) - 1).max() < 1e-6 and w.min() >= 0
    assert np.abs(w - ref).sum() < 1e-9


def test_permutation_equivariance(small_body):
    g, body = _tube_case(small_body, "l-shirt", 1)
    perm = np.random.default_rng(2).permutation(g.n_vertices)
    inv = np.argsort(perm)
    gp = Mesh(g.vertices[perm], inv[g.faces], g.labels[perm])
    a = idw_transfer(g, body, small_body.weights)
    b = idw_transfer(gp, body, small_body.weights)
    assert np.abs(a[perm] - b).max() < 1e-12


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_idw_in_convex_hull(seed):
    rng = np.random.default_rng(seed)
    body = grid_mesh(6, 6).with_vertices(grid_mesh(6, 6).vertices * 0.01)
    bw = random_simplex(rng, body.n_vertices)
    pts = 0.05 * rng.random((10, 3))
    g = Mesh(pts, [])
    cfg = TransferConfig(k=int(rng.integers(1, 6)), max_distance=1.0)
    idx, dist = select_neighbors(g, body, cfg, garment_normals=np.tile([0, 0, 1.0], (10, 1)))
    w = idw_weights(idx, dist, bw, cfg.idw_power)
    for i in range(10):
        rows = bw[idx[i][idx[i] >= 0]]
        assert np.all(w[i] >= rows.min(0) - 1e-12) and np.all(w[i] <= rows.max(0) + 1e-12)
    assert np.abs(w.sum(1) - 1).max() < 1e-12


@given(st.integers(0, 10_000), st.integers(0, 12), st.floats(0.05, 1.0))
@settings(max_examples=20, deadline=None)
def test_output_on_simplex(seed, iters, lam):
    rng = np.random.default_rng(seed)
    body = grid_mesh(5, 5)
    g = grid_mesh(4, 4, z=0.02).with_vertices(grid_mesh(4, 4, z=0.02).vertices + 0.1 * rng.random((16, 3)))
    w = idw_transfer(g, body, random_simplex(rng, body.n_vertices),
                     TransferConfig(max_distance=0.5, smooth_iterations=iters, smooth_lambda=lam))
    assert np.abs(w.sum(1) - 1).max() < 1e-9 and w.min() >= 0


def test_weights_json(tmp_path):
    w = random_simplex(np.random.default_rng(0), 7)
    save_weights(w, tmp_path / "w.json")
    assert np.array_equal(load_weights(tmp_path / "w.json"), w)
    (tmp_path / "bad.json").write_text('{"weights": [[0.5, 0.1]]}')
    with pytest.raises(ValueError):
        load_weights(tmp_path / "bad.json")


def test_deform_cases(templates, body_model):
    t = templates["l-skirt"]
    g = t.rest_mesh
    w = idw_transfer(g, dressed_body(body_model, np.zeros(10)), body_model.weights)
    tr = np.array([0.2, 0.0, -0.1])
    assert np.abs(deform_with_weights(g, w, body_model, np.zeros(10), Pose(translation=tr)).vertices
                  - (g.vertices + tr)).max() < 1e-14
    pose = Pose(0.2 * np.random.default_rng(0).normal(size=(24, 3)), tr)
    a = deform_with_weights(g, w, body_model, np.zeros(10), pose).vertices
    b = garment_mesh(t, GarmentParams(), w, body_model, np.zeros(10), pose).vertices
    assert np.abs(a - b).max() < 1e-12
    T = bm.forward_kinematics(bm.joints(body_model, np.zeros(10)), pose.theta)[5]
    c = deform_with_weights(g, _one_hot(g.n_vertices, 5), body_model, np.zeros(10), pose).vertices
    assert np.abs(c - (g.vertices @ T[:3, :3].T + T[:3, 3] + tr)).max() < 1e-12


def _two_joint_chain():
    """Root at origin, child at (0, 1, 0); other joints collapse onto the root."""
    v = np.array([[0.0, 2.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    reg = np.zeros((24, 3))
    reg[:, 1] = 1.0
    reg[1] = [0.0, 0.5, 0.5]  # joint 1 at the mean of vertices 1 and 2 -> (0.5, 0, 0.5)
    w = _one_hot(3, [0, 0, 0])
    return BodyModel(Mesh(v, [[0, 1, 2]]), np.zeros((9, 10)), np.zeros((9, 207)), reg, w)


def test_metrics_two_joint_chain():
    model = _two_joint_chain()
    g = Mesh(model.template.vertices, [[0, 1, 2]])
    gt = _one_hot(3, [0, 0, 0])
    assert weight_metrics(gt, gt, g, model, np.zeros(10), [Pose()]) == \
        {"l1_mean": 0.0, "l1_std": 0.0, "med_mean": 0.0, "med_std": 0.0}
    pred = gt.copy()
    pred[0] = _one_hot(1, [1])[0]
    th = np.zeros((24, 3))
    th[1] = [0.0, 0.0, np.pi / 2]
    m = weight_metrics(pred, gt, g, model, np.zeros(10), [Pose(th)])
    # vertex 0 at (0,2,0) rotated 90 deg about z around joint 1 at (0.5,0,0.5)
    c = np.array([0.5, 0.0, 0.5])
    rel = np.array([0.0, 2.0, 0.0]) - c
    moved = c + np.array([-rel[1], rel[0], rel[2]])
    want = np.linalg.norm(moved - [0.0, 2.0, 0.0]) * 1000 / 3
    assert abs(m["med_mean"] - want) < 1e-9
    assert abs(m["l1_mean"] - 2 / 72) < 1e-15
    with pytest.raises(ValueError):
        weight_metrics(pred[:2], gt, g, model, np.zeros(10), [Pose()])
