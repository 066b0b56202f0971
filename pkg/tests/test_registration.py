import numpy as np
import pytest

from garmentkit import registration as rg, synth
from garmentkit.dataset import dressed_body
from garmentkit.losses import find_pair_arrays, point_to_plane
from garmentkit.mesh import Mesh
from garmentkit.transfer import idw_transfer

from conftest import grid_mesh


@pytest.fixture(scope="module")
def case(small_body):
    t = synth.synth_garment_template("s-shirt", 0, small_body, n_corpus=10)[0]
    w = idw_transfer(t.rest_mesh, dressed_body(small_body, np.zeros(10)), small_body.weights)
    rng = np.random.default_rng(0)
    truth = rg.FitParams(np.where(t.pca_scales > 0, rng.normal(size=64), 0.0), np.zeros((t.n_vertices, 3)),
                         0.5 * rng.normal(size=10), 0.01 * rng.normal(size=(24, 3)), np.array([0.01, -0.02, 0.015]))
    base = rg.FitProblem(t.rest_mesh, small_body.template, small_body, t, w)
    tg, tb = rg.fitted_meshes(base, truth)
    return small_body, t, w, truth, tg, tb


def _problem(case, **kw):
    body, t, w, _, tg, tb = case
    weights = kw.pop("weights", rg.TermWeights())
    return rg.FitProblem(tg, tb, body, t, w, weights, rg.FitSettings(**kw))


def _med_mm(problem, a, b):
    ga, ba = rg.fitted_meshes(problem, a)
    gb, bb = rg.fitted_meshes(problem, b)
    return 1000 * np.mean(np.r_[np.linalg.norm(ga.vertices - gb.vertices, axis=1),
                                np.linalg.norm(ba.vertices - bb.vertices, axis=1)])


def test_point_to_plane_cases():
    g = grid_mesh(5, 5).with_vertices(grid_mesh(5, 5).vertices * 0.01)
    pairs = find_pair_arrays(g, g)[:2]
    assert point_to_plane(g, g, pairs) == 0.0
    up = g.with_vertices(g.vertices + [0, 0, 0.003])
    assert abs(point_to_plane(up, g, pairs) - 0.003 ** 2) < 1e-18
    slide = g.with_vertices(g.vertices + [0.004, -0.002, 0])
    assert point_to_plane(slide, g, pairs) == 0.0
    assert point_to_plane(g, g, (np.zeros(0, int), np.zeros(0, int))) == 0.0


def test_settings_validation():
    with pytest.raises(ValueError):
        rg.TermWeights(reg_beta=-1.0)
    with pytest.raises(ValueError):
        rg.FitSettings(max_iters=0)
    with pytest.raises(ValueError):
        rg.FitSettings(optimizer="newton")
    with pytest.raises(ValueError):
        rg.FitParams(np.full(64, np.nan), np.zeros((3, 3)), np.zeros(10), np.zeros(72), np.zeros(3))


def test_params_json_and_scan_split(case):
    _, t, _, truth, tg, tb = case
    back = rg.FitParams.from_json(truth.to_json(), t.n_vertices)
    for k in ("alpha", "displacement", "beta", "theta", "translation"):
        assert np.array_equal(getattr(back, k), getattr(truth, k))
    assert np.array_equal(rg.FitParams.from_json({}, 5).displacement, np.zeros((5, 3)))
    mesh, labels = rg.join_scan(tg, tb)
    g, s = rg.split_target(mesh, labels)
    assert np.array_equal(g.vertices, tg.vertices) and np.array_equal(g.faces, tg.faces)
    assert np.array_equal(s.vertices, tb.vertices) and np.array_equal(s.faces, tb.faces)
    with pytest.raises(ValueError):
        rg.split_target(mesh, labels[:-1])


@pytest.mark.parametrize("seed", range(3))
def test_energy_gradient(case, seed):
    body, t, w, truth, tg, tb = case
    rng = np.random.default_rng(seed)
    prob = _problem(case)
    x = rg.FitParams(truth.alpha * 0.8, 1e-3 * rng.normal(size=(t.n_vertices, 3)), truth.beta * 1.2,
                     truth.theta + 0.02 * rng.normal(size=(24, 3)), truth.translation * 0.8)
    obj = rg._Objective(prob)
    z = obj.pack(x)
    pairs = obj.pairs(z)
    _, _, g = obj(z, pairs)
    idx = np.r_[np.arange(0, 64, 7), rng.choice(np.arange(64, len(z)), 40, replace=False)]
    h = 1e-6
    for i in idx:
        zp, zm = z.copy(), z.copy()
        zp[i] += h
        zm[i] -= h
        fd = (obj(zp, pairs, False)[0] - obj(zm, pairs, False)[0]) / (2 * h)
        assert abs(fd - g[i]) <= 1e-4 * max(abs(fd), 1e-2 * np.abs(g).max())


def test_energy_at_truth_is_regularizer_floor(case):
    _, _, _, truth, _, _ = case
    prob = _problem(case)
    e, terms, _ = rg.total_energy(prob, truth)
    data = {k: v for k, v in terms.items() if not k.startswith("reg")}
    assert max(data.values()) < 1e-12
    w = prob.weights
    floor = w.reg_alpha * truth.alpha @ truth.alpha + w.reg_beta * truth.beta @ truth.beta
    assert abs(e - floor) < 1e-9


def test_init_at_truth_stays_at_floor(case):
    _, _, _, truth, _, _ = case
    prob = _problem(case, max_iters=50)
    r = rg.fit_rigged(prob, truth)
    e_truth = rg.total_energy(prob, truth)[0]
    assert r.converged
    assert r.final_energy <= e_truth and (e_truth - r.final_energy) < 1e-3 * e_truth
    assert _med_mm(prob, r.params, truth) < 0.01


def test_regularizer_only_limit(case):
    _, t, _, truth, _, _ = case
    zero = rg.TermWeights(point_to_plane=0.0, point_to_point=0.0, interpenetration=0.0,
                          reg_alpha=1.0, reg_beta=1.0, reg_disp=1.0)
    prob = _problem(case, weights=zero, max_iters=60)
    start = rg.FitParams(truth.alpha, 1e-3 * np.ones((t.n_vertices, 3)), truth.beta, truth.theta, truth.translation)
    r = rg.fit_rigged(prob, start)
    assert np.abs(r.params.alpha).max() < 1e-4 * np.abs(truth.alpha).max()
    assert np.abs(r.params.beta).max() < 1e-4 * np.abs(truth.beta).max()
    assert np.abs(r.params.displacement).max() < 1e-5
    assert np.array_equal(r.params.theta, truth.theta)


def test_rigged_monotone_and_deterministic(case):
    _, _, _, truth, _, _ = case
    prob = _problem(case, max_iters=30)
    init = rg.FitParams(truth.alpha * 0.8, truth.displacement, truth.beta * 0.8, truth.theta * 0.8,
                        truth.translation * 0.8)
    a = rg.fit_rigged(prob, init, seed=3)
    b = rg.fit_rigged(prob, init, seed=3)
    assert all(e1 <= e0 for e0, e1 in zip(a.start_trace, a.energy_trace))
    assert a.final_energy <= a.initial_energy_final_pairs
    assert not a.converged and a.iterations == 30
    assert a.energy_trace == b.energy_trace
    for k in ("alpha", "displacement", "beta", "theta", "translation"):
        assert np.array_equal(getattr(a.params, k), getattr(b.params, k))
    assert _med_mm(prob, a.params, truth) < _med_mm(prob, init, truth)


@pytest.mark.parametrize("optimizer", ["momentum", "adam"])
def test_alternative_optimizers_descend(case, optimizer):
    _, _, _, truth, _, _ = case
    lr = 0.05 if optimizer == "adam" else 1.0
    prob = _problem(case, max_iters=20, optimizer=optimizer, lr=lr)
    init = rg.FitParams(truth.alpha * 0.8, truth.displacement, truth.beta * 0.8, truth.theta, truth.translation)
    r = rg.fit_rigged(prob, init)
    assert all(e1 <= e0 for e0, e1 in zip(r.start_trace, r.energy_trace))
    assert r.energy_trace[-1] < r.start_trace[0]


def test_posed_stage_one_noop_on_rigged_target(case):
    _, _, _, truth, _, _ = case
    prob = _problem(case, max_iters=15)
    r = rg.fit_posed(prob, truth)
    assert np.abs(r.stage1.params.theta - truth.theta).max() < 1e-4
    assert np.abs(r.stage1.params.translation - truth.translation).max() < 1e-6
    assert all(e1 <= e0 for e0, e1 in zip(r.start_trace, r.energy_trace))


def test_report_json(case, tmp_path):
    import json
    _, _, _, truth, _, _ = case
    prob = _problem(case, max_iters=3)
    r = rg.fit_posed(prob, truth)
    rg.save_report(r, tmp_path / "r.json")
    d = json.loads((tmp_path / "r.json").read_text())
    assert set(d) >= {"params", "energy_trace", "terms", "residual_med_mm", "converged", "stage1"}
    assert "total" in d["terms"]
