import json
import subprocess
import sys

import numpy as np
import pytest

from garmentkit import body as bm, cli, registration as rg, skinnet as sn, synth, transfer
from garmentkit.body import Pose, load_body_model, save_body_model
from garmentkit.garment import GarmentParams, garment_mesh, garment_rest, load_template, save_params
from garmentkit.mesh import Mesh, load_obj, obj_text, save_labels, save_obj


def run(*args):
    return cli.main([str(a) for a in args])


@pytest.fixture(scope="module")
def fx(tmp_path_factory):
    d = tmp_path_factory.mktemp("fx")
    assert run("gen-fixtures", "--seed", 3, "--out-dir", d, "--n-train", 12, "--n-test", 6, "--n-corpus", 10) == 0
    return d


def _pose_file(path, theta=None, translation=(0.0, 0.0, 0.0)):
    th = np.zeros((24, 3)) if theta is None else theta
    path.write_text(json.dumps({"theta": np.ravel(th).tolist(), "translation": list(translation)}))
    return path


def test_gen_fixtures_layout(fx, tmp_path):
    m = json.loads((fx / "manifest.json").read_text())
    assert len(list((fx / "templates").glob("*.json"))) == 6
    assert m["splits"]["train"]["n"] == 12 and m["splits"]["test"]["n"] == 6
    assert len(json.loads((fx / "train.json").read_text())["samples"]) == 12
    again = tmp_path / "again"
    run("gen-fixtures", "--seed", 3, "--out-dir", again, "--n-train", 12, "--n-test", 6, "--n-corpus", 10)
    for f in fx.rglob("*.json"):
        assert (again / f.relative_to(fx)).read_bytes() == f.read_bytes()
    small = tmp_path / "small"
    run("gen-fixtures", "--out-dir", small, "--n-train", 10, "--n-test", 2, "--n-corpus", 5)
    assert json.loads((small / "manifest.json").read_text())["splits"]["train"]["n"] == 10


def test_weights_parity_and_simplex(fx, tmp_path):
    out = tmp_path / "w.json"
    assert run("weights", "--garment", fx / "templates/l-pant.json", "--body", fx / "body.json", "--out", out) == 0
    w = transfer.load_weights(out)
    assert np.abs(w.sum(1) - 1).max() < 1e-6 and w.min() >= 0
    model = load_body_model(fx / "body.json")
    lib = cli.compute_weights(load_template(fx / "templates/l-pant.json").rest_mesh, model, np.zeros(10))
    ref = tmp_path / "ref.json"
    transfer.save_weights(lib, ref)
    assert out.read_bytes() == ref.read_bytes()
    out2 = tmp_path / "w2.json"
    run("weights", "--garment", fx / "templates/l-pant.json", "--body", fx / "body.json", "--out", out2)
    assert out2.read_bytes() == out.read_bytes()


def test_weights_coincident_patch(fx, tmp_path):
    model = load_body_model(fx / "body.json")
    sub = np.arange(0, model.n_vertices, 7)
    save_obj(Mesh(model.template.vertices[sub]), tmp_path / "patch.obj")
    out = tmp_path / "w.json"
    assert run("weights", "--garment", tmp_path / "patch.obj", "--body", fx / "body.json", "--no-smooth",
               "--out", out) == 0
    got = transfer.load_weights(out)
    # OBJ stores 9 decimals, so coincidence is up to that rounding; allow the IDW blend of a 1e-9 offset
    assert np.abs(got - model.weights[sub]).max() < 1e-6


def test_weights_bad_input(fx, tmp_path):
    (tmp_path / "bad.obj").write_text("v 0 0\n")
    assert run("weights", "--garment", tmp_path / "bad.obj", "--body", fx / "body.json", "--out", tmp_path / "o") == 3
    assert run("weights", "--garment", tmp_path / "missing.obj", "--body", fx / "body.json",
               "--out", tmp_path / "o") == 3
    with pytest.raises(SystemExit) as e:
        run("weights", "--garment", "x", "--body", "y", "--out", "z", "--bogus")
    assert e.value.code == 2


def test_train_eval_skinnet(fx, tmp_path):
    ck0 = tmp_path / "c0.json"
    assert run("train-skinnet", "--dataset", fx / "manifest.json", "--ckpt", ck0, "--epochs", 0, "--seed", 4,
               "--width", 16, "--blocks", 1) == 0
    assert np.array_equal(sn.load_checkpoint(ck0).flat(), sn.init_params(4, width=16, blocks=1).flat())
    ck = tmp_path / "c.json"
    args = ("train-skinnet", "--dataset", fx / "manifest.json", "--ckpt", ck, "--epochs", 40, "--lr", 1e-2,
            "--optimizer", "adam", "--batch-size", 6, "--width", 16, "--blocks", 1, "--history", tmp_path / "h.csv")
    assert run(*args) == 0
    first = ck.read_bytes()
    assert run(*args) == 0 and ck.read_bytes() == first
    assert len((tmp_path / "h.csv").read_text().splitlines()) == 41
    out = tmp_path / "m.json"
    assert run("eval-skinnet", "--dataset", fx / "manifest.json", "--split", "train", "--ckpt", ck,
               "--n-poses", 3, "--out", out) == 0
    m = json.loads(out.read_text())
    assert len(m["categories"]) == 6
    assert set(m["all"]) == {"l1_mean", "l1_std", "med_mean", "med_std"}
    model = load_body_model(fx / "body.json")
    from garmentkit.dataset import load_samples
    samples = load_samples(fx / "train.json", model)
    uniform = np.mean(np.concatenate([np.abs(1 / 24 - s.weights).ravel() for s in samples]))
    assert m["all"]["l1_mean"] < uniform
    lib = sn.evaluate(sn.load_checkpoint(ck), samples, model, transfer.random_poses(3, 0), by_category=True)
    ref = tmp_path / "ref.json"
    cli._write_json(lib, ref)
    assert ref.read_bytes() == out.read_bytes()
    assert run("eval-skinnet", "--dataset", fx / "manifest.json", "--ckpt", tmp_path / "nope.json",
               "--out", out) == 3


@pytest.fixture(scope="module")
def shirt(fx, tmp_path_factory):
    d = tmp_path_factory.mktemp("shirt")
    tpl = fx / "templates/l-shirt.json"
    run("weights", "--garment", tpl, "--body", fx / "body.json", "--out", d / "w.json")
    return tpl, d / "w.json"


def test_repose(fx, shirt, tmp_path):
    tpl, wpath = shirt
    t, model, w = load_template(tpl), load_body_model(fx / "body.json"), transfer.load_weights(wpath)
    out = tmp_path / "g.obj"
    assert run("repose", "--garment-template", tpl, "--weights", wpath, "--body", fx / "body.json", "--out", out) == 0
    assert out.read_text() == obj_text(garment_rest(t, np.zeros(64)))
    assert (tmp_path / "g.body.obj").read_text() == obj_text(bm.rest_body(model, np.zeros(10)))
    th = np.zeros((24, 3))
    th[0] = [0.2, -0.5, 0.1]
    pose = Pose(th, np.array([0.1, 0.2, 0.3]))
    p = GarmentParams(np.linspace(-1, 1, 64))
    save_params(p, t.n_vertices, tmp_path / "p.json")
    assert run("repose", "--garment-template", tpl, "--params", tmp_path / "p.json", "--weights", wpath,
               "--body", fx / "body.json", "--pose", _pose_file(tmp_path / "pose.json", th, (0.1, 0.2, 0.3)),
               "--beta", ",".join(["0.5"] * 10), "--out", out, "--body-out", tmp_path / "b.obj") == 0
    beta = np.full(10, 0.5)
    assert out.read_text() == obj_text(garment_mesh(t, p, w, model, beta, pose))
    assert (tmp_path / "b.obj").read_text() == obj_text(bm.body_mesh(model, beta, pose))
    j0 = bm.joints(model, beta)[0]
    rest = garment_rest(t, p.alpha).vertices
    want = (rest - j0) @ bm.rodrigues(th[0]).T + j0 + pose.translation
    assert np.abs(load_obj(out).vertices - want).max() < 1e-8


def test_transfer(fx, shirt, tmp_path, caplog):
    tpl, wpath = shirt
    t, model, w = load_template(tpl), load_body_model(fx / "body.json"), transfer.load_weights(wpath)
    pose = _pose_file(tmp_path / "pose.json", 0.1 * np.random.default_rng(0).normal(size=(24, 3)))
    same = tmp_path / "same.obj"
    assert run("transfer", "--garment-template", tpl, "--source-body", fx / "body.json", "--weights", wpath,
               "--target-pose", pose, "--out", same) == 0
    want = garment_mesh(t, GarmentParams(), w, model, np.zeros(10), Pose.from_json(json.loads(pose.read_text())))
    assert same.read_text() == obj_text(want)
    save_body_model(synth.scaled_body_model(model, 1.2), tmp_path / "big.json")
    big = tmp_path / "big.obj"
    with caplog.at_level("INFO", logger="garmentkit"):
        assert run("transfer", "--garment-template", tpl, "--source-body", fx / "body.json",
                   "--target-body", tmp_path / "big.json", "--out", big) == 0
    assert any("transferring" in r.message for r in caplog.records)
    grown = np.ptp(load_obj(big).vertices, 0) / np.ptp(t.rest_mesh.vertices, 0)
    # retargeting follows the joints, which all sit in the z = 0 plane, so depth is kept
    assert grown[0] > 1.1 and grown[1] > 1.1 and grown[2] > 1 - 1e-6


@pytest.fixture(scope="module")
def scan(tmp_path_factory, small_body):
    d = tmp_path_factory.mktemp("scan")
    t = synth.synth_garment_template("s-shirt", 0, small_body, n_corpus=10)[0]
    from garmentkit.garment import save_template
    save_body_model(small_body, d / "body.json")
    save_template(t, d / "t.json")
    w = cli.compute_weights(t.rest_mesh, small_body, np.zeros(10))
    transfer.save_weights(w, d / "w.json")
    rng = np.random.default_rng(0)
    truth = rg.FitParams(np.where(t.pca_scales > 0, rng.normal(size=64), 0.0), np.zeros((t.n_vertices, 3)),
                         0.5 * rng.normal(size=10), np.zeros((24, 3)), np.array([0.01, -0.02, 0.015]))
    prob = rg.FitProblem(t.rest_mesh, small_body.template, small_body, t, w)
    g, b = rg.fitted_meshes(prob, truth)
    mesh, labels = rg.join_scan(g, b)
    save_obj(mesh, d / "scan.obj")
    save_labels(labels, d / "seg.json")
    init = rg.FitParams(truth.alpha * 0.8, truth.displacement, truth.beta * 0.8, truth.theta, truth.translation * 0.8)
    (d / "init.json").write_text(json.dumps(init.to_json()))
    return d


def _fit_args(d, out, *extra):
    return ("fit", "--target", d / "scan.obj", "--segmentation", d / "seg.json", "--body", d / "body.json",
            "--garment-template", d / "t.json", "--weights", d / "w.json", "--out", out) + extra


def test_fit_rigged_and_posed(scan, tmp_path):
    out = tmp_path / "fit.json"
    code = run(*_fit_args(scan, out, "--init", scan / "init.json", "--max-iters", 120))
    rep = json.loads(out.read_text())
    assert code == (0 if rep["converged"] else 4)
    assert rep["residual_med_mm"] < 1.0
    assert {"point_to_plane_garment", "point_to_plane_body", "reg_alpha", "total"} <= set(rep["terms"])
    assert load_obj(tmp_path / "fit.garment.obj").n_vertices == load_template(scan / "t.json").n_vertices
    assert (tmp_path / "fit.body.obj").exists()
    first = out.read_bytes()
    run(*_fit_args(scan, out, "--init", scan / "init.json", "--max-iters", 120))
    assert out.read_bytes() == first
    assert run(*_fit_args(scan, tmp_path / "p.json", "--mode", "posed")) == 2
    code = run(*_fit_args(scan, tmp_path / "p.json", "--mode", "posed", "--init", out, "--max-iters", 10))
    assert code in (0, 4) and "stage1" in json.loads((tmp_path / "p.json").read_text())


def test_fit_nonconvergence_exit(scan, tmp_path):
    assert run(*_fit_args(scan, tmp_path / "f.json", "--max-iters", 2)) == 4
    assert not json.loads((tmp_path / "f.json").read_text())["converged"]


def test_fit_library_parity(scan, tmp_path):
    out = tmp_path / "fit.json"
    run(*_fit_args(scan, out, "--init", scan / "init.json", "--max-iters", 20))
    model, t = load_body_model(scan / "body.json"), load_template(scan / "t.json")
    from garmentkit.mesh import load_labels
    g, s = rg.split_target(load_obj(scan / "scan.obj"), load_labels(scan / "seg.json"))
    prob = rg.FitProblem(g, s, model, t, transfer.load_weights(scan / "w.json"), settings=rg.FitSettings(max_iters=20))
    init = rg.FitParams.from_json(json.loads((scan / "init.json").read_text()), t.n_vertices)
    rg.save_report(rg.fit_rigged(prob, init), tmp_path / "lib.json")
    assert json.loads(out.read_text()) == json.loads((tmp_path / "lib.json").read_text())


def test_losses(tmp_path):
    g = synth.synth_garment_template("s-skirt", 0, synth.synth_body_model(0, 8, 32), n_corpus=5)[0].rest_mesh
    save_obj(g, tmp_path / "g.obj")
    v = g.vertices.copy()
    v[3, 2] += 0.1
    save_obj(g.with_vertices(v), tmp_path / "g2.obj")
    p = {"beta": [0.0] * 10, "theta": [0.0] * 72, "translation": [0.0] * 3, "alpha": [0.0] * 64}
    (tmp_path / "p.json").write_text(json.dumps(p))
    (tmp_path / "d.json").write_text(json.dumps({"displacement": np.zeros((g.n_vertices, 3)).tolist()}))
    (tmp_path / "cam.json").write_text(json.dumps({"fx": 1000, "fy": 1000, "cx": 512, "cy": 512}))
    out = tmp_path / "l.json"
    assert run("losses", "--pred-params", tmp_path / "p.json", "--gt-params", tmp_path / "p.json",
               "--pred-garment", tmp_path / "g.obj", "--gt-garment", tmp_path / "g.obj",
               "--pred-displacement", tmp_path / "d.json", "--gt-displacement", tmp_path / "d.json",
               "--out", out) == 0
    rep = json.loads(out.read_text())
    assert all(v == 0.0 for v in rep.values()) and {"L_Bp", "L_Gp", "L_G", "L_D1", "L_D2"} <= set(rep)
    assert run("losses", "--pred-garment", tmp_path / "g2.obj", "--gt-garment", tmp_path / "g.obj",
               "--out", out) == 0
    rep = json.loads(out.read_text())
    assert abs(rep["L_G"] - 0.01) < 1e-12
    assert rep["total"] == sum(v for k, v in rep.items() if k != "total")
    assert run("losses", "--pred-garment", tmp_path / "g.obj", "--out", out) == 2
    assert run("losses", "--pred-garment", tmp_path / "g.obj", "--gt-garment", tmp_path / "g.obj",
               "--pred-body", tmp_path / "g2.obj", "--gt-body", tmp_path / "g.obj",
               "--camera", tmp_path / "cam.json", "--out", out) == 3  # skirt crosses the camera plane


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "garmentkit.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "gen-fixtures" in r.stdout
    r = subprocess.run([sys.executable, "-m", "garmentkit.cli", "fit", "--help"], capture_output=True, text=True)
    assert "--mode" in r.stdout


def test_thread_cap(fx, tmp_path, monkeypatch):
    monkeypatch.setenv("GS_THREADS", "1")
    assert run("weights", "--garment", fx / "templates/s-pant.json", "--body", fx / "body.json",
               "--out", tmp_path / "w.json") == 0
