"""garmentkit command line: fixtures, weight transfer, skinning net, reposing, fitting, losses."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import body as bm
from . import dataset, losses, registration, skinnet, transfer
from .body import Pose, load_body_model, save_body_model
from .garment import (GarmentParams, garment_mesh, garment_rest, load_params,
                      load_template, save_template, transfer_garment)
from .mesh import Mesh, load_labels, load_obj, save_obj

log = logging.getLogger("garmentkit")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_NOT_CONVERGED, EXIT_INTERNAL = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


class NotConverged(Exception):
    pass


def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


def _write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True))


def _vector(value, n, key):
    """Zeros if absent; otherwise a JSON file (list or {key: list}) or comma-separated floats."""
    if value is None:
        return np.zeros(n)
    if os.path.exists(value):
        d = _read_json(value)
        v = d[key] if isinstance(d, dict) else d
    else:
        v = [float(x) for x in value.split(",")]
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.shape != (n,):
        raise ValueError(f"{key} needs {n} values, got {v.size}")
    return v


def _pose(path) -> Pose:
    return Pose.rest() if path is None else Pose.from_json(_read_json(path))


def _side_path(out, suffix):
    p = Path(out)
    return p.with_name(p.stem + suffix)


# ---------------------------------------------------------------- fixtures


def fixture_files(out_dir, seed, n_train, n_test, n_corpus=50) -> dict:
    """Write the synthetic fixture set; returns the manifest."""
    out = Path(out_dir)
    (out / "templates").mkdir(parents=True, exist_ok=True)
    model, templates, train, test = dataset.build_fixtures(seed, n_train, n_test, n_corpus)
    save_body_model(model, out / "body.json")
    manifest = {"seed": seed, "body": "body.json", "templates": {}, "splits": {}}
    for t in templates:
        rel = f"templates/{t.category}.json"
        save_template(t, out / rel)
        manifest["templates"][t.category] = rel
    for name, samples in (("train", train), ("test", test)):
        dataset.save_samples(samples, out / f"{name}.json")
        manifest["splits"][name] = {"path": f"{name}.json", "n": len(samples)}
    _write_json(manifest, out / "manifest.json")
    return manifest


def cmd_gen_fixtures(a):
    fixture_files(a.out_dir, a.seed, a.n_train, a.n_test, a.n_corpus)
    log.info("fixtures written to %s", a.out_dir)


def _load_dataset(a):
    """(samples, body model) from a manifest split or a bare sample file plus --body."""
    d = _read_json(a.dataset)
    root = Path(a.dataset).parent
    if "splits" in d:
        model = load_body_model(root / d["body"]) if a.body is None else load_body_model(a.body)
        return dataset.load_samples(root / d["splits"][a.split]["path"], model), model
    if a.body is None:
        raise UsageError("--body is required with a bare sample file")
    model = load_body_model(a.body)
    return dataset.load_samples(a.dataset, model), model


# ---------------------------------------------------------------- weights


def _garment_input(path, labels_path=None) -> Mesh:
    """Garment mesh from a template JSON (prior as labels) or an OBJ plus optional labels."""
    if str(path).endswith(".json"):
        return load_template(path).rest_mesh
    m = load_obj(path)
    if labels_path is not None:
        m = Mesh(m.vertices, m.faces, load_labels(labels_path))
    return m


def compute_weights(garment: Mesh, model, beta, body_weights=None, config=None, smooth=True):
    cfg = config or transfer.TransferConfig()
    if not smooth:
        cfg = replace(cfg, smooth_iterations=0)
    w = model.weights if body_weights is None else body_weights
    return transfer.idw_transfer(garment, dataset.dressed_body(model, beta), w, cfg)


def cmd_weights(a):
    model = load_body_model(a.body)
    garment = _garment_input(a.garment, a.garment_labels)
    cfg = transfer.TransferConfig.from_json(_read_json(a.config)) if a.config else None
    bw = transfer.load_weights(a.body_weights) if a.body_weights else None
    w = compute_weights(garment, model, _vector(a.beta, bm.N_BETAS, "beta"), bw, cfg, not a.no_smooth)
    transfer.save_weights(w, a.out)
    log.info("wrote %d weight rows to %s", len(w), a.out)


# ---------------------------------------------------------------- skinning net


def cmd_train_skinnet(a):
    samples, _ = _load_dataset(a)
    cfg = skinnet.TrainConfig(epochs=a.epochs, lr=a.lr, batch_size=a.batch_size,
                              optimizer=a.optimizer, seed=a.seed)
    params, history = skinnet.train(samples, cfg, width=a.width, blocks=a.blocks, heads=a.heads)
    skinnet.save_checkpoint(params, a.ckpt)
    if a.history:
        skinnet.save_history(history, a.history)
    log.info("trained %d epochs on %d samples, final mean KL %s", a.epochs, len(samples),
             history[-1] if history else "n/a")


def cmd_eval_skinnet(a):
    if not os.path.exists(a.ckpt):
        raise FileNotFoundError(f"checkpoint {a.ckpt} not found")
    params = skinnet.load_checkpoint(a.ckpt)
    samples, model = _load_dataset(a)
    poses = transfer.random_poses(a.n_poses, a.pose_seed)
    metrics = skinnet.evaluate(params, samples, model, poses, by_category=True)
    _write_json(metrics, a.out)
    m = metrics["all"]
    log.info("l1 %.4g +- %.4g, MED %.3f +- %.3f mm", m["l1_mean"], m["l1_std"], m["med_mean"], m["med_std"])


# ---------------------------------------------------------------- reposing and transfer


def cmd_repose(a):
    template = load_template(a.garment_template)
    params = load_params(a.params) if a.params else GarmentParams()
    model = load_body_model(a.body)
    beta = _vector(a.beta, bm.N_BETAS, "beta")
    pose = _pose(a.pose)
    w = transfer.load_weights(a.weights)
    save_obj(garment_mesh(template, params, w, model, beta, pose), a.out)
    save_obj(bm.body_mesh(model, beta, pose), a.body_out or _side_path(a.out, ".body.obj"))


def cmd_transfer(a):
    template = load_template(a.garment_template)
    params = load_params(a.source_params) if a.source_params else GarmentParams()
    src = load_body_model(a.source_body)
    tgt = load_body_model(a.target_body) if a.target_body else src
    src_beta = _vector(a.source_beta, bm.N_BETAS, "beta")
    tgt_beta = _vector(a.target_beta, bm.N_BETAS, "beta")
    if a.weights:
        w = transfer.load_weights(a.weights)
    else:
        log.info("no garment weights given; transferring them from the source body")
        w = compute_weights(garment_rest(template, params.alpha, params.displacement_for(template.n_vertices)),
                            src, src_beta)
    tw = transfer.load_weights(a.target_weights) if a.target_weights else None
    out = transfer_garment(template, params, w, src, src_beta, tgt, tgt_beta, _pose(a.target_pose), tw)
    save_obj(out, a.out)


# ---------------------------------------------------------------- fitting


def _fit_problem(a):
    model = load_body_model(a.body)
    template = load_template(a.garment_template)
    scan = load_obj(a.target)
    tg, ts = registration.split_target(scan, load_labels(a.segmentation), a.garment_label)
    if a.weights:
        w = transfer.load_weights(a.weights)
    else:
        log.info("no garment weights given; transferring them from the neutral body")
        w = compute_weights(template.rest_mesh, model, np.zeros(bm.N_BETAS))
    settings = registration.FitSettings(max_iters=a.max_iters)
    terms = registration.TermWeights(**_read_json(a.term_weights)) if a.term_weights else registration.TermWeights()
    return registration.FitProblem(tg, ts, model, template, w, terms, settings)


def run_fit(problem, mode, init_json=None):
    n = problem.template.n_vertices
    init = None
    if init_json is not None:
        init = registration.FitParams.from_json(init_json.get("params", init_json), n)
    if mode == "rigged":
        return registration.fit_rigged(problem, init)
    return registration.fit_posed(problem, init)


def cmd_fit(a):
    if a.mode == "posed" and a.init is None:
        raise UsageError("--mode posed requires --init (a rigged fit report or parameter JSON)")
    problem = _fit_problem(a)
    result = run_fit(problem, a.mode, _read_json(a.init) if a.init else None)
    registration.save_report(result, a.out)
    g, b = registration.fitted_meshes(problem, result.params)
    save_obj(g, _side_path(a.out, ".garment.obj"))
    save_obj(b, _side_path(a.out, ".body.obj"))
    log.info("%s fit: %d iterations, residual %.3f mm", a.mode, result.iterations, result.residual_med_mm)
    if not result.converged:
        raise NotConverged(f"fit stopped after {result.iterations} iterations without converging")


# ---------------------------------------------------------------- losses


def _maybe(path, loader):
    return None if path is None else loader(path)


def _array(key):
    def load(path):
        d = _read_json(path)
        return np.asarray(d[key] if isinstance(d, dict) else d, dtype=np.float64)
    return load


def loss_report(pred_params=None, gt_params=None, pred_garment=None, gt_garment=None,
                pred_body=None, gt_body=None, pred_joints=None, gt_joints=None,
                pred_disp=None, gt_disp=None, camera=None, garment_rest_mesh=None, body_rest_mesh=None) -> dict:
    """Every loss term whose inputs are present, plus their total."""
    r = {}
    if pred_params is not None:
        r.update(losses.param_losses(pred_params, gt_params))
    if pred_garment is not None:
        r.update(losses.geometry_losses(pred_garment, gt_garment, pred_joints, gt_joints))
    if pred_disp is not None:
        r.update(losses.displacement_losses(pred_disp, gt_disp, gt_garment if gt_garment is not None else pred_garment))
    if camera is not None and pred_garment is not None and pred_body is not None:
        r.update(losses.projection_losses(camera, pred_body, gt_body, pred_garment, gt_garment))
    if garment_rest_mesh is not None and pred_garment is not None and pred_body is not None:
        r["L_inters"] = losses.layered_interpenetration(garment_rest_mesh, body_rest_mesh,
                                                        pred_garment, pred_body)["L_inters"]
    r["total"] = float(sum(r.values()))
    return r


def cmd_losses(a):
    pairs = [("pred_params", "gt_params"), ("pred_garment", "gt_garment"), ("pred_body", "gt_body"),
             ("pred_joints", "gt_joints"), ("pred_displacement", "gt_displacement"),
             ("garment_rest", "body_rest")]
    for p, g in pairs:
        if (getattr(a, p) is None) != (getattr(a, g) is None):
            raise UsageError(f"--{p.replace('_', '-')} and --{g.replace('_', '-')} go together")
    if a.pred_displacement and not (a.pred_garment or a.gt_garment):
        raise UsageError("displacement losses need a garment mesh for the Laplacian")
    rep = loss_report(
        _maybe(a.pred_params, _read_json), _maybe(a.gt_params, _read_json),
        _maybe(a.pred_garment, load_obj), _maybe(a.gt_garment, load_obj),
        _maybe(a.pred_body, load_obj), _maybe(a.gt_body, load_obj),
        _maybe(a.pred_joints, _array("joints")), _maybe(a.gt_joints, _array("joints")),
        _maybe(a.pred_displacement, _array("displacement")), _maybe(a.gt_displacement, _array("displacement")),
        _maybe(a.camera, lambda p: losses.Camera.from_json(_read_json(p))),
        _maybe(a.garment_rest, load_obj), _maybe(a.body_rest, load_obj))
    _write_json(rep, a.out)


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="garmentkit", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-fixtures", help="synthetic body, garment templates and weight datasets")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-test", type=int, default=50)
    p.add_argument("--n-corpus", type=int, default=50)
    p.set_defaults(func=cmd_gen_fixtures)

    p = sub.add_parser("weights", help="transfer body skinning weights onto a garment")
    p.add_argument("--garment", required=True, help="template JSON or OBJ")
    p.add_argument("--garment-labels", help="per-vertex part tags for an OBJ garment")
    p.add_argument("--body", required=True, help="body model JSON")
    p.add_argument("--body-weights", help="override the model's weights")
    p.add_argument("--beta")
    p.add_argument("--config", help="transfer config JSON")
    p.add_argument("--no-smooth", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_weights)

    for name, func in (("train-skinnet", cmd_train_skinnet), ("eval-skinnet", cmd_eval_skinnet)):
        p = sub.add_parser(name)
        p.add_argument("--dataset", required=True, help="fixture manifest or sample file")
        p.add_argument("--split", default="train" if name == "train-skinnet" else "test")
        p.add_argument("--body", help="body model JSON (defaults to the manifest's)")
        p.add_argument("--ckpt", required=True)
        if name == "train-skinnet":
            p.add_argument("--epochs", type=int, default=200)
            p.add_argument("--lr", type=float, default=1e-2)
            p.add_argument("--seed", type=int, default=0)
            p.add_argument("--batch-size", type=int, default=20)
            p.add_argument("--optimizer", choices=("sgd", "adam"), default="sgd")
            p.add_argument("--width", type=int, default=64)
            p.add_argument("--blocks", type=int, default=3)
            p.add_argument("--heads", type=int, default=1)
            p.add_argument("--history", help="loss history CSV")
        else:
            p.add_argument("--n-poses", type=int, default=20)
            p.add_argument("--pose-seed", type=int, default=0)
            p.add_argument("--out", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("repose", help="pose a garment and its body")
    p.add_argument("--garment-template", required=True)
    p.add_argument("--params", help="garment params JSON (alpha, displacement)")
    p.add_argument("--weights", required=True)
    p.add_argument("--body", required=True)
    p.add_argument("--beta")
    p.add_argument("--pose", help='JSON {"theta": [72], "translation": [3]}')
    p.add_argument("--out", required=True, help="garment OBJ")
    p.add_argument("--body-out", help="body OBJ (default: <out>.body.obj)")
    p.set_defaults(func=cmd_repose)

    p = sub.add_parser("transfer", help="move a garment onto another body and pose")
    p.add_argument("--garment-template", required=True)
    p.add_argument("--source-params")
    p.add_argument("--source-body", required=True)
    p.add_argument("--source-beta")
    p.add_argument("--weights", help="garment weights (transferred from the source body if absent)")
    p.add_argument("--target-body")
    p.add_argument("--target-beta")
    p.add_argument("--target-pose")
    p.add_argument("--target-weights")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("fit", help="register body and garment to a segmented scan")
    p.add_argument("--target", required=True, help="scan OBJ")
    p.add_argument("--segmentation", required=True, help="labels JSON")
    p.add_argument("--garment-label", type=int, default=1)
    p.add_argument("--mode", choices=("rigged", "posed"), default="rigged")
    p.add_argument("--init", help="fit report or parameter JSON")
    p.add_argument("--body", required=True)
    p.add_argument("--garment-template", required=True)
    p.add_argument("--weights")
    p.add_argument("--term-weights", help="JSON of energy term weights")
    p.add_argument("--max-iters", type=int, default=registration.FitSettings.max_iters)
    p.add_argument("--out", required=True, help="report JSON; meshes go next to it")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("losses", help="evaluate the training losses on saved artifacts")
    for k in ("params", "garment", "body", "joints", "displacement"):
        p.add_argument(f"--pred-{k}")
        p.add_argument(f"--gt-{k}")
    p.add_argument("--camera")
    p.add_argument("--garment-rest", help="rest garment OBJ, with --body-rest, for interpenetration")
    p.add_argument("--body-rest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_losses)
    return ap


def _thread_limit():
    n = os.environ.get("GS_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(int(n))


def main(argv=None) -> int:
    ap = build_parser()
    a = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if a.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    limit = _thread_limit()
    try:
        a.func(a)
    except UsageError as e:
        ap.print_usage(sys.stderr)
        log.error("%s", e)
        return EXIT_USAGE
    except NotConverged as e:
        log.error("%s", e)
        return EXIT_NOT_CONVERGED
    except (registration.FitDiverged, skinnet.TrainingDiverged) as e:
        log.error("%s", e)
        return EXIT_NOT_CONVERGED
    except (OSError, ValueError, KeyError) as e:
        log.error("invalid input: %s", e)
        return EXIT_INPUT
    except Exception:
        log.exception("internal error")
        return EXIT_INTERNAL
    finally:
        if limit is not None:
            limit.restore_original_limits()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
