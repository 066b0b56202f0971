"""Synthetic skinning-weight datasets: random garments, transfer labels, features."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import body as bm
from .body import BodyModel
from .garment import CATEGORIES, N_PCA, GarmentTemplate, garment_rest
from .mesh import Mesh
from .skinnet import WeightSample, compute_features
from .synth import synth_body_model, synth_garment_template
from .transfer import TransferConfig, idw_transfer


def dressed_body(model: BodyModel, beta) -> Mesh:
    """Neutral body for beta carrying the part labels used by the transfer filter."""
    m = bm.rest_body(model, beta)
    return Mesh(m.vertices, m.faces, model.part_labels())


def make_sample(template: GarmentTemplate, model: BodyModel, alpha, beta,
                config: TransferConfig | None = None) -> WeightSample:
    garment = garment_rest(template, alpha)
    w = idw_transfer(garment, dressed_body(model, beta), model.weights, config)
    feats = compute_features(garment, bm.joints(model, beta))
    return WeightSample(garment, feats, w, template.category, np.asarray(beta, dtype=np.float64))


def random_samples(templates, model: BodyModel, n: int, seed: int,
                   beta_sigma: float = 0.3, config: TransferConfig | None = None):
    """n samples cycling through the templates, with alpha ~ N(0, 1) and small random beta."""
    rng = np.random.default_rng(seed)
    templates = list(templates)
    out = []
    for i in range(n):
        t = templates[i % len(templates)]
        alpha = np.where(t.pca_scales > 0, rng.standard_normal(N_PCA), 0.0)
        beta = rng.normal(0.0, beta_sigma, bm.N_BETAS)
        out.append((t.category, alpha, beta))
    by_cat = {t.category: t for t in templates}
    return [make_sample(by_cat[c], model, a, b, config) for c, a, b in out]


def build_fixtures(seed: int = 0, n_train: int = 200, n_test: int = 50, n_corpus: int = 50):
    """Mini body model, one template per category, and train/test sample sets."""
    model = synth_body_model(seed)
    templates = [synth_garment_template(c, seed, model, n_corpus)[0] for c in CATEGORIES]
    train = random_samples(templates, model, n_train, seed + 1)
    test = random_samples(templates, model, n_test, seed + 2)
    return model, templates, train, test


def sample_to_json(s: WeightSample) -> dict:
    return {"category": s.category, "vertices": s.mesh.vertices.tolist(), "faces": s.mesh.faces.tolist(),
            "labels": None if s.mesh.labels is None else s.mesh.labels.tolist(),
            "beta": s.beta.tolist(), "weights": s.weights.tolist()}


def sample_from_json(d, model: BodyModel) -> WeightSample:
    mesh = Mesh(np.asarray(d["vertices"], dtype=np.float64), np.asarray(d["faces"], dtype=np.int64),
                d.get("labels"))
    beta = np.asarray(d["beta"], dtype=np.float64)
    return WeightSample(mesh, compute_features(mesh, bm.joints(model, beta)),
                        np.asarray(d["weights"], dtype=np.float64), d["category"], beta)


def save_samples(samples, path) -> None:
    Path(path).write_text(json.dumps({"samples": [sample_to_json(s) for s in samples]}))


def load_samples(path, model: BodyModel):
    with open(path) as fh:
        return [sample_from_json(d, model) for d in json.load(fh)["samples"]]
