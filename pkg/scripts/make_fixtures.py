"""Write the synthetic fixture set and transfer weights onto every garment template.

    python3 scripts/make_fixtures.py out/fixtures --n-train 200 --n-test 50
"""

import argparse
import json
from pathlib import Path

import numpy as np

from garmentkit import cli, transfer
from garmentkit.body import load_body_model
from garmentkit.garment import load_template


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out_dir")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n-train", type=int, default=200)
    ap.add_argument("--n-test", type=int, default=50)
    ap.add_argument("--n-corpus", type=int, default=50)
    a = ap.parse_args()

    out = Path(a.out_dir)
    manifest = cli.fixture_files(out, a.seed, a.n_train, a.n_test, a.n_corpus)
    model = load_body_model(out / manifest["body"])
    (out / "weights").mkdir(exist_ok=True)
    for cat, rel in manifest["templates"].items():
        t = load_template(out / rel)
        w = cli.compute_weights(t.rest_mesh, model, np.zeros(10))
        transfer.check_simplex(w)
        transfer.save_weights(w, out / "weights" / f"{cat}.json")
        print(f"{cat:8s} {t.n_vertices:5d} vertices, {int(np.sum(t.pca_scales > 0))} live components")
    print(json.dumps(manifest["splits"]))


if __name__ == "__main__":
    main()
