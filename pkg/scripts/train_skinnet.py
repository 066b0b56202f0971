"""Train the skinning-weight network on synthetic garments and compare against the uniform baseline.

    python3 scripts/train_skinnet.py --epochs 200 --ckpt out/skinnet.json
"""

import argparse
import time

from garmentkit import dataset, skinnet as sn, synth, transfer
from garmentkit.garment import CATEGORIES


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--n-train", type=int, default=200)
    ap.add_argument("--n-test", type=int, default=50)
    ap.add_argument("--lr", type=float, default=1e-2)
    ap.add_argument("--n-poses", type=int, default=20)
    ap.add_argument("--ckpt")
    ap.add_argument("--history")
    a = ap.parse_args()

    body = synth.synth_body_model(0)
    templates = [synth.synth_garment_template(c, 0, body)[0] for c in CATEGORIES]
    train = dataset.random_samples(templates, body, a.n_train, 1)
    test = dataset.random_samples(templates, body, a.n_test, 2)

    t0 = time.perf_counter()
    params, hist = sn.train(train, sn.TrainConfig(epochs=a.epochs, lr=a.lr, grad_clip=10.0))
    print(f"trained {a.epochs} epochs in {time.perf_counter() - t0:.0f}s, mean KL {hist[0]:.3f} -> {hist[-1]:.4f}")
    if a.ckpt:
        sn.save_checkpoint(params, a.ckpt)
    if a.history:
        sn.save_history(hist, a.history)

    poses = transfer.random_poses(a.n_poses, 5)
    uniform = sn.init_params(0)
    uniform.arrays["out_W"][:] = 0.0
    uniform.arrays["out_b"][:] = 0.0
    for name, p in (("network", params), ("uniform", uniform)):
        m = sn.evaluate(p, test, body, poses, by_category=True)
        print(f"{name:8s} l1 {m['all']['l1_mean']:.4f}  MED {m['all']['med_mean']:.2f} mm")
        if name == "network":
            for cat in CATEGORIES:
                c = m["categories"].get(cat)
                if c:
                    print(f"  {cat:8s} l1 {c['l1_mean']:.4f}  MED {c['med_mean']:.2f} mm")


if __name__ == "__main__":
    main()
