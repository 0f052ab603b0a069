"""Test-time optimization from the coarse output against the learned
refinement pass: smoothed fitting loss per iteration budget, keypoint loss
and wall time per sample.

    python scripts/tto_comparison.py --checkpoint runs/synth/checkpoints/final.ckpt [--samples 8]
"""

import argparse

import numpy as np

from coarse2fine import datagen as dg
from coarse2fine import evaluation as E
from coarse2fine import trainer as tr

BUDGETS = (10, 50, 100, 200)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--samples", type=int, default=8)
    ap.add_argument("--window", type=int, default=5)
    args = ap.parse_args()

    net, cfg = tr.load_trained(args.checkpoint)
    ds = dg.synth_generate(net.model, cfg.data.count + cfg.data.holdout, cfg.data.camera, seed=cfg.data.seed)
    test = ds.subset(range(cfg.data.count, len(ds)))
    _, preds = E.evaluate(net, test, return_predictions=True)
    P = preds["params"]

    curves, kp = [], {n: [] for n in BUDGETS}
    for i in range(min(args.samples, len(test))):
        init = {k: P[k][i] for k in ("betas", "pose", "trans", "focal")}
        _, trace = E.test_time_optimize(net.model, test[i], init, max(BUDGETS) + 1, lr=cfg.eval.tto_lr,
                                        weights=cfg.weights, sharpness=cfg.eval.tto_sharpness)
        curves.append([np.mean(trace[n - args.window + 1 : n + 1]) for n in BUDGETS])
        for n in BUDGETS:
            fitted, _ = E.test_time_optimize(net.model, test[i], init, n, lr=cfg.eval.tto_lr, weights=cfg.weights,
                                             sharpness=cfg.eval.tto_sharpness)
            kp[n].append(E.keypoint_error(net.model, test[i], fitted))
    curve = np.mean(curves, axis=0)
    print("iterations  fit loss (smoothed)  keypoint loss px^2")
    for n, c in zip(BUDGETS, curve):
        print(f"{n:10d}  {c:19.4f}  {np.mean(kp[n]):18.3f}")

    cmp = E.refinement_vs_tto(net, test, iterations=10, lr=cfg.eval.tto_lr, weights=cfg.weights,
                              sharpness=cfg.eval.tto_sharpness)
    print(f"\nper sample over {len(test)} held-out samples")
    print(f"  coarse output     kp {cmp['kp_coarse'].mean():8.3f}")
    print(f"  refinement pass   kp {cmp['kp_refine'].mean():8.3f}   {1e3 * cmp['t_refine'].mean():8.1f} ms")
    print(f"  TTO, 10 iters     kp {cmp['kp_tto'].mean():8.3f}   {1e3 * cmp['t_tto'].mean():8.1f} ms")


if __name__ == "__main__":
    main()
