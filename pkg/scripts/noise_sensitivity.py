"""Refined metrics when Gaussian noise is added to the coarse parameters
(shape and pose, or camera) at fractions of their population sigma.

    python scripts/noise_sensitivity.py --checkpoint runs/synth/checkpoints/final.ckpt
"""

import argparse

from coarse2fine import datagen as dg
from coarse2fine import evaluation as E
from coarse2fine import trainer as tr

FRACTIONS = (0.0, 0.1, 0.2, 0.3, 0.5)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--data", help="annotation file or dir (default: the held-out synthetic split)")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    net, cfg = tr.load_trained(args.checkpoint)
    if args.data:
        test = dg.load_annotations(args.data if args.data.endswith(".txt") else f"{args.data}/annotations.txt",
                                   out_size=cfg.data.camera.image_size)
    else:
        ds = dg.synth_generate(net.model, cfg.data.count + cfg.data.holdout, cfg.data.camera, seed=cfg.data.seed)
        test = ds.subset(range(cfg.data.count, len(ds)))
    res = E.noise_sensitivity(net, test, FRACTIONS, seed=args.seed, threshold=cfg.eval.threshold)
    for target in ("smal", "camera"):
        print(f"\nnoise on {target} parameters")
        print("fraction   IOU    PCK")
        for f in FRACTIONS:
            r = res[(target, f)]
            print(f"{f:8.1f}  {100 * r['iou']:5.2f}  {100 * r['pck']:5.2f}")


if __name__ == "__main__":
    main()
