"""Three-class segmentation of 8x8 blob maps with a Boltzmann likelihood.

Every image carries a 2x2 patch whose labels are coin flips between two
neighbouring classes.  After training, the printed entropy maps should light
up on that patch (and on class borders) while staying dark elsewhere.

    python3 demos/segmentation.py [--epochs 100]
"""
import argparse

import numpy as np

from funcvi import TrainConfig, predict, train
from funcvi import fvi, metrics, toytasks as tt
from funcvi.varfam import CLASSIFICATION, VarFamily

SHADES = " .:-=+*#%@"


def shade(a, vmax):
    idx = np.clip((a / vmax * (len(SHADES) - 1)).round().astype(int), 0, len(SHADES) - 1)
    return ["".join(SHADES[i] for i in row) for row in idx]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--n", type=int, default=400)
    ap.add_argument("--show", type=int, default=3, help="number of test images to draw")
    args = ap.parse_args()

    ds = tt.gen_miniseg(args.n, seed=0, n_test=100)
    L = 20
    family = VarFamily(tt.var_net_image(L, 3), 3, (8, 8), L=L, task=CLASSIFICATION)
    model = fvi.FviModel(family, tt.prior_arch_image(prior_mean=1.0), likelihood="boltzmann")
    cfg = TrainConfig(batch_size=8, mc_samples=4, epochs=args.epochs, lr=3e-3, grad_clip=10.0,
                      likelihood="boltzmann")
    train(model, ds.X_train, ds.y_train, cfg)

    pred = predict(model, ds.X_test)
    scores = metrics.seg_scores(pred.labels, ds.y_test, 3)
    curve = metrics.classification_calibration(pred.probs, ds.y_test)
    noisy = ds.meta["noise_mask_test"].reshape(len(ds.X_test), -1)
    clean = ~noisy & (ds.y_test != tt.IGNORE_LABEL)
    print(f"pixel accuracy {scores['accuracy']:.3f}, mean IoU {scores['mean_iou']:.3f}, "
          f"calibration error {curve.score:.3f}")
    print(f"mean entropy: noisy patch {pred.entropy[noisy].mean():.3f}, clean pixels {pred.entropy[clean].mean():.3f}"
          f" (max possible {np.log(3):.3f})")

    for i in range(min(args.show, len(ds.X_test))):
        img = shade(ds.X_test[i, 0], 1.0)
        lab = ["".join("?" if v == tt.IGNORE_LABEL else str(v) for v in row) for row in ds.y_test[i].reshape(8, 8)]
        got = ["".join(map(str, row)) for row in pred.labels[i].reshape(8, 8)]
        ent = shade(pred.entropy[i].reshape(8, 8), np.log(3))
        box = ["".join("N" if m else "." for m in row) for row in ds.meta["noise_mask_test"][i]]
        print(f"\ntest image {i}:  input     labels    predicted entropy   noise patch")
        for row in zip(img, lab, got, ent, box):
            print("                " + "  ".join(row))


if __name__ == "__main__":
    main()
