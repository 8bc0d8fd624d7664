"""Heteroscedastic 1D regression: where does the model know that it doesn't know?

Trains the variational network on x in [-3, 3], then prints predictive
statistics on a grid running from inside the training range out to |x| = 6.
Aleatoric variance should track the true noise 0.05 (1 + x^2) inside the data,
and epistemic variance should grow once x leaves it.

    python3 demos/regression_1d.py [--epochs 500]
"""
import argparse

import numpy as np

from funcvi import TrainConfig, predict, train
from funcvi import fvi, metrics, toytasks as tt
from funcvi.varfam import VarFamily


def bar(v, vmax, width=30):
    return "#" * int(round(width * min(v / vmax, 1.0)))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    ds = tt.gen_regression_1d(512, seed=args.seed, n_test=256)
    L = 20
    family = VarFamily(tt.var_net_1d(L, seed=args.seed), 1, (1, 1), L=L)
    model = fvi.FviModel(family, tt.prior_arch_1d(), likelihood="gaussian")
    cfg = TrainConfig(batch_size=32, mc_samples=8, epochs=args.epochs, lr=1e-2, lr_decay=0.995,
                      grad_clip=10.0, likelihood="gaussian", seed=args.seed)
    log = train(model, ds.X_train, ds.y_train, cfg).log
    print(f"trained {args.epochs} epochs, final objective {log[-1]['objective']:.1f}, KL {log[-1]['kl']:.2f}")

    test = predict(model, ds.X_test)
    curve = metrics.regression_calibration(test.mean.ravel(), test.total_var.ravel(), ds.y_test.ravel())
    print(f"test rms {np.sqrt(np.mean((test.mean - ds.y_test) ** 2)):.3f}, calibration error {curve.score:.3f}")
    print("coverage per level:", " ".join(f"{o:.2f}" for o in curve.observed))

    grid = np.linspace(-6, 6, 25)
    pred = predict(model, tt.encode_1d(grid))
    epi, ale = pred.epistemic_var.ravel(), pred.aleatoric_var.ravel()
    top = max(epi.max(), 1e-12)
    print(f"\n{'x':>6} {'mean':>7} {'sin 2x':>7} {'aleat sd':>9} {'true sd':>8}  epistemic variance")
    for x, m, a, e in zip(grid, pred.mean.ravel(), ale, epi):
        flag = " " if abs(x) <= 3 else "*"
        print(f"{x:6.2f}{flag}{m:7.3f} {np.sin(2 * x):7.3f} {np.sqrt(a):9.3f} {tt.noise_scale_1d(x):8.3f}  "
              f"{bar(e, top)} {e:.2e}")
    print("(* outside the training range)")


if __name__ == "__main__":
    main()
