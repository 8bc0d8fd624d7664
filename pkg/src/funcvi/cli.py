"""Command-line entry point: ``funcvi {selftest,train,eval,kernel,gen-data}``.

Runs are described by plain ``key = value`` config files (``#`` starts a
comment).  ``--set key=value`` overrides a key; the ``FUNCVI_OUTPUT_DIR``
environment variable overrides ``output_dir``.  Exit codes: 0 success,
1 usage error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import block_cov as bc
from . import fvi
from . import gradnet as gn
from . import likelihoods as lk
from . import metrics as M
from . import selftest
from . import toytasks as tt
from . import varfam as vf
from .cnngp_kernel import prior_structured_cov, read_arch, write_arch
from .errors import DomainError, NonFinite, NonPositiveDefinite

OUTPUT_ENV = "FUNCVI_OUTPUT_DIR"
TASKS = ("regression1d", "depth", "segmentation")
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text: str):
    return None if text.strip().lower() in ("", "none") else float(text)


# key: (parser, default).  A default of None means "per-task default" (TASK_DEFAULTS).
KEYS = {
    "task": (str, "regression1d"),
    "likelihood": (str, None),
    "arch": (str, ""),
    "L": (int, 20),
    "lr": (float, None),
    "lr_decay": (float, None),
    "epochs": (int, None),
    "batch_size": (int, None),
    "mc_samples": (int, None),
    "momentum": (float, 0.9),
    "weight_decay": (float, 1e-4),
    "grad_clip": (_opt_float, 10.0),
    "jitter": (float, 1e-3),
    "noise_var": (float, 0.1),
    "prior_mean": (float, None),
    "inducing_noise_var": (float, 0.1),
    "n_inducing": (int, 1),
    "data_scale": (_bool, True),
    "hidden": (int, None),
    "n_train": (int, None),
    "n_test": (int, None),
    "seed": (int, 0),
    "data_seed": (int, 0),
    "cls_samples": (int, 32),
    "output_dir": (str, "runs/default"),
}

TASK_DEFAULTS = {
    "regression1d": dict(likelihood="gaussian", lr=1e-2, lr_decay=0.995, epochs=500, batch_size=32,
                         mc_samples=8, prior_mean=0.0, hidden=64, n_train=512, n_test=256),
    "depth": dict(likelihood="berhu", lr=3e-3, lr_decay=1.0, epochs=60, batch_size=8,
                  mc_samples=4, prior_mean=0.5, hidden=16, n_train=300, n_test=100),
    "segmentation": dict(likelihood="boltzmann", lr=3e-3, lr_decay=1.0, epochs=100, batch_size=8,
                         mc_samples=4, prior_mean=1.0, hidden=16, n_train=400, n_test=100),
}


def parse_config(text: str) -> dict:
    """Parse ``key = value`` lines into raw strings; unknown or repeated keys are errors."""
    raw = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"line {n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise UsageError(f"line {n}: unknown config key '{key}'")
        if key in raw:
            raise UsageError(f"line {n}: key '{key}' given twice")
        raw[key] = value
    return raw


def resolve_config(raw: dict, env=None) -> dict:
    """Typed config with task defaults filled in and the environment override applied."""
    env = os.environ if env is None else env
    task = raw.get("task", KEYS["task"][1])
    if task not in TASKS:
        raise UsageError(f"unknown task '{task}' (choose from {', '.join(TASKS)})")
    cfg = {}
    for key, (parse, default) in KEYS.items():
        if key in raw:
            try:
                cfg[key] = parse(raw[key])
            except ValueError as exc:
                raise UsageError(f"bad value for '{key}': {exc}") from None
        else:
            cfg[key] = TASK_DEFAULTS[task][key] if default is None else default
    if env.get(OUTPUT_ENV):
        cfg["output_dir"] = env[OUTPUT_ENV]
    if cfg["likelihood"] not in (lk.GAUSSIAN, lk.LAPLACE, lk.BERHU, lk.BOLTZMANN):
        raise UsageError(f"unknown likelihood '{cfg['likelihood']}'")
    if (cfg["likelihood"] == lk.BOLTZMANN) != (task == "segmentation"):
        raise UsageError("the Boltzmann likelihood goes with (and only with) the segmentation task")
    return cfg


def format_config(cfg: dict) -> str:
    return "".join(f"{k} = {'none' if v is None else v}\n" for k, v in cfg.items())


def load_config(path, overrides=()) -> dict:
    try:
        with open(path) as fh:
            raw = parse_config(fh.read())
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from None
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        if k not in KEYS:
            raise UsageError(f"unknown config key '{k}'")
        raw[k] = v
    return resolve_config(raw)


# building blocks ------------------------------------------------------------
def make_dataset(cfg: dict) -> tt.ToyDataset:
    n, seed, n_test = cfg["n_train"], cfg["data_seed"], cfg["n_test"]
    if cfg["task"] == "regression1d":
        return tt.gen_regression_1d(n, seed, n_test=n_test)
    if cfg["task"] == "depth":
        return tt.gen_minidepth(n, seed, n_test=n_test)
    return tt.gen_miniseg(n, seed, n_test=n_test)


def make_prior(cfg: dict, input_shape):
    if cfg["arch"]:
        try:
            with open(cfg["arch"]) as fh:
                return read_arch(fh.read())
        except OSError as exc:
            raise UsageError(f"cannot read arch file: {exc}") from None
    if cfg["task"] == "regression1d":
        return tt.prior_arch_1d(noise_var=cfg["noise_var"], prior_mean=cfg["prior_mean"])
    return tt.prior_arch_image(tuple(input_shape), prior_mean=cfg["prior_mean"], noise_var=cfg["noise_var"])


def make_model(cfg: dict, input_shape) -> fvi.FviModel:
    L = cfg["L"]
    if cfg["task"] == "regression1d":
        net = tt.var_net_1d(L, hidden=cfg["hidden"], seed=cfg["seed"])
        fam = vf.VarFamily(net, 1, (1, 1), L=L, jitter=cfg["jitter"])
    else:
        K = 3 if cfg["task"] == "segmentation" else 1
        net = tt.var_net_image(L, K, input_shape=tuple(input_shape), hidden=cfg["hidden"], seed=cfg["seed"])
        task = vf.CLASSIFICATION if K == 3 else vf.REGRESSION
        fam = vf.VarFamily(net, K, tuple(input_shape[1:]), L=L, task=task, jitter=cfg["jitter"])
    return fvi.FviModel(fam, make_prior(cfg, input_shape), likelihood=cfg["likelihood"])


def train_config(cfg: dict) -> fvi.TrainConfig:
    return fvi.TrainConfig(batch_size=cfg["batch_size"], mc_samples=cfg["mc_samples"], epochs=cfg["epochs"],
                           lr=cfg["lr"], momentum=cfg["momentum"], weight_decay=cfg["weight_decay"],
                           jitter=cfg["jitter"], inducing_noise_var=cfg["inducing_noise_var"],
                           n_inducing=cfg["n_inducing"], data_scale=cfg["data_scale"],
                           likelihood=cfg["likelihood"], seed=cfg["seed"], lr_decay=cfg["lr_decay"],
                           grad_clip=cfg["grad_clip"], cls_samples=cfg["cls_samples"])


@dataclass
class EvalResult:
    metrics: dict
    curve: M.CalibrationCurve
    prediction: object


def evaluate(model: fvi.FviModel, ds: tt.ToyDataset, cfg: dict) -> EvalResult:
    pred = fvi.predict(model, ds.X_test, seed=cfg["seed"], cls_samples=cfg["cls_samples"])
    if model.is_classification:
        scores = M.seg_scores(pred.labels, ds.y_test, ds.n_classes)
        curve = M.classification_calibration(pred.probs, ds.y_test)
        out = {"accuracy": scores["accuracy"], "mean_iou": scores["mean_iou"], "calibration": curve.score,
               "mean_entropy": float(pred.entropy.mean())}
    else:
        y = ds.y_test.reshape(pred.mean.shape)
        # the 1D task has a single output per input: score the test set as one image
        imgs = (lambda a: a.reshape(1, -1)) if cfg["task"] == "regression1d" else (lambda a: a)
        curve = M.regression_calibration(imgs(pred.mean), imgs(pred.total_var), imgs(y))
        out = dict(M.regression_errors(pred.mean, y), calibration=curve.score,
                   mean_epistemic_var=float(pred.epistemic_var.mean()),
                   mean_aleatoric_var=float(pred.aleatoric_var.mean()))
        if ds.X_ood is not None:
            ood = fvi.predict(model, ds.X_ood)
            out["ood_epistemic_ratio"] = float(np.median(ood.epistemic_var) / np.median(pred.epistemic_var))
    return EvalResult(out, curve, pred)


def _outdir(cfg) -> str:
    os.makedirs(cfg["output_dir"], exist_ok=True)
    return cfg["output_dir"]


# commands -------------------------------------------------------------------
def cmd_selftest(args, out) -> int:
    checks = selftest.run_all(seed=args.seed)
    width = max(len(c.name) for c in checks)
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name:<{width}}  {c.detail}", file=out)
    ok = all(c.passed for c in checks)
    print(f"{sum(c.passed for c in checks)}/{len(checks)} checks passed", file=out)
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_train(args, out) -> int:
    cfg = load_config(args.config, args.set)
    ds = make_dataset(cfg)
    model = make_model(cfg, ds.input_shape)
    d = _outdir(cfg)
    res = fvi.train(model, ds.X_train, ds.y_train, train_config(cfg), log_path=os.path.join(d, "train_log.csv"))
    meta = {"config": format_config(cfg), "c_threshold": model.c_threshold, "arch": write_arch(model.prior)}
    gn.save_checkpoint(os.path.join(d, "model.npz"), model.family.params, meta)
    with open(os.path.join(d, "config.txt"), "w") as fh:
        fh.write(format_config(cfg))
    last = res.log[-1]
    print(f"trained {last['epoch']} epochs ({last['step']} steps): objective {last['objective']:.4g}, "
          f"kl {last['kl']:.4g}; wrote {d}", file=out)
    return EXIT_OK


def load_trained(cfg: dict, checkpoint: str, input_shape) -> fvi.FviModel:
    if not os.path.exists(checkpoint):
        raise UsageError(f"checkpoint not found: {checkpoint} (run 'funcvi train' first)")
    params, meta = gn.load_checkpoint(checkpoint)
    model = make_model(cfg, input_shape)
    expected = {k: v.shape for k, v in model.family.params.items()}
    if {k: v.shape for k, v in params.items()} != expected:
        raise UsageError("checkpoint does not match the configured model")
    model.family.params = params
    model.c_threshold = meta.get("c_threshold")
    return model


def cmd_eval(args, out) -> int:
    cfg = load_config(args.config, args.set)
    ds = make_dataset(cfg)
    d = _outdir(cfg)
    model = load_trained(cfg, args.checkpoint or os.path.join(d, "model.npz"), ds.input_shape)
    res = evaluate(model, ds, cfg)
    fvi.write_predictions_csv(res.prediction, os.path.join(d, "predictions.csv"))
    res.curve.write_csv(os.path.join(d, "calibration.csv"))
    with open(os.path.join(d, "metrics.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("metric", "value"))
        for k, v in res.metrics.items():
            w.writerow((k, repr(float(v))))
    for k, v in res.metrics.items():
        print(f"{k:>22s}  {v:.4g}", file=out)
    return EXIT_OK


def cmd_kernel(args, out) -> int:
    cfg = load_config(args.config, args.set)
    if args.inputs:
        ds = make_dataset(cfg)
        try:
            flat = np.loadtxt(args.inputs, delimiter=",", ndmin=2)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read inputs: {exc}") from None
        X = flat.reshape((-1,) + tuple(ds.input_shape))
    else:
        X = make_dataset(cfg).X_test[:args.n]
    prior = prior_structured_cov(make_prior(cfg, X.shape[1:]), X)
    path = args.output or os.path.join(_outdir(cfg), "kernel.csv")
    with open(path, "w") as fh:
        bc.write_csv(prior.cov, fh)
    print(f"wrote {prior.cov.B}x{prior.cov.B} blocks of {prior.cov.P} pixels to {path}", file=out)
    return EXIT_OK


def cmd_gen_data(args, out) -> int:
    cfg = load_config(args.config, args.set)
    ds = make_dataset(cfg)
    d = os.path.join(_outdir(cfg), "data")
    tt.dump_dataset(ds, d)
    if args.pgm and ds.task != "regression1d":
        for i in range(min(args.pgm, ds.X_train.shape[0])):
            tt.write_pgm(os.path.join(d, f"input_{i}.pgm"), ds.X_train[i, 0], 0.0, 1.0)
            target = ds.y_train[i].reshape(ds.X_train.shape[2:]).astype(float)
            if ds.task == "segmentation":
                target = np.where(target == tt.IGNORE_LABEL, -1.0, target)
                tt.write_pgm(os.path.join(d, f"target_{i}.pgm"), target, -1.0, 2.0)
            else:
                tt.write_pgm(os.path.join(d, f"target_{i}.pgm"), target, 0.0, 1.0)
    print(f"wrote {ds.task} dataset ({ds.X_train.shape[0]} train, {ds.X_test.shape[0]} test) to {d}", file=out)
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="funcvi", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("selftest", help="run the oracle checks")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_selftest)

    def with_config(name, func, help_):
        q = sub.add_parser(name, help=help_)
        q.add_argument("config", help="key = value config file")
        q.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        q.set_defaults(func=func)
        return q

    with_config("train", cmd_train, "train a model; writes model.npz, train_log.csv, config.txt")
    e = with_config("eval", cmd_eval, "evaluate a checkpoint; writes predictions, metrics and calibration CSVs")
    e.add_argument("--checkpoint", help="defaults to <output_dir>/model.npz")
    k = with_config("kernel", cmd_kernel, "dump the prior covariance of a batch")
    k.add_argument("--inputs", help="CSV of flattened inputs, one per row (default: test inputs)")
    k.add_argument("--n", type=int, default=4, help="number of test inputs when --inputs is absent")
    k.add_argument("--output", help="defaults to <output_dir>/kernel.csv")
    g = with_config("gen-data", cmd_gen_data, "write the task's dataset as CSV + manifest")
    g.add_argument("--pgm", type=int, default=0, metavar="N", help="also write N graymap previews")
    return p


def main(argv=None, out=None) -> int:
    out = sys.stdout if out is None else out
    try:
        args = build_parser().parse_args(argv)
        return args.func(args, out)
    except UsageError as exc:
        print(f"funcvi: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFinite, NonPositiveDefinite, DomainError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"funcvi: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
