"""Command-line entry points.

    psnet train CONFIG
    psnet eval CHECKPOINT CONFIG (--pairs FILE | --classify)
    psnet gradcheck --scope {psn,losses,model}
    psnet ablate CONFIG [--modes all|name,name,...]

Exit codes: 0 success, 1 config/shape error, 2 data error (including
checkpoint corruption), 3 numerical abort, 4 gradient check failure.
"""

from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from . import tensor as T
from .checkpoint import (
    CrcMismatchError,
    FormatError,
    ShapeMismatchError,
    load_into_model,
    save_checkpoint,
)
from .config import ConfigError, RunConfig, parse_config
from .data_eval import (
    ArraySet,
    IdxError,
    evaluate_classification,
    evaluate_verification,
    load_idx,
    load_pairs,
    make_synthetic,
)
from .losses import angular_softmax, arcface, cross_entropy
from .models import BackboneConfig, build_model, forward_logits
from .psn import PsnMode, PsnParams, psn_partials, psn_value
from .tensor import Tensor, grad_check
from .training import TrainingDiverged, train

__all__ = ["main", "run_psn_suite", "run_losses_suite", "run_model_suite"]

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3
EXIT_GRADCHECK = 4


# ---------------------------------------------------------------------------
# data assembly

def _synthetic_set(cfg: RunConfig, noise_seed: int | None = None) -> ArraySet:
    data, _ = make_synthetic(
        num_classes=cfg["data.classes"],
        per_class=cfg["data.per_class"],
        hard_fraction=cfg["data.hard_fraction"],
        d=cfg["data.dim"],
        separation=cfg["data.separation"],
        hard_offset=cfg["data.hard_offset"],
        seed=cfg["data.seed"],
        noise_seed=noise_seed,
    )
    return data


def _load_sets(cfg: RunConfig) -> tuple[ArraySet, ArraySet]:
    """(train set, eval set) per the config's data source."""
    if cfg["data.source"] == "idx":
        train_set = load_idx(cfg.require("data.images"), cfg.require("data.labels")).to_arrayset()
        if cfg["data.eval_images"] is not None and cfg["data.eval_labels"] is not None:
            eval_set = load_idx(cfg["data.eval_images"], cfg["data.eval_labels"]).to_arrayset()
        else:
            eval_set = train_set
        return train_set, eval_set
    # synthetic: eval split shares the class layout, fresh sample noise
    return _synthetic_set(cfg), _synthetic_set(cfg, noise_seed=1)


def _build_model_from(cfg: RunConfig, num_classes: int):
    return build_model(
        cfg.backbone_config(),
        cfg.psn_mode(),
        num_classes,
        seed=cfg["train.seed"],
        loss=cfg.loss_kind(),
        psn_before_norm=cfg["psn.before_norm"],
    )


def _fmt(v) -> str:
    return "" if v is None else repr(v)


def _write_metrics(path: str, history) -> None:
    with open(path, "w") as f:
        f.write("epoch,lr,train_loss,train_acc,alpha,beta,gamma\n")
        for row in history:
            f.write(
                f"{row.epoch},{row.lr!r},{row.train_loss!r},{row.train_acc!r},"
                f"{_fmt(row.alpha)},{_fmt(row.beta)},{_fmt(row.gamma)}\n"
            )


# ---------------------------------------------------------------------------
# commands

def _train_once(cfg: RunConfig, out_dir: str) -> tuple[float, float, object]:
    """Shared by train and ablate; returns (train acc, eval acc, model)."""
    train_set, eval_set = _load_sets(cfg)
    model = _build_model_from(cfg, train_set.num_classes)
    history, model = train(model, train_set, cfg.train_config())
    os.makedirs(out_dir, exist_ok=True)
    _write_metrics(os.path.join(out_dir, "metrics.csv"), history)
    save_checkpoint(os.path.join(out_dir, "final.ckpt"), model.named_state())
    eval_acc = evaluate_classification(model, eval_set)
    return history[-1].train_acc, eval_acc, model


def cmd_train(args) -> int:
    cfg = parse_config(args.config)
    out_dir = cfg["out.dir"]
    train_acc, eval_acc, _ = _train_once(cfg, out_dir)
    print(f"train_accuracy={train_acc:.6f}")
    print(f"eval_accuracy={eval_acc:.6f}")
    print(f"outputs written to {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = parse_config(args.config)
    _, eval_set = _load_sets(cfg)
    model = _build_model_from(cfg, eval_set.num_classes)
    load_into_model(model, args.checkpoint)
    if args.classify:
        acc = evaluate_classification(model, eval_set)
        print(f"classification_accuracy={acc:.6f}")
    else:
        pairs = load_pairs(args.pairs, n_items=len(eval_set.labels))
        acc = evaluate_verification(
            model,
            eval_set,
            pairs,
            folds=cfg["eval.folds"],
            pre_psn=cfg["eval.embeddings"] == "pre_psn",
        )
        print(f"verification_accuracy={acc:.6f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradient-check suites

def _fd_partials(x: float, p: PsnParams, eps: float = 1e-5) -> tuple[float, float, float, float]:
    def f(a, b, g, xx):
        return psn_value(xx, a, b, g)

    return (
        (f(p.alpha, p.beta, p.gamma, x + eps) - f(p.alpha, p.beta, p.gamma, x - eps)) / (2 * eps),
        (f(p.alpha + eps, p.beta, p.gamma, x) - f(p.alpha - eps, p.beta, p.gamma, x)) / (2 * eps),
        (f(p.alpha, p.beta + eps, p.gamma, x) - f(p.alpha, p.beta - eps, p.gamma, x)) / (2 * eps),
        (f(p.alpha, p.beta, p.gamma + eps, x) - f(p.alpha, p.beta, p.gamma - eps, x)) / (2 * eps),
    )


def run_psn_suite() -> list[tuple[str, float, float]]:
    """Analytic partials vs central differences on a grid around the
    midpoint, for three parameter settings.  Threshold 1e-6."""
    checks = []
    for alpha, beta, gamma in ((1.0, 20.0, 1.0), (1.0, 1.0, 0.0), (3.0, 0.5, -2.0)):
        p = PsnParams(alpha, beta, gamma)
        grid = gamma + np.linspace(-5.0 / beta, 5.0 / beta, 100)
        worst = [0.0, 0.0, 0.0, 0.0]
        for x in grid:
            analytic = psn_partials(float(x), p)
            numeric = _fd_partials(float(x), p)
            for i, (a, n) in enumerate(zip(analytic, numeric)):
                err = abs(a - n) / max(abs(a), abs(n), 1e-12)
                worst[i] = max(worst[i], err)
        for name, w in zip(("dx", "dalpha", "dbeta", "dgamma"), worst):
            checks.append((f"psn/a{alpha}_b{beta}_g{gamma}/{name}", w, 1e-6))
    return checks


def run_losses_suite() -> list[tuple[str, float, float]]:
    """Finite-difference checks through each loss.  Threshold 1e-5."""
    rng = np.random.default_rng(2024)
    checks = []

    logits = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    labels = rng.integers(0, 5, size=4)
    err = grad_check(lambda: cross_entropy(logits, labels).loss, [logits])
    checks.append(("losses/cross_entropy", err, 1e-5))

    feats = Tensor(rng.normal(size=(3, 8)), requires_grad=True)
    weight = Tensor(rng.normal(size=(5, 8)), requires_grad=True)
    lab = rng.integers(0, 5, size=3)
    err = grad_check(lambda: angular_softmax(feats, weight, lab, m=4, iteration=50).loss, [feats, weight])
    checks.append(("losses/angular_softmax", err, 1e-5))

    # directions clustered around a common axis: at s=64 a wide cosine
    # spread drives some softmax terms below what central differences
    # can resolve against the loss magnitude in float64
    rng2 = np.random.default_rng(0)
    axis = rng2.normal(size=8)
    axis /= np.linalg.norm(axis)
    feats2 = Tensor(axis + 0.15 * rng2.normal(size=(4, 8)), requires_grad=True)
    weight2 = Tensor(axis + 0.15 * rng2.normal(size=(6, 8)), requires_grad=True)
    lab2 = rng2.integers(0, 6, size=4)
    err = grad_check(lambda: arcface(feats2, weight2, lab2, s=64.0, m=0.5).loss, [feats2, weight2])
    checks.append(("losses/arcface", err, 1e-5))
    return checks


def run_model_suite() -> list[tuple[str, float, float]]:
    """End-to-end check of a minimal residual model.  Threshold 1e-4."""
    cfg = BackboneConfig(
        kind="tiny_resnet",
        input_shape=(1, 8, 8),
        blocks=(1, 1, 1),
        channels=(4, 8, 12),
        embedding_dim=8,
    )
    model = build_model(cfg, PsnMode.TRAIN_BETA_GAMMA, num_classes=3, seed=11)
    # check at slope 1 / shift 0: the steep default saturates the
    # squashing layer on untrained features, pushing true gradients
    # below central-difference resolution
    model.psn.beta.data[0] = 1.0
    model.psn.gamma.data[0] = 0.0
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(2, 1, 8, 8)))
    labels = np.array([0, 2])
    params = [t for _, t in model.named_parameters()]
    err = grad_check(lambda: cross_entropy(forward_logits(model, x), labels).loss, params)
    return [("model/tiny_resnet_end_to_end", err, 1e-4)]


def cmd_gradcheck(args) -> int:
    suites = {"psn": run_psn_suite, "losses": run_losses_suite, "model": run_model_suite}
    checks = suites[args.scope]()
    failures = []
    for name, err, threshold in checks:
        status = "ok" if err < threshold else "FAIL"
        print(f"{name}: max_rel_err={err:.3e} (threshold {threshold:.0e}) {status}")
        if err >= threshold:
            failures.append(name)
    if failures:
        print("failed checks: " + ", ".join(failures), file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablation

def cmd_ablate(args) -> int:
    cfg = parse_config(args.config)
    if args.modes == "all":
        modes = list(PsnMode)
    else:
        try:
            modes = [PsnMode(name.strip()) for name in args.modes.split(",") if name.strip()]
        except ValueError as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_CONFIG
    out_dir = cfg["out.dir"]
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    first_error = EXIT_OK
    for mode in modes:
        run_cfg = parse_config(args.config, overrides={"psn.mode": mode.value})
        sub_dir = os.path.join(out_dir, mode.value)
        try:
            train_acc, eval_acc, model = _train_once(run_cfg, sub_dir)
            if model.psn is not None:
                alpha, beta, gamma = model.psn.current()
            else:
                alpha = beta = gamma = None
            rows.append((mode.value, train_acc, eval_acc, alpha, beta, gamma))
            print(f"{mode.value}: train_acc={train_acc:.4f} eval_acc={eval_acc:.4f}")
        except Exception as e:  # keep sweeping the remaining modes
            code = _classify_error(e)
            if first_error == EXIT_OK:
                first_error = code
            print(f"{mode.value}: failed ({e})", file=sys.stderr)
            rows.append((mode.value, None, None, None, None, None))
    with open(os.path.join(out_dir, "ablation.csv"), "w") as f:
        f.write("mode,train_acc,eval_acc,alpha,beta,gamma\n")
        for mode_name, ta, ea, a, b, g in rows:
            f.write(f"{mode_name},{_fmt(ta)},{_fmt(ea)},{_fmt(a)},{_fmt(b)},{_fmt(g)}\n")
    return first_error


# ---------------------------------------------------------------------------
# wiring

def _classify_error(e: Exception) -> int:
    if isinstance(e, (ConfigError, ShapeMismatchError)):
        return EXIT_CONFIG
    if isinstance(e, TrainingDiverged):
        return EXIT_NUMERIC
    if isinstance(e, (IdxError, CrcMismatchError, FormatError, OSError, ValueError)):
        return EXIT_DATA
    raise e


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="psnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("config")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("config")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--pairs", help="pair-list file for verification accuracy")
    group.add_argument("--classify", action="store_true", help="classification accuracy")

    p = sub.add_parser("gradcheck", help="run a gradient-check suite")
    p.add_argument("--scope", choices=("psn", "losses", "model"), required=True)

    p = sub.add_parser("ablate", help="train once per squashing mode")
    p.add_argument("config")
    p.add_argument("--modes", default="all", help="'all' or comma-separated mode names")

    args = parser.parse_args(argv)
    commands = {"train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck, "ablate": cmd_ablate}
    try:
        return commands[args.command](args)
    except Exception as e:
        code = _classify_error(e)
        print(f"error: {e}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
