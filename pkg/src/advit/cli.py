"""Command-line entry point: ``advit <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis
from .attacks import ATTACKS, AttackSpec, robust_accuracy
from .data import make_blobs, make_margin_blobs
from .io import (
    Checkpoint,
    ExperimentConfig,
    load_checkpoint,
    load_dataset,
    parse_config,
    save_checkpoint,
    save_dataset,
    tile_images,
    write_metrics,
    write_pnm,
)
from .train import adapt_low_res, train
from .vit import Model, count_params

log = logging.getLogger("advit")


def _parse_eps(text: str) -> float:
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


def _config(args) -> ExperimentConfig:
    return parse_config(Path(args.config), is_text=False) if args.config else parse_config("", is_text=True)


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _spec(args) -> AttackSpec:
    return AttackSpec(
        norm=args.norm,
        epsilon=args.eps,
        steps=args.steps,
        step_size_rule="fixed" if args.alpha is not None else "scaled",
        alpha=args.alpha,
        restarts=args.restarts,
        seed=args.seed,
    )


def _model(ck: Checkpoint) -> Model:
    return Model(ck.config, ck.params)


def _history_records(history):
    return [r.to_dict() for r in history]


def cmd_gen_data(args) -> int:
    shape = tuple(int(v) for v in args.shape.split(","))
    if args.kind == "margin":
        ds = make_margin_blobs(args.n, shape, margin=args.margin, seed=args.seed)
    else:
        ds = make_blobs(args.n, shape, num_classes=args.classes, seed=args.seed)
    out = Path(args.out or "data.bin")
    save_dataset(out, ds)
    print(f"wrote {len(ds)} samples of shape {ds.image_shape} to {out}")
    return 0


def _run_training(args, model: Model, recipe, train_ds, val_ds, out: Path, extra: dict) -> int:
    def on_epoch(rec, m):
        if args.checkpoint_every and (rec.epoch + 1) % args.checkpoint_every == 0:
            save_checkpoint(out / "last.ckpt", Checkpoint(m.config, m.params, history[:] + [rec], recipe, seed=args.seed, extra=extra))
        history.append(rec)

    history = []
    result = train(model, recipe, train_ds, val_ds, on_epoch=on_epoch)
    save_checkpoint(out / "last.ckpt", Checkpoint(model.config, result.params, result.history, recipe, result.state, args.seed, extra))
    best_extra = dict(extra, best_epoch=result.best_epoch)
    save_checkpoint(out / "best.ckpt", Checkpoint(model.config, result.best_params, result.history, recipe, None, args.seed, best_extra))
    write_metrics(out / "history.csv", _history_records(result.history), columns=["epoch", "train_loss", "clean_acc", "fgsm_acc", "eps", "lr"])
    print(f"best epoch {result.best_epoch}: fgsm acc {result.history[result.best_epoch].fgsm_acc:.4f}; checkpoints in {out}")
    return 0


def _with_epochs(recipe, epochs: int):
    """Override the epoch count, shrinking warm-up and cool-down spans to fit."""
    w = min(recipe.lr_warmup_epochs, epochs)
    c = min(recipe.lr_cooldown_epochs, epochs - w)
    return replace(recipe, epochs=epochs, eps_warmup_epochs=min(recipe.eps_warmup_epochs, epochs), lr_warmup_epochs=w, lr_cooldown_epochs=c)


def _split(ds, val_fraction: float, seed: int):
    idx = np.random.default_rng(seed).permutation(len(ds))
    n_val = int(round(len(ds) * val_fraction))
    return ds.subset(idx[n_val:]), ds.subset(idx[:n_val]) if n_val else None


def cmd_train(args) -> int:
    cfg = _config(args)
    recipe = replace(cfg.recipe, seed=args.seed)
    if args.epochs is not None:
        recipe = _with_epochs(recipe, args.epochs)
    ds = load_dataset(args.data)
    model_cfg = replace(cfg.model, image_size=ds.image_shape, num_classes=ds.num_classes)
    model = Model(model_cfg, seed=args.seed)
    log.info("model with %d parameters", count_params(model.params))
    train_ds, val_ds = _split(ds, args.val_fraction, args.seed)
    return _run_training(args, model, recipe, train_ds, val_ds, _out(args, "run"), {"command": "train"})


def cmd_finetune(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    cfg = _config(args)
    recipe = replace(cfg.recipe, seed=args.seed)
    if args.epochs is not None:
        recipe = _with_epochs(recipe, args.epochs)
    if args.trades:
        recipe = replace(recipe, loss_mode="trades", trades_beta=args.trades_beta)
    ds = load_dataset(args.data)
    model_cfg = ck.config
    if args.adapt_low_res:
        model_cfg = adapt_low_res(model_cfg, ds.image_shape)
    if model_cfg.image_size != ds.image_shape:
        model_cfg = replace(model_cfg, image_size=ds.image_shape)
    params = dict(ck.params)
    if ds.num_classes != model_cfg.num_classes:
        # fresh head for the new label set
        model_cfg = replace(model_cfg, num_classes=ds.num_classes)
        fresh = Model(model_cfg, seed=args.seed).params
        params["head.weight"], params["head.bias"] = fresh["head.weight"], fresh["head.bias"]
    model = Model(model_cfg, params)
    train_ds, val_ds = _split(ds, args.val_fraction, args.seed)
    return _run_training(args, model, recipe, train_ds, val_ds, _out(args, "finetune"), {"command": "finetune", "source": str(args.checkpoint)})


def cmd_attack(args) -> int:
    model = _model(load_checkpoint(args.checkpoint))
    ds = load_dataset(args.data)
    spec = _spec(args)
    clean = model.accuracy(ds.images, ds.labels)
    robust = robust_accuracy(model, ds.images, ds.labels, spec, attack=args.attack)
    rec = {"attack": args.attack, "norm": spec.norm, "eps": spec.epsilon, "steps": spec.steps, "clean_accuracy": clean, "robust_accuracy": robust}
    if args.out:
        write_metrics(args.out, [rec])
    print(json.dumps(rec))
    return 0


def cmd_sweep_eps(args) -> int:
    model = _model(load_checkpoint(args.checkpoint))
    ds = load_dataset(args.data)
    eps = [_parse_eps(e) for e in args.eps_list.split(",")]
    curve = analysis.eps_sweep(model, ds.images, ds.labels, eps, _spec(args), attack=args.attack)
    write_metrics(args.out or "sweep.csv", curve.records(), columns=["eps", "robust_accuracy"])
    for r in curve.records():
        print(f"eps {r['eps']:.6g}  robust accuracy {r['robust_accuracy']:.4f}")
    return 0


def cmd_effectiveness(args) -> int:
    model = _model(load_checkpoint(args.checkpoint))
    ds = load_dataset(args.data)
    n = min(args.samples, len(ds)) if args.samples else len(ds)
    k_list = [int(k) for k in args.k_list.split(",")]
    report = analysis.attack_effectiveness(
        model, ds.images[:n], ds.labels[:n], args.eps, k_list, args.oracle_steps, args.mode, args.seeds, args.norm, args.alpha, args.seed
    )
    write_metrics(args.out or "effectiveness.csv", report.records())
    for r in report.records():
        print(f"k={r['k']:<3d} d_k {r['d_mean']:+.5f}  [{r['ci_low']:+.5f}, {r['ci_high']:+.5f}]")
    return 0


def cmd_visualize(args) -> int:
    model = _model(load_checkpoint(args.checkpoint))
    out = _out(args, "viz")
    if args.mode == "features":
        classes = range(model.config.num_classes) if args.target is None else [args.target]
        imgs = np.concatenate(
            [analysis.feature_visualization(model, c, args.eps, args.steps, norm=args.norm, n=args.n, seed=args.seed) for c in classes]
        )
        write_pnm(out / "features.ppm", tile_images(imgs))
    else:
        ds = load_dataset(args.data)
        x, y = ds.images[: args.n], ds.labels[: args.n]
        res = ATTACKS["pgd"](model, x, y, _spec(args))
        write_pnm(out / "clean.ppm", tile_images(x))
        write_pnm(out / "adversarial.ppm", tile_images(x + res.delta))
        viz = analysis.scale_perturbation(res.delta, args.eps, grayscale=args.grayscale)
        write_pnm(out / ("perturbation.pgm" if args.grayscale else "perturbation.ppm"), tile_images(viz))
    print(f"images written to {out}")
    return 0


def cmd_inspect(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    info = {
        "version": ck.version,
        "config": ck.config.to_dict(),
        "num_params": count_params(ck.params),
        "num_tensors": len(ck.params),
        "epochs": len(ck.history),
        "has_optimizer": ck.optimizer is not None,
        "seed": ck.seed,
        "extra": ck.extra,
    }
    if ck.history:
        info["last_epoch"] = ck.history[-1].to_dict()
    print(json.dumps(info, indent=2, sort_keys=True))
    return 0


def _attack_flags(p, eps_required=True):
    p.add_argument("--norm", choices=["linf", "l2"], default="linf")
    if eps_required:
        p.add_argument("--eps", type=_parse_eps, default=4 / 255, help="budget; fractions such as 4/255 are accepted")
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--alpha", type=float, default=None, help="fixed step size (default 1.5*eps/steps)")
    p.add_argument("--restarts", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", default=None, help="key = value config file")
    common.add_argument("--out", default=None, help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="advit", description="Adversarial training and analysis of small vision transformers.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    p.add_argument("--kind", choices=["margin", "blobs"], default="margin")
    p.add_argument("--n", type=int, default=1024)
    p.add_argument("--shape", default="8,8,3")
    p.add_argument("--margin", type=float, default=0.4)
    p.add_argument("--classes", type=int, default=2)
    p.set_defaults(func=cmd_gen_data)

    for name, fn, help_ in (("train", cmd_train, "adversarial training from scratch"), ("finetune", cmd_finetune, "fine-tune a checkpoint")):
        p = sub.add_parser(name, parents=[common], help=help_)
        if name == "finetune":
            p.add_argument("checkpoint")
        p.add_argument("data")
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--val-fraction", type=float, default=0.2)
        p.add_argument("--checkpoint-every", type=int, default=0)
        if name == "finetune":
            p.add_argument("--adapt-low-res", action="store_true")
            p.add_argument("--trades", action="store_true")
            p.add_argument("--trades-beta", type=float, default=6.0)
        p.set_defaults(func=fn)

    p = sub.add_parser("attack", parents=[common], help="robust accuracy under one attack")
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.add_argument("--attack", choices=sorted(ATTACKS), default="pgd")
    _attack_flags(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("sweep-eps", parents=[common], help="robust accuracy over increasing budgets")
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.add_argument("--eps-list", default="0,0.05,0.1,0.2,0.4,0.8")
    p.add_argument("--attack", choices=sorted(ATTACKS), default="pgd")
    _attack_flags(p)
    p.set_defaults(func=cmd_sweep_eps, eps=0.0)

    p = sub.add_parser("effectiveness", parents=[common], help="relative loss gap of few-step attacks")
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.add_argument("--k-list", default="1,2,5,10")
    p.add_argument("--oracle-steps", type=int, default=200)
    p.add_argument("--mode", choices=list(analysis.EFFECTIVENESS_MODES), default="union")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--samples", type=int, default=0, help="use only the first N samples (0: all)")
    p.add_argument("--norm", choices=["linf", "l2"], default="linf")
    p.add_argument("--eps", type=_parse_eps, default=4 / 255)
    p.add_argument("--alpha", type=float, default=None, help="trajectory mode step size")
    p.set_defaults(func=cmd_effectiveness)

    p = sub.add_parser("visualize", parents=[common], help="dump perturbation or feature images")
    p.add_argument("checkpoint")
    p.add_argument("data", nargs="?")
    p.add_argument("--mode", choices=["perturbation", "features"], default="perturbation")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--target", type=int, default=None)
    p.add_argument("--grayscale", action="store_true")
    _attack_flags(p)
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("inspect", parents=[common], help="print checkpoint metadata")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_inspect)
    return parser


def run_cli(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s")
    if args.command == "visualize" and args.mode == "perturbation" and not args.data:
        parser.print_usage(sys.stderr)
        print("advit visualize: perturbation mode needs a dataset", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"advit {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())


__all__ = ["build_parser", "main", "run_cli"]
