"""Command-line entry point: ``lvit {gen-data,train,eval,saliency,grad-check}``.

Failures print one JSON object ``{"error": <kind>, "message": <text>}`` on
stderr and exit nonzero (2 for usage errors, 1 otherwise).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import checkpoint
from .gradcheck import TOLERANCE, check_model, format_table
from .losses import LossConfig
from .model import MODEL_SIZES, LViT, LViTConfig
from .synth import SynthParams, generate_dataset, load_dataset, write_pgm
from .text import encode
from .trainer import TrainConfig, evaluate, fit


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _ratios(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}") from None
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}")
    return parts


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lvit", description="Text-augmented segmentation at desk scale.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--image-size", type=int, default=64)
    g.add_argument("--label-ratio", type=float, default=0.25)
    g.add_argument("--split", type=_ratios, default=(0.6, 0.2, 0.2), help="train,val,test fractions")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train and write checkpoint + report")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="JSON file with 'model', 'train' and 'loss' sections")
    t.add_argument("--model-size", choices=sorted(MODEL_SIZES))
    text = t.add_mutually_exclusive_group()
    text.add_argument("--text", dest="use_text", action="store_true", default=None)
    text.add_argument("--no-text", dest="use_text", action="store_false")
    t.add_argument("--label-ratio", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--max-epochs", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--out", help="report path (default: next to the checkpoint)")

    s = sub.add_parser("saliency", help="write a gradient-weighted activation map")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--case-id", required=True)
    s.add_argument("--layer", required=True)
    s.add_argument("--out", help="output P5 path (default: <case>_<layer>.pgm)")

    c = sub.add_parser("grad-check", help="finite-difference check of the full network")
    c.add_argument("--config-mini", action="store_true", default=True, help="use the mini config (default)")
    c.add_argument("--precision", choices=("float64", "float32", "both"), default="both")
    c.add_argument("--per-group", type=int, default=4)
    c.add_argument("--seed", type=int, default=0)
    return p


# -- config assembly --------------------------------------------------------


def _known(cls, section: dict, where: str) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise UsageError(f"unknown {where} keys: {sorted(unknown)}")
    return section


def resolve_configs(args, image_size: int) -> tuple[LViTConfig, TrainConfig, LossConfig]:
    """Config file first, then CLI flags on top; image size follows the data."""
    doc = json.loads(Path(args.config).read_text()) if args.config else {}
    unknown = set(doc) - {"model", "train", "loss"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    model = _known(LViTConfig, dict(doc.get("model", {})), "model")
    train = _known(TrainConfig, dict(doc.get("train", {})), "train")
    loss = _known(LossConfig, dict(doc.get("loss", {})), "loss")
    if args.model_size:
        model["vit_layers_per_module"] = MODEL_SIZES[args.model_size]
    model["image_size"] = image_size
    flags = {
        "use_text": args.use_text,
        "label_ratio": args.label_ratio,
        "seed": args.seed,
        "max_epochs": args.max_epochs,
        "patience": args.patience,
        "lr": args.lr,
        "batch_size": args.batch_size,
    }
    train.update({k: v for k, v in flags.items() if v is not None})
    return LViTConfig(**model), TrainConfig(**train), LossConfig(**loss)


def _tokens(model: LViT, cases, use_text: bool):
    if not use_text:
        return None
    return np.stack([encode(c.report, model.config.max_tokens) for c in cases])


# -- commands -----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    params = SynthParams(image_size=args.image_size)
    ds = generate_dataset(args.seed, args.count, args.out, params, args.split, args.label_ratio)
    counts = {s: len(ds.split(s)) for s in ("train", "val", "test")}
    labeled = sum(c.labeled for c in ds.cases)
    print(json.dumps({"hash": ds.hash, "cases": len(ds.cases), **counts, "labeled": labeled}))
    return 0


def cmd_train(args) -> int:
    start = time.perf_counter()
    ds = load_dataset(args.data)
    model_cfg, train_cfg, loss_cfg = resolve_configs(args, ds.image_size)
    model = LViT(model_cfg, seed=train_cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = fit(model, ds, train_cfg, loss_cfg, history_path=out / "history.jsonl")
    checkpoint.save(out / "checkpoint.lvit", model, train_cfg, loss_cfg)
    test = ds.split("test")
    test_dice, test_miou = evaluate(model, test, _tokens(model, test, train_cfg.use_text), train_cfg.batch_size)
    report = {
        "config": {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "loss": asdict(loss_cfg)},
        "seed": train_cfg.seed,
        "text_used": train_cfg.use_text,
        "param_count": model.num_parameters(),
        "dataset_hash": ds.hash,
        "history": [asdict(h) for h in result.history],
        "best_epoch": result.best_epoch,
        "best_val_dice": result.best_val_dice,
        "test_dice": test_dice,
        "test_miou": test_miou,
        "stopped_early": result.stopped_early,
        "wall_clock_s": time.perf_counter() - start,
    }
    (out / "report.json").write_text(json.dumps(report, indent=1))
    print(json.dumps({k: report[k] for k in ("best_epoch", "best_val_dice", "test_dice", "test_miou", "param_count")}))
    return 0


def cmd_eval(args) -> int:
    model, train_cfg, _ = checkpoint.load(args.checkpoint)
    ds = load_dataset(args.data)
    if ds.image_size != model.config.image_size:
        raise UsageError(f"data image size {ds.image_size} differs from model {model.config.image_size}")
    cases = ds.split(args.split)
    if not cases:
        raise UsageError(f"split {args.split!r} is empty")
    dice, iou = evaluate(model, cases, _tokens(model, cases, train_cfg.use_text), train_cfg.batch_size)
    result = {"split": args.split, "cases": len(cases), "dice": dice, "miou": iou, "checkpoint": str(args.checkpoint)}
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name(f"eval_{args.split}.json")
    out.write_text(json.dumps(result, indent=1))
    print(json.dumps(result))
    return 0


def cmd_saliency(args) -> int:
    model, train_cfg, _ = checkpoint.load(args.checkpoint)
    valid = model.saliency_layers()
    if args.layer not in valid:
        raise UsageError(f"unknown layer {args.layer!r}; valid layers: {', '.join(valid)}")
    ds = load_dataset(args.data)
    case = ds.by_id(args.case_id)
    tokens = _tokens(model, [case], train_cfg.use_text)
    cam = model.saliency(case.image[None], tokens, args.layer)
    out = Path(args.out) if args.out else Path(f"{args.case_id}_{args.layer}.pgm")
    write_pgm(out, np.round(np.clip(cam, 0, 1) * 65535).astype(np.uint16), 65535)
    print(json.dumps({"out": str(out), "layer": args.layer, "case": args.case_id, "max": float(cam.max())}))
    return 0


def cmd_grad_check(args) -> int:
    precisions = ("float64", "float32") if args.precision == "both" else (args.precision,)
    ok = True
    for precision in precisions:
        start = time.perf_counter()
        results = check_model(precision, LViTConfig.mini(), per_group=args.per_group, seed=args.seed)
        print(format_table(results, precision))
        print(f"{precision}: {len(results)} groups in {time.perf_counter() - start:.1f}s")
        ok &= all(r.passed for r in results)
    if not ok:
        worst = {p: TOLERANCE[p] for p in precisions}
        raise GradientCheckFailed(f"gradient check exceeded tolerance {worst}")
    return 0


class GradientCheckFailed(RuntimeError):
    pass


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "saliency": cmd_saliency,
    "grad-check": cmd_grad_check,
}


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": " ".join(str(message).split())}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        return _fail("UsageError", str(exc), 2)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parsable line
        return _fail(type(exc).__name__, str(exc), 1)


if __name__ == "__main__":
    sys.exit(main())
