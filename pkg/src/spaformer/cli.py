"""Command line: ``train``, ``infer`` and ``eval``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import IMAGE_SUFFIXES, ImageReadError, binarize_mask, read_png, scan_istd
from .errors import ContractError
from .metrics import aggregate_reports, evaluate_pair, format_key_values, format_table
from .model import ModelConfig, init_params, load_checkpoint
from .trainer import TrainConfig, TrainingDiverged, infer, train

log = logging.getLogger("spaformer")


# ---------------------------------------------------------------------------
# flat key = value config files


def _convert(kind: str, key: str, value: str):
    try:
        if kind == "bool":
            lowered = value.lower()
            if lowered not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(value)
            return lowered in ("1", "true", "yes")
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        if kind.startswith("tuple"):
            return tuple(float(v) for v in value.replace(",", " ").split())
    except ValueError:
        raise ContractError(f"config key {key!r}: cannot parse {value!r} as {kind}") from None
    raise ContractError(f"config key {key!r}: unsupported type {kind}")


def parse_config_text(text: str) -> tuple[ModelConfig, TrainConfig]:
    """Parse ``key = value`` lines into model and training configs.

    Keys are field names of either config; ``model.<key>`` / ``train.<key>``
    target one explicitly. A bare ``seed`` sets both. ``#`` starts a comment.
    """
    model_types = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
    train_types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    model_kw: dict = {}
    train_kw: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"config line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        scope, _, name = key.rpartition(".")
        targets = []
        if scope in ("", "model") and name in model_types:
            targets.append((model_kw, model_types[name]))
        if scope in ("", "train") and name in train_types:
            targets.append((train_kw, train_types[name]))
        if not targets:
            raise ContractError(f"config line {lineno}: unknown key {key!r}")
        for kw, kind in targets:
            kw[name] = _convert(kind, key, value)
    return ModelConfig(**model_kw), TrainConfig(**train_kw)


def load_config(path: str | Path | None) -> tuple[ModelConfig, TrainConfig]:
    if path is None:
        return ModelConfig(), TrainConfig()
    return parse_config_text(Path(path).read_text())


# ---------------------------------------------------------------------------
# commands


def _image_files(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    raise ContractError(f"{path} does not exist")


def cmd_train(args) -> int:
    model_config, train_config = load_config(args.config)
    index = scan_istd(args.data, seed=train_config.seed, layout=args.layout)
    model = init_params(model_config)
    out = Path(args.out)
    result = train(model, index, train_config, out_dir=out)
    lines = ["step,l_cgan_g,l_cgan_d,l1,l_attention,total"]
    for step, b in enumerate(result.history, 1):
        lines.append(f"{step},{b.l_cgan_g:.8g},{b.l_cgan_d:.8g},{b.l1:.8g},{b.l_attention:.8g},{b.total:.8g}")
    (out / "train_log.csv").write_text("\n".join(lines) + "\n")
    for epoch, report in result.evals:
        (out / f"eval_epoch{epoch:04d}.txt").write_text(format_key_values(report))
    print(f"trained steps={result.steps} checkpoint={out / 'final.ckpt'}")
    return 0


def cmd_infer(args) -> int:
    model = load_checkpoint(args.ckpt)
    files = _image_files(Path(args.inp))
    if not files:
        raise ContractError(f"no images found in {args.inp}")
    for f in files:
        image = read_png(f)
        result = infer(model, image, args.out, f.stem, "resize" if args.resize else "error")
        print(f"wrote {result.paths[0]} attention_maps={len(result.attention)}")
    return 0


def _by_stem(directory: str | Path) -> dict[str, Path]:
    return {p.stem: p for p in _image_files(Path(directory))}


def cmd_eval(args) -> int:
    preds, gts, masks = _by_stem(args.pred), _by_stem(args.gt), _by_stem(args.mask)
    ids = sorted(set(preds) & set(gts) & set(masks))
    missing = sorted(set(gts) - set(ids))
    if missing:
        log.warning("%d ground-truth images lack a prediction or mask (first: %s)", len(missing), missing[0])
    if not ids:
        raise ContractError("no image id is present in all of --pred, --gt and --mask")
    rows = []
    for i in ids:
        pred, gt = read_png(preds[i]), read_png(gts[i])
        mask = binarize_mask(read_png(masks[i], "L"))
        if pred.shape != gt.shape:
            raise ContractError(f"{i}: prediction {pred.shape[1:]} and ground truth {gt.shape[1:]} differ in size")
        rows.append((i, evaluate_pair(pred.astype(np.float64), gt.astype(np.float64), mask, on_empty="nan")))
    summary = aggregate_reports([r for _, r in rows], mode=args.mode)
    report = Path(args.report)
    report.parent.mkdir(parents=True, exist_ok=True)
    report.write_text(format_key_values(summary) + f"images={len(rows)}\naggregation={args.mode}\n")
    if args.table:
        Path(args.table).write_text(format_table(rows + [("mean", summary)]))
    print(f"evaluated images={len(rows)} report={report}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spaformer", description="Shadow removal with a transformer generator.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on a dataset root")
    p.add_argument("--data", required=True, help="dataset root (ISTD split layout or flat A/B/C)")
    p.add_argument("--out", required=True, help="directory for checkpoints and logs")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--layout", default="auto", choices=("auto", "istd", "flat"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="restore an image or a directory of images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True, help="image file or directory")
    p.add_argument("--out", required=True)
    p.add_argument("--resize", action="store_true", help="resize images whose size the model cannot take")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--report", required=True, help="key=value summary output")
    p.add_argument("--table", help="optional per-image CSV output")
    p.add_argument("--mode", default="per_image", choices=("per_image", "pooled"))
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ContractError, ImageReadError, TrainingDiverged, FileNotFoundError, FloatingPointError) as exc:
        message = str(exc).replace("\n", " ")
        print(f"error kind={type(exc).__name__} command={args.command} message={message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
