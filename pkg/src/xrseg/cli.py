"""Command-line entry point: ``xrseg synth|train|eval|predict|curves``.

Failures print a single ``xrseg-error: <kind>: <message>`` line on stderr
and exit with status 1 (argument errors exit with status 2).
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np
from PIL import Image

from . import data as data_mod
from .checkpoint import CheckpointError, load_checkpoint
from .data import DatasetError
from .metrics import cumulative_curve
from .models import ModelSpec, build_model
from .tensor_core import ShapeError
from .training import History, TrainConfig, TrainingError, evaluate, predict, train

log = logging.getLogger("xrseg")


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


# -- run configuration --------------------------------------------------------


@dataclass
class RunConfig:
    arch: str = "segnet"
    in_channels: int = 1
    base_channels: int = 0  # 0 selects the architecture default
    depth: int = 0
    size: int = 128
    data: str = ""
    out: str = ""
    train_fraction: float = 0.8
    split_seed: int = 0
    batch_size: int = 16
    epochs: int = 50
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    loss_kind: str = "dice"
    threshold: float = 0.5
    seed: int = 0
    checkpoint_every: int = 0

    def model_spec(self) -> ModelSpec:
        return ModelSpec(
            arch=self.arch,
            in_channels=self.in_channels,
            base_channels=self.base_channels or None,
            depth=self.depth or None,
            input_hw=(self.size, self.size),
            seed=self.seed,
        )

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: getattr(self, k) for k in names})

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))


def parse_kv_text(text: str, origin: str = "config") -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CliError("config", f"{origin}:{n}: expected key=value, got {line!r}")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def resolve_run_config(file_values: dict[str, str], overrides: dict[str, object]) -> RunConfig:
    """Defaults, then config-file values, then command-line flags."""
    cfg = RunConfig()
    types = {f.name: f.type for f in fields(RunConfig)}
    merged: dict[str, object] = dict(file_values)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    for key, raw in merged.items():
        if key not in types:
            raise CliError("config", f"unknown config key {key!r}")
        cast = {"int": int, "float": float, "str": str}[types[key]]
        try:
            setattr(cfg, key, cast(raw))
        except ValueError as exc:
            raise CliError("config", f"bad value for {key}: {raw!r}") from exc
    return cfg


# -- commands -----------------------------------------------------------------


def _prepare_out(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()) and not force:
        raise CliError("exists", f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)


def cmd_synth(args) -> None:
    out = Path(args.out)
    _prepare_out(out, args.force)
    ds = data_mod.gen_synthetic(args.n, (args.size, args.size), args.seed)
    data_mod.write_dataset(ds, out)
    print(f"wrote {len(ds)} image/mask pairs to {out}")


TRAIN_FLAGS = (
    "arch", "base_channels", "depth", "size", "data", "out", "train_fraction", "split_seed", "batch_size",
    "epochs", "lr", "loss_kind", "threshold", "seed", "checkpoint_every",
)  # fmt: skip


def _format_row(title: str, row: dict) -> list[str]:
    lines = [f"{title} (epoch {row['epoch']})"]
    for key, value in row.items():
        if key != "epoch":
            lines.append(f"  {key:<22}{value:.4f}")
    return lines


def cmd_train(args) -> None:
    file_values = parse_kv_text(Path(args.config).read_text(), args.config) if args.config else {}
    overrides = {k: getattr(args, k, None) for k in TRAIN_FLAGS}
    for item in args.set or []:
        overrides.update(parse_kv_text(item, "--set"))
    rc = resolve_run_config(file_values, overrides)
    if not rc.data:
        raise CliError("config", "no dataset given (--data or data= in the config)")
    if not rc.out:
        raise CliError("config", "no output directory given (--out or out= in the config)")
    try:
        spec = rc.model_spec()
        cfg = rc.train_config()
    except ValueError as exc:
        raise CliError("config", str(exc)) from exc
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(rc.to_text())

    ds = data_mod.load_root(rc.data, spec.input_hw)
    train_ds, val_ds = data_mod.split(ds, rc.train_fraction, rc.split_seed)
    model = build_model(spec)
    history_path = out / "history.csv"
    history = History()

    def on_epoch(row):
        history.append(row)
        history_path.write_text(history.to_csv())

    train(model, train_ds, val_ds, cfg, checkpoint_dir=out, on_epoch=on_epoch)
    report = [f"model: {spec.arch}  train={len(train_ds)} val={len(val_ds)}  batch_size={cfg.batch_size}"]
    report += _format_row("final", history.final())
    report += _format_row("best (max val_dice_coef)", history.best())
    (out / "report.txt").write_text("\n".join(report) + "\n")
    print("\n".join(report))


EVAL_COLUMNS = (
    "model", "loss", "dice_coef", "jaccard_coef", "binary_accuracy", "specificity", "sensitivity", "recall", "precision",
)  # fmt: skip
PER_IMAGE_COLUMNS = ("id", "dice", "jaccard", "precision", "recall")


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def cmd_eval(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    cache = {}
    for ck in args.checkpoint:
        model, _, epoch = load_checkpoint(ck)
        hw = model.spec.input_hw
        if hw not in cache:
            cache[hw] = data_mod.load_root(args.data, hw)
        ds = cache[hw]
        cfg = TrainConfig(batch_size=args.batch_size, threshold=args.threshold, loss_kind=args.loss)
        try:
            report, per_image = evaluate(model, ds, cfg)
        except ShapeError as exc:
            raise CliError("mismatch", f"checkpoint {ck} does not fit dataset {args.data}: {exc}") from exc
        name = f"{Path(ck).stem}:{model.spec.arch}"
        rows.append({"model": name, **report.as_dict()})
        per_path = out / ("per_image.csv" if len(args.checkpoint) == 1 else f"{Path(ck).stem}_per_image.csv")
        with per_path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(PER_IMAGE_COLUMNS)
            for r in per_image:
                w.writerow([_fmt(r[c]) for c in PER_IMAGE_COLUMNS])
    with (out / "metrics.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in EVAL_COLUMNS])
    width = max(len(r["model"]) for r in rows) + 2
    lines = ["Model".ljust(width) + "".join(c.replace("_", " ").title().ljust(16) for c in EVAL_COLUMNS[1:])]
    for r in rows:
        lines.append(r["model"].ljust(width) + "".join(f"{r[c]:<16.4f}" for c in EVAL_COLUMNS[1:]))
    (out / "metrics.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))


def _to_u8(arr01: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(arr01 * 255.0), 0, 255).astype(np.uint8)


def cmd_predict(args) -> None:
    model, _, _ = load_checkpoint(args.checkpoint)
    hw = model.spec.input_hw
    image_dir = Path(args.images)
    mask_dir = Path(args.masks) if args.masks else image_dir.parent / "masks"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    images = data_mod._list_images(image_dir)
    if not images:
        raise DatasetError(f"no images found in {image_dir}")
    masks = data_mod._list_images(mask_dir) if mask_dir.is_dir() else {}
    for stem, path in images.items():
        image = data_mod.preprocess_image(data_mod.read_gray(path), hw)
        prob = predict(model, image[None])[0, 0]
        pred = np.where(prob >= args.threshold, 255, 0).astype(np.uint8)
        Image.fromarray(pred).save(out / f"{stem}.png", format="PNG")
        if not args.triptych:
            continue
        panels = [_to_u8(image[0]), pred]
        partner = masks.get(stem) or masks.get(stem + data_mod.MASK_SUFFIX)
        if partner is None:
            print(f"xrseg-warning: no mask for {stem}; writing image|prediction pair", file=sys.stderr)
            Image.fromarray(np.hstack(panels)).save(out / f"{stem}_pair.png", format="PNG")
            continue
        truth = data_mod.preprocess_mask(data_mod.read_gray(partner), hw)[0]
        panels.append(_to_u8(truth))
        Image.fromarray(np.hstack(panels)).save(out / f"{stem}_triptych.png", format="PNG")
    print(f"wrote predictions for {len(images)} images to {out}")


def read_per_image_csv(path: Path) -> tuple[list[float], list[float]]:
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise CliError("empty", f"{path} contains no per-image rows")
    try:
        return [float(r["dice"]) for r in rows], [float(r["jaccard"]) for r in rows]
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError("format", f"{path} needs numeric dice and jaccard columns") from exc


def curves_svg(thresholds, dice_cdf, jaccard_cdf, width: int = 480, height: int = 360) -> str:
    pad = 48
    pw, ph = width - 2 * pad, height - 2 * pad

    def path(ys):
        pts = [(pad + x * pw, pad + (1 - y) * ph) for x, y in zip(thresholds, ys)]
        return " ".join(f"{'M' if i == 0 else 'L'}{x:.2f},{y:.2f}" for i, (x, y) in enumerate(pts))

    ticks = []
    for t in (0.0, 0.25, 0.5, 0.75, 1.0):
        x, y = pad + t * pw, pad + (1 - t) * ph
        ticks.append(f'<text x="{x:.1f}" y="{height - pad + 16}" font-size="11" text-anchor="middle">{t:g}</text>')
        ticks.append(f'<text x="{pad - 6}" y="{y + 4:.1f}" font-size="11" text-anchor="end">{t:g}</text>')
    title = escape("Cumulative frequency of per-image Dice and Jaccard")
    return "\n".join(
        [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
            f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
            f'<text x="{width / 2}" y="20" font-size="13" text-anchor="middle">{title}</text>',
            f'<rect x="{pad}" y="{pad}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
            *ticks,
            f'<path d="{path(dice_cdf)}" fill="none" stroke="#1f77b4" stroke-width="2"/>',
            f'<path d="{path(jaccard_cdf)}" fill="none" stroke="#d62728" stroke-width="2"/>',
            f'<text x="{pad + 8}" y="{pad + 16}" font-size="11" fill="#1f77b4">dice</text>',
            f'<text x="{pad + 8}" y="{pad + 30}" font-size="11" fill="#d62728">jaccard</text>',
            f'<text x="{width / 2}" y="{height - 8}" font-size="11" text-anchor="middle">metric value</text>',
            "</svg>",
            "",
        ]
    )


def cmd_curves(args) -> None:
    dice, jaccard = read_per_image_csv(Path(args.per_image_csv))
    dc = cumulative_curve(dice, args.points)
    jc = cumulative_curve(jaccard, args.points)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "curves.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("threshold", "dice_cdf", "jaccard_cdf"))
        for t, d, j in zip(dc.thresholds, dc.fractions, jc.fractions):
            w.writerow((repr(float(t)), repr(float(d)), repr(float(j))))
    (out / "curves.svg").write_text(curves_svg(dc.thresholds, dc.fractions, jc.fractions))
    print(f"wrote curves for {len(dice)} images to {out}")


# -- argument parsing ---------------------------------------------------------


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xrseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic image/mask dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=_positive_int, required=True)
    s.add_argument("--size", type=_positive_int, default=128)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--force", action="store_true", help="write into a non-empty directory")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model; writes history.csv, checkpoints and report.txt")
    t.add_argument("--config", help="key=value config file; flags override it")
    t.add_argument("--data", help="dataset root containing images/ and masks/")
    t.add_argument("--arch", choices=("segnet", "resunet", "unet"))
    t.add_argument("--out")
    t.add_argument("--epochs", type=_positive_int)
    t.add_argument("--batch-size", dest="batch_size", type=_positive_int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--split-seed", dest="split_seed", type=int)
    t.add_argument("--train-fraction", dest="train_fraction", type=float)
    t.add_argument("--base-channels", dest="base_channels", type=_positive_int)
    t.add_argument("--depth", type=_positive_int)
    t.add_argument("--size", type=_positive_int)
    t.add_argument("--loss", dest="loss_kind", choices=("dice", "bce"))
    t.add_argument("--threshold", type=float)
    t.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate checkpoints on a dataset")
    e.add_argument("--checkpoint", action="append", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--batch-size", dest="batch_size", type=_positive_int, default=16)
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--loss", choices=("dice", "bce"), default="dice")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="write predicted masks (and triptychs)")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--images", required=True)
    r.add_argument("--masks", help="ground-truth masks (default: sibling masks/ dir)")
    r.add_argument("--out", required=True)
    r.add_argument("--triptych", action="store_true")
    r.add_argument("--threshold", type=float, default=0.5)
    r.set_defaults(func=cmd_predict)

    c = sub.add_parser("curves", help="cumulative frequency curves from a per-image CSV")
    c.add_argument("--per-image-csv", dest="per_image_csv", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--points", type=_positive_int, default=100)
    c.set_defaults(func=cmd_curves)
    return p


def _thread_limit():
    raw = os.environ.get("XRSEG_THREADS")
    if not raw:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(raw))


_ERROR_KINDS = (
    (CliError, None),
    (DatasetError, "dataset"),
    (CheckpointError, "checkpoint"),
    (TrainingError, "training"),
    (ShapeError, "shape"),
    (OSError, "io"),
    (ValueError, "value"),
)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    limiter = _thread_limit()
    try:
        args.func(args)
    except Exception as exc:
        for cls, kind in _ERROR_KINDS:
            if isinstance(exc, cls):
                kind = kind or exc.kind
                print(f"xrseg-error: {kind}: {exc}", file=sys.stderr)
                return 1
        raise
    finally:
        if limiter is not None:
            limiter.unregister()
    return 0


if __name__ == "__main__":
    sys.exit(main())
