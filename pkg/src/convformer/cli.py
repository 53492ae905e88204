"""``convformer`` command line: train, eval, gradcheck and ablate.

Exit codes: 0 success, 1 failed check, 2 usage/config/checkpoint error,
3 numeric abort during training.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import gradsuite
from .cft import load_tensor, save_tensor
from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .config import RunConfig, format_config, load_config
from .data import synth_dataset
from .errors import ConfigError, DataError, NumericError, StateError
from .metrics import MetricsReport
from .model import VARIANT_LABELS, VARIANTS, ConvFormer
from .train import evaluate, predict, train_loop

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def _deterministic(enabled: bool):
    return threadpool_limits(limits=1) if enabled else contextlib.nullcontext()


# -- datasets


def save_dataset(directory: str | Path, dataset) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_tensor(directory / "images.cft", np.stack([im for im, _ in dataset]))
    save_tensor(directory / "masks.cft", np.stack([m for _, m in dataset]).astype(np.float32))


def load_dataset_dir(directory: str | Path) -> list[tuple[np.ndarray, np.ndarray]]:
    directory = Path(directory)
    try:
        images, masks = load_tensor(directory / "images.cft"), load_tensor(directory / "masks.cft")
    except OSError as exc:
        raise ConfigError(f"cannot read dataset in {directory}: {exc.strerror}") from None
    if images.ndim != 4 or masks.shape != (images.shape[0],) + images.shape[2:]:
        raise DataError(f"dataset shapes disagree: images {images.shape}, masks {masks.shape}")
    if not np.array_equal(masks, np.round(masks)):
        raise DataError("mask values must be integral class indices")
    return [(im, m.astype(np.int64)) for im, m in zip(images, masks)]


def datasets(cfg: RunConfig) -> tuple[list, list]:
    """``(train, val)``: from ``dataset_dir`` when set (no validation split), else synthetic."""
    if cfg.dataset_dir:
        return load_dataset_dir(cfg.dataset_dir), []
    train = synth_dataset(cfg.train_size, cfg.image_size, cfg.data_seed)
    val = synth_dataset(cfg.val_size, cfg.image_size, cfg.data_seed + 1) if cfg.val_size else []
    return train, val


def check_geometry(model: ConvFormer, dataset) -> None:
    image, _ = dataset[0]
    if image.shape[0] != model.cfg.in_channels:
        raise ConfigError(f"model expects {model.cfg.in_channels} input channel(s), data has {image.shape[0]}")
    if image.shape[1] % 16 or image.shape[2] % 16:
        raise ConfigError(f"image size {image.shape[1:]} is not a multiple of 16")
    top = max(int(m.max()) for _, m in dataset)
    if top >= model.cfg.num_classes:
        raise ConfigError(f"data has class {top} but the model predicts {model.cfg.num_classes} classes")


# -- outputs


def write_pgm(path: str | Path, mask: np.ndarray, num_classes: int) -> None:
    """8-bit binary graymap with classes spread evenly over 0..255."""
    levels = (np.asarray(mask, dtype=np.int64) * (255 // max(num_classes - 1, 1))).astype(np.uint8)
    h, w = levels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(levels.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, dims, maxval, rest = data.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise DataError(f"{path}: not an 8-bit binary PGM")
    w, h = (int(v) for v in dims.split())
    return np.frombuffer(rest, dtype=np.uint8).reshape(h, w)


def write_report(out: Path, stem: str, report: MetricsReport) -> None:
    (out / f"{stem}.txt").write_text(report.to_text())
    (out / f"{stem}.csv").write_text(report.to_csv())


def prepare_output(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.txt").write_text(format_config(cfg))
    return out


# -- commands


def cmd_train(cfg: RunConfig) -> int:
    out = prepare_output(cfg)
    train, _ = datasets(cfg)
    model = ConvFormer(cfg.model_config(), seed=cfg.seed)
    check_geometry(model, train)
    with open(out / "loss.log", "w") as log:
        result = train_loop(model.cfg, cfg.train_config(), train, model=model,
                            log=lambda it, lr, loss: log.write(f"iter={it} lr={lr!r} loss={loss!r}\n"))
        log.writelines(f"eval iter={it} dice={dice!r}\n" for it, dice in result.history)
    save_checkpoint(out / "model.ckpt", result.model)
    report = evaluate(result.model, train, cfg.spacing)
    write_report(out, "train_metrics", report)
    print(f"trained {cfg.variant} for {cfg.max_iters} iterations; "
          f"final loss {result.losses[-1] if result.losses else float('nan'):.4f}; "
          f"train dice {report.mean('dice'):.4f}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, checkpoint: str | None = None) -> int:
    out = prepare_output(cfg)
    path = Path(checkpoint or cfg.checkpoint_in or out / "model.ckpt")
    try:
        ckpt_cfg, _ = read_checkpoint(path)
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    if ckpt_cfg != cfg.model_config():
        diff = [f.name for f in dataclasses.fields(ckpt_cfg)
                if getattr(ckpt_cfg, f.name) != getattr(cfg.model_config(), f.name)]
        raise ConfigError(f"checkpoint {path} was built with a different model config ({', '.join(diff)})")
    model = load_checkpoint(path)
    train, val = datasets(cfg)
    data = val if cfg.eval_split == "val" else train
    if not data:
        raise ConfigError(f"eval_split={cfg.eval_split} selects an empty dataset")
    check_geometry(model, data)
    report = evaluate(model, data, cfg.spacing)
    write_report(out, "eval_metrics", report)
    if cfg.dump_masks:
        masks_dir = out / "masks"
        masks_dir.mkdir(exist_ok=True)
        preds = predict(model, np.stack([im for im, _ in data]))
        for i, p in enumerate(preds):
            write_pgm(masks_dir / f"pred_{i:04d}.pgm", p, model.cfg.num_classes)
    print(report.to_text().splitlines()[-1])
    return EXIT_OK


def cmd_gradcheck(op: str, seed: int = 0) -> int:
    names = list(gradsuite.CHECKS) if op == "all" else [op]
    if any(n not in gradsuite.CHECKS for n in names):
        print(f"error: unknown op {op!r}; choose from all, {', '.join(gradsuite.CHECKS)}", file=sys.stderr)
        return EXIT_CONFIG
    failed = []
    for name in names:
        t0 = time.perf_counter()
        report = gradsuite.CHECKS[name](seed)
        print(f"{report.summary()} ({time.perf_counter() - t0:.2f}s)")
        if not report.passed:
            failed.append(report)
    for report in failed:
        print(f"gradient check failed: {report.name} max_rel_err={report.max_error:.3e}", file=sys.stderr)
    return EXIT_CHECK if failed else EXIT_OK


ABLATION_KEYS = ("iou", "precision", "recall", "f1")


def run_ablation(cfg: RunConfig, variants=tuple(VARIANTS)) -> list[dict]:
    """Train every variant on the same data and seeds; score each on the validation split."""
    train, val = datasets(cfg)
    val = val or train
    rows = []
    for name in variants:
        vcfg = dataclasses.replace(cfg, variant=name)
        scores = {k: [] for k in ABLATION_KEYS + ("dice",)}
        params = 0
        for i in range(cfg.ablation_seeds):
            scfg = dataclasses.replace(vcfg, seed=cfg.seed + i)
            result = train_loop(scfg.model_config(), scfg.train_config(), train,
                                model=ConvFormer(scfg.model_config(), seed=scfg.seed))
            params = result.model.num_parameters()
            report = evaluate(result.model, val, cfg.spacing)
            for k in scores:
                scores[k].append(report.mean(k))
        rows.append({"variant": name, "label": VARIANT_LABELS[name], "params": params,
                     **{k: float(np.mean(v)) for k, v in scores.items()},
                     "per_seed_dice": scores["dice"]})
    return rows


def format_ablation(rows: list[dict]) -> str:
    width = max(len(r["label"]) for r in rows)
    head = f"{'method':<{width}}  {'params':>8}  " + "  ".join(f"{k:>9}" for k in ABLATION_KEYS)
    lines = [head]
    for r in rows:
        lines.append(f"{r['label']:<{width}}  {r['params']:>8d}  "
                     + "  ".join(f"{r[k]:>9.4f}" for k in ABLATION_KEYS))
    return "\n".join(lines) + "\n"


def cmd_ablate(cfg: RunConfig) -> int:
    out = prepare_output(cfg)
    rows = run_ablation(cfg)
    table = format_ablation(rows)
    (out / "ablation.txt").write_text(table)
    (out / "ablation.csv").write_text(
        "variant,params," + ",".join(ABLATION_KEYS) + "\n"
        + "".join(f"{r['variant']},{r['params']}," + ",".join(f"{r[k]:.6f}" for k in ABLATION_KEYS) + "\n"
                  for r in rows))
    print(table, end="")
    return EXIT_OK


# -- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="convformer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "eval", "gradcheck", "ablate"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=name != "gradcheck", help="key=value config file")
        p.add_argument("--variant", choices=list(VARIANTS), help="override the config's variant")
        p.add_argument("--seed", type=int, help="override the config's seed")
        p.add_argument("--deterministic", action="store_true", help="single-threaded, bitwise-reproducible run")
        if name == "eval":
            p.add_argument("--checkpoint", help="checkpoint to score (default: from the config)")
        if name == "gradcheck":
            p.add_argument("--op", default="all", help="check name, or 'all'")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    changes = {}
    if args.variant is not None:
        changes["variant"] = args.variant
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.deterministic:
        changes["deterministic"] = True
    cfg = dataclasses.replace(cfg, **changes)
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        if args.command == "gradcheck":
            deterministic = args.deterministic
            cfg = resolve_config(args) if args.config else None
            if cfg is not None:
                deterministic = cfg.deterministic
            with _deterministic(deterministic):
                return cmd_gradcheck(args.op, args.seed if args.seed is not None else 0)
        cfg = resolve_config(args)
        with _deterministic(cfg.deterministic):
            if args.command == "train":
                return cmd_train(cfg)
            if args.command == "eval":
                return cmd_eval(cfg, args.checkpoint)
            return cmd_ablate(cfg)
    except (ConfigError, DataError, StateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
