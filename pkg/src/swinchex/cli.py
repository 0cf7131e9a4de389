"""``swinchex {split|train|eval|gradcam|complexity|check}`` command-line entry point."""
from __future__ import annotations

import argparse
import logging
import shutil
import sys
import warnings
from pathlib import Path

from . import checks
from .complexity import complexity_rows, rows_to_csv
from .config import ConfigError, RunConfig
from .data import (
    CLASS_NAMES, DataError, ImageFolder, SplitManifest, class_index, filter_records,
    load_image, make_batches, parse_label_csv, patient_split, read_image_list, records_for,
)
from .gradcam import grad_cam, render_heatmap
from .model import SwinModel, init_model
from .tensor import ParamSet
from .train import (
    EvalReport, NumericError, TrainState, evaluate, fit, make_optimizer, select_best_epoch,
    write_best, write_metrics_csv, write_report_csv,
)

log = logging.getLogger("swinchex")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_CHECK = 0, 2, 3, 4, 5


class CheckFailed(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# shared plumbing


def load_records(cfg: RunConfig):
    records = parse_label_csv(cfg.data.labels)
    if cfg.data.image_list:
        records = filter_records(records, read_image_list(cfg.data.image_list))
    if not records:
        raise DataError(f"{cfg.data.labels}: no usable records")
    return records


def load_manifest(cfg: RunConfig, records) -> SplitManifest:
    path = cfg.manifest_path
    if path.exists():
        return SplitManifest.load(path)
    manifest = patient_split(records, cfg.split.train_frac, cfg.split.seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest.save(path)
    log.info("wrote split manifest %s", path)
    return manifest


def load_model(cfg: RunConfig, checkpoint) -> SwinModel:
    try:
        params = ParamSet.load(checkpoint)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {checkpoint}: {exc.strerror or exc}") from exc
    except ValueError as exc:
        raise DataError(f"{checkpoint}: {exc}") from exc
    expected = init_model(cfg.model, 0).params
    if {p: t.shape for p, t in expected.items()} != {p: t.shape for p, t in params.items()}:
        raise ConfigError(f"{checkpoint}: parameters do not match the [model] section of {cfg.source}")
    return SwinModel(cfg.model, params)


def _batch_seed(seed: int, epoch: int) -> int:
    return (seed << 32) + epoch


# ---------------------------------------------------------------------------
# commands


def cmd_split(cfg: RunConfig) -> Path:
    cfg.validate()
    records = load_records(cfg)
    manifest = patient_split(records, cfg.split.train_frac, cfg.split.seed)
    path = cfg.manifest_path
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest.save(path)
    return path


def cmd_train(cfg: RunConfig) -> Path:
    """Train, checkpoint every epoch, and keep the epoch with the best validation AUC."""
    cfg.validate()
    if cfg.train.epochs < 1:
        raise ConfigError(f"{cfg.source}: [train] epochs: nothing to train (epochs={cfg.train.epochs})")
    records = load_records(cfg)
    manifest = load_manifest(cfg, records)
    images = ImageFolder(cfg.data.images, cfg.model.image_size)
    train_recs, val_recs = records_for(records, manifest.train), records_for(records, manifest.val)
    out = cfg.output_dir
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.ini")

    tc = cfg.train
    val_batches = make_batches(val_recs, images, tc.batch_size, shuffle=False)
    state = TrainState(init_model(cfg.model, tc.seed), make_optimizer(tc.optimizer, tc.weight_decay), tc.seed)

    def on_epoch(st: TrainState, rec) -> None:
        st.model.params.save(ckpt_dir / f"epoch_{rec.epoch:03d}.swcx")
        write_metrics_csv(st.history, out / "metrics.csv")

    fit(state, lambda e: make_batches(train_recs, images, tc.batch_size, _batch_seed(tc.seed, e)),
        val_batches, tc.epochs, tc.lr, on_epoch)
    best = select_best_epoch(state.history)
    name = f"epoch_{best:03d}.swcx"
    shutil.copyfile(ckpt_dir / name, out / "best.swcx")
    write_best(out / "best.txt", best, f"checkpoints/{name}", state.history[best].val_mean_auc)
    return out / "best.swcx"


def cmd_eval(cfg: RunConfig, checkpoint=None, split: str = "val", out_path=None) -> EvalReport:
    cfg.validate()
    if split not in ("train", "val"):
        raise ConfigError(f"split must be train or val, got {split!r}")
    records = load_records(cfg)
    manifest = load_manifest(cfg, records)
    model = load_model(cfg, checkpoint or cfg.output_dir / "best.swcx")
    images = ImageFolder(cfg.data.images, cfg.model.image_size)
    ids = manifest.train if split == "train" else manifest.val
    batches = make_batches(records_for(records, ids), images, cfg.train.batch_size, shuffle=False)
    with warnings.catch_warnings():
        warnings.simplefilter("always")
        report = evaluate(model, batches, split)
    out_path = Path(out_path or cfg.output_dir / f"eval_{split}.csv")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_report_csv({cfg.model.head_variant: report}, out_path)
    return report


def cmd_gradcam(cfg: RunConfig, image, checkpoint=None, class_name: str | None = None, out_path=None) -> Path:
    cfg.validate(need_data=False)
    model = load_model(cfg, checkpoint or cfg.output_dir / "best.swcx")
    try:
        target = None if class_name is None else class_index(class_name)
    except DataError as exc:
        raise ConfigError(f"unknown class {class_name!r}; expected one of {', '.join(CLASS_NAMES)}") from exc
    if not Path(image).is_file():
        raise DataError(f"image not found: {image}")
    arr = load_image(image, cfg.model.image_size)
    heat = grad_cam(model, arr, target)
    out_path = Path(out_path or cfg.output_dir / f"gradcam_{Path(image).stem}.png")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    render_heatmap(heat.values, arr, out_path)
    log.info("target %s (%s)", CLASS_NAMES[heat.target_class], "dominant" if heat.dominant else "requested")
    return out_path


def cmd_complexity(sizes, channels, windows, out_path=None, measure: bool = True) -> str:
    text = rows_to_csv(complexity_rows(sizes, channels, windows, measure))
    if out_path:
        Path(out_path).write_text(text, encoding="utf-8")
    return text


def cmd_check(cfg: RunConfig | None = None, seed: int = 0) -> list[checks.CheckResult]:
    model_cfg = cfg.model if cfg is not None else None
    if cfg is not None:
        cfg.validate(need_data=False)
    results = checks.run_all(model_cfg, seed)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.ok]
    if failed:
        raise CheckFailed(f"{len(failed)} of {len(results)} checks failed")
    return results


# ---------------------------------------------------------------------------
# argument parsing


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="swinchex", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p, required=True):
        p.add_argument("--config", required=required, help="run config (key = value sections)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config key; repeatable")
        return p

    with_config(sub.add_parser("split", help="write the patient-wise train/val manifest"))
    with_config(sub.add_parser("train", help="train and select the best-validation epoch"))
    p = with_config(sub.add_parser("eval", help="per-class AUROC report for a checkpoint"))
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="val", choices=("train", "val"))
    p.add_argument("--out")
    p = with_config(sub.add_parser("gradcam", help="Grad-CAM heatmap for one image"))
    p.add_argument("--image", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--class", dest="class_name")
    p.add_argument("--out")
    p = sub.add_parser("complexity", help="attention cost table, formula and measured")
    p.add_argument("--sizes", type=_int_list, default=[56, 28, 14, 7])
    p.add_argument("--channels", type=_int_list, default=[192])
    p.add_argument("--windows", type=_int_list, default=[7])
    p.add_argument("--no-measure", action="store_true", help="skip the instrumented MAC count")
    p.add_argument("--out")
    p = with_config(sub.add_parser("check", help="gradient checks and kernel oracles"), required=False)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _config(args) -> RunConfig | None:
    if getattr(args, "config", None) is None:
        return RunConfig().with_overrides(args.overrides) if getattr(args, "overrides", None) else None
    return RunConfig.load(args.config).with_overrides(args.overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = _config(args)
        if args.command == "split":
            print(cmd_split(cfg))
        elif args.command == "train":
            print(cmd_train(cfg))
        elif args.command == "eval":
            report = cmd_eval(cfg, args.checkpoint, args.split, args.out)
            print(f"mean AUC {report.mean_auc:.4f}")
        elif args.command == "gradcam":
            print(cmd_gradcam(cfg, args.image, args.checkpoint, args.class_name, args.out))
        elif args.command == "complexity":
            text = cmd_complexity(args.sizes, args.channels, args.windows, args.out, not args.no_measure)
            if not args.out:
                sys.stdout.write(text)
        elif args.command == "check":
            cmd_check(cfg, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except ValueError as exc:  # shape and range violations not caught by validation
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
