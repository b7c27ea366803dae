"""Command-line interface: synth, train, age, eval, interp.

Exit codes: 0 success, 1 usage or configuration error, 2 data error. Every
run dumps its fully resolved configuration (defaults included) as JSON next
to its primary output, so experiments can be reproduced from the artifacts
alone. Set FAGE_LOG=debug|info|warning to control verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError, FeatageError, ValidationError
from .interp import attribute_vector, interpolate, mean_features
from .metrics import (
    AgingDirection,
    EvalReport,
    evaluate,
    format_heatmap_csv,
    format_report_kv,
    format_report_text,
    heatmap,
)
from .model import AgeProgressionModel, ModelSpec, TrainConfig, load_model, save_model, train
from .store import (
    LongitudinalDataset,
    add_distractors,
    build_youngest_oldest,
    load_dataset,
    make_record,
    merge_datasets,
    save_dataset,
    split_folds,
)
from .synth import SyntheticConfig, generate, serialize_ground_truth

log = logging.getLogger("featage")

DIRECTIONS = {
    "none": AgingDirection.NONE,
    "gallery": AgingDirection.GALLERY_TO_PROBE,
    "probe": AgingDirection.PROBE_TO_GALLERY,
}


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so usage errors map to code 1."""

    def error(self, message):
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="featage", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic longitudinal dataset")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--subjects", type=int, default=500)
    p.add_argument("--age-min", type=int, default=2)
    p.add_argument("--age-max", type=int, default=20)
    p.add_argument("--records-min", type=int, default=2, help="min records per subject")
    p.add_argument("--records-max", type=int, default=4, help="max records per subject")
    p.add_argument("--gamma", type=float, default=8.0, help="drift magnitude")
    p.add_argument("--sigma", type=float, default=0.10, help="observation noise")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output dataset path")
    p.add_argument("--format", choices=("csv", "bin"), default=None)
    p.add_argument("--ground-truth", default=None, help="optional ground-truth BIN path")

    p = sub.add_parser("train", help="train the aging model on a dataset")
    p.add_argument("dataset")
    p.add_argument("--out", required=True, help="output model path")
    p.add_argument("--loss-log", default=None, help="per-iteration loss CSV path")
    p.add_argument("--iterations", type=int, default=2000)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--beta1", type=float, default=0.5)
    p.add_argument("--beta2", type=float, default=0.9)
    p.add_argument("--epsilon", type=float, default=1e-8)
    p.add_argument("--schedule", choices=("linear", "constant"), default="linear")
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--include-same-age", action="store_true")
    p.add_argument("--init", choices=("identity", "random"), default="identity")
    p.add_argument("--encoder-layers", type=int, default=1)
    p.add_argument("--decoder-layers", type=int, default=1)
    p.add_argument("--latent-dim", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("age", help="age-progress every record of a dataset")
    p.add_argument("model")
    p.add_argument("dataset")
    p.add_argument("--target-age", required=True, help="target age in years")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("csv", "bin"), default=None)

    p = sub.add_parser("eval", help="youngest-vs-oldest identification benchmark")
    p.add_argument("dataset")
    p.add_argument("--model", default=None, help="FAGM model path enabling feature aging")
    p.add_argument("--far", type=float, default=0.001)
    p.add_argument("--folds", type=int, default=None, help="k-fold cross validation")
    p.add_argument("--direction", choices=sorted(DIRECTIONS), default=None,
                   help="which side gets aged; default: gallery when a model is "
                        "available (given or fold-trained), else none")
    p.add_argument("--distractors", default=None, help="dataset of unmated probes")
    p.add_argument("--heatmap", default=None, help="write (age x lapse) rank-1 CSV here")
    p.add_argument("--age-bins", default=None, help="e.g. 2:7,7:12,12:17")
    p.add_argument("--lapse-bins", default=None, help="e.g. 1:5,5:9,9:13")
    p.add_argument("--min-gap", type=int, default=0)
    p.add_argument("--pretrained", action="store_true",
                   help="with --folds: reuse --model instead of retraining per fold")
    p.add_argument("--iterations", type=int, default=2000, help="per-fold training length")
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--out", required=True, help="report path prefix")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("interp", help="mean-feature interpolation from age t1 to t2")
    p.add_argument("dataset")
    p.add_argument("--t1", type=int, required=True)
    p.add_argument("--t2", type=int, required=True)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--min-cohort", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("csv", "bin"), default=None)
    return parser


def _dump_config(args: argparse.Namespace, out_path: str) -> None:
    resolved = {k: v for k, v in sorted(vars(args).items())}
    path = Path(str(out_path) + ".config.json")
    path.write_text(json.dumps(resolved, indent=2, default=str) + "\n")
    log.info("resolved config written to %s", path)


def _infer_format(path: str, explicit: str | None) -> str:
    if explicit:
        return explicit
    return "bin" if Path(path).suffix.lower() == ".bin" else "csv"


def _load_model_file(path: str) -> AgeProgressionModel:
    return load_model(Path(path).read_bytes())


def _cmd_synth(args) -> int:
    cfg = SyntheticConfig(
        dim=args.dim,
        n_subjects=args.subjects,
        ages_per_subject=(args.records_min, args.records_max),
        age_range=(args.age_min, args.age_max),
        drift_magnitude=args.gamma,
        noise_sigma=args.sigma,
        seed=args.seed,
    )
    ds, gt = generate(cfg)
    save_dataset(ds, args.out, _infer_format(args.out, args.format))
    log.info("wrote %d records for %d subjects to %s", len(ds), len(ds.subjects), args.out)
    if args.ground_truth:
        Path(args.ground_truth).write_bytes(serialize_ground_truth(gt))
    _dump_config(args, args.out)
    return 0


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        spec=ModelSpec(
            latent_dim=args.latent_dim,
            encoder_layers=args.encoder_layers,
            decoder_layers=args.decoder_layers,
            init=args.init,
        ),
        iterations=args.iterations,
        learning_rate=args.lr,
        beta1=args.beta1,
        beta2=args.beta2,
        epsilon=args.epsilon,
        lr_schedule=args.schedule,
        batch_size=args.batch_size,
        include_same_age=args.include_same_age,
        seed=args.seed,
    )


def _cmd_train(args) -> int:
    ds = load_dataset(args.dataset)
    result = train(ds, _train_config(args))
    Path(args.out).write_bytes(save_model(result.model))
    log.info("final loss %.3e after %d iterations", result.final_loss, args.iterations)
    if args.loss_log:
        lines = ["iteration,loss"]
        lines += [f"{i},{val!r}" for i, val in enumerate(result.loss_history)]
        Path(args.loss_log).write_text("\n".join(lines) + "\n")
    _dump_config(args, args.out)
    return 0


def _cmd_age(args) -> int:
    try:
        target = int(args.target_age)
    except ValueError:
        raise ConfigError(f"unparseable target age {args.target_age!r}")
    model = _load_model_file(args.model)
    ds = load_dataset(args.dataset)
    if ds.dim != model.dim:
        raise ValidationError(f"model dimension {model.dim} != dataset dimension {ds.dim}")
    records = []
    for sid in ds.subjects:
        # aging several records to one target age collides on (sid, age, seq);
        # re-number seq in (source age, seq) order
        for new_seq, rec in enumerate(ds.by_subject[sid]):
            aged = model.forward_unit(rec.vector, rec.age, target)
            records.append(make_record(sid, target, new_seq, aged))
    out = LongitudinalDataset(ds.dim, records)
    save_dataset(out, args.out, _infer_format(args.out, args.format))
    _dump_config(args, args.out)
    return 0


def _cmd_interp(args) -> int:
    ds = load_dataset(args.dataset)
    table = mean_features(ds, min_cohort=args.min_cohort)
    delta = attribute_vector(table, args.t1, args.t2)
    cohort = ds.by_age.get(args.t1, ())
    if not cohort:
        raise ValidationError(f"no records at source age {args.t1}")
    records = [
        make_record(rec.subject_id, args.t2, rec.seq, interpolate(rec.vector, delta, args.alpha))
        for rec in cohort
    ]
    out = LongitudinalDataset(ds.dim, records)
    save_dataset(out, args.out, _infer_format(args.out, args.format))
    _dump_config(args, args.out)
    return 0


def _parse_bins(spec: str):
    bins = []
    for part in spec.split(","):
        lo, sep, hi = part.partition(":")
        if not sep:
            raise ConfigError(f"bad bin {part!r}, expected lo:hi")
        try:
            bins.append((int(lo), int(hi)))
        except ValueError:
            raise ConfigError(f"bad bin {part!r}, expected integers")
    return bins


def _auto_bins(values, width: int = 5):
    if not values:
        raise ValidationError("no values to bin")
    lo, hi = min(values), max(values)
    return [(b, b + width) for b in range(lo, hi + 1, width)]


def _make_split(ds: LongitudinalDataset, args, distractors: LongitudinalDataset | None):
    split = build_youngest_oldest(ds, min_gap=args.min_gap)
    if distractors is not None:
        split = add_distractors(split, distractors)
    return split


def _fold_summary(reports: list[EvalReport]) -> str:
    def stats(values):
        arr = np.array(values)
        return f"{100 * arr.mean():.2f} ± {100 * arr.std():.2f}"

    lines = [
        f"== {len(reports)}-fold summary ==",
        f"verification TAR @ {reports[0].far_target:.4%} FAR: "
        + stats([r.tar_at_far for r in reports]),
        f"closed-set rank-1:   {stats([r.rank1_closed for r in reports])}",
    ]
    if all(r.rank1_open_at_far is not None for r in reports):
        lines.append(
            f"open-set rank-1 @ {reports[0].far_target:.4%} FAR: "
            + stats([r.rank1_open_at_far for r in reports])
        )
    return "\n".join(lines) + "\n"


def _cmd_eval(args) -> int:
    ds = load_dataset(args.dataset)
    distractors = load_dataset(args.distractors) if args.distractors else None
    model = _load_model_file(args.model) if args.model else None
    if args.pretrained and model is None:
        raise ConfigError("--pretrained requires --model")
    model_available = model is not None or args.folds is not None
    if args.direction is None:
        direction = DIRECTIONS["gallery"] if model_available else DIRECTIONS["none"]
    else:
        direction = DIRECTIONS[args.direction]
        if direction is not AgingDirection.NONE and not model_available:
            raise ConfigError(f"--direction {args.direction} needs --model or --folds")
    text_parts: list[str] = []
    kv_parts: list[str] = []
    if args.folds is None:
        report = evaluate(_make_split(ds, args, distractors), model, args.far, direction)
        text_parts.append(format_report_text(report))
        kv_parts.append(format_report_kv(report))
    else:
        if model is not None and not args.pretrained:
            raise ConfigError("--model with --folds needs --pretrained (folds retrain otherwise)")
        folds = split_folds(ds, args.folds, args.seed)
        reports = []
        for f, test_fold in enumerate(folds):
            if args.pretrained:
                fold_model = model
            elif direction is AgingDirection.NONE:
                fold_model = None  # baseline run, nothing to train
            else:
                train_ds = merge_datasets([fold for g, fold in enumerate(folds) if g != f])
                cfg = TrainConfig(iterations=args.iterations, learning_rate=args.lr,
                                  seed=args.seed + f)
                fold_model = train(train_ds, cfg).model
            report = evaluate(_make_split(test_fold, args, distractors), fold_model,
                              args.far, direction)
            reports.append(report)
            text_parts.append(format_report_text(report, label=f"fold {f}"))
            kv_parts.append(format_report_kv(report, prefix=f"fold{f}"))
        text_parts.append(_fold_summary(reports))
    if args.heatmap:
        split = build_youngest_oldest(ds, min_gap=args.min_gap)
        gallery_ages = [r.age for r in split.gallery]
        lapses = [p.age - g.age for g, p in zip(split.gallery, split.mated_probes)]
        age_bins = _parse_bins(args.age_bins) if args.age_bins else _auto_bins(gallery_ages)
        lapse_bins = _parse_bins(args.lapse_bins) if args.lapse_bins else _auto_bins(lapses)
        hm = heatmap(ds, model, age_bins, lapse_bins, direction=direction)
        Path(args.heatmap).write_text(format_heatmap_csv(hm))
    text = "\n".join(text_parts)
    sys.stdout.write(text)
    Path(str(args.out) + ".txt").write_text(text)
    Path(str(args.out) + ".kv").write_text("\n".join(kv_parts))
    _dump_config(args, args.out)
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "age": _cmd_age,
    "eval": _cmd_eval,
    "interp": _cmd_interp,
}


def main(argv=None) -> int:
    level = os.environ.get("FAGE_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataFormatError, ValidationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except FeatageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
