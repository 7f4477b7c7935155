"""Command-line entry points.

Subcommands: gen-data, mos, train, eval, predict, ablate, serve.
Exit codes: 0 ok, 1 internal error, 2 data error (bad/missing files,
malformed records, insufficient data).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .errors import DataError, UsageError
from .heads import METRICS
from .metrics import correlation_report
from .mos import compute_mos, coverage_check, load_ratings, write_mos_csv
from .synth import build_dataset, load_triplet, read_manifest, write_dataset
from .training import (
    TrainConfig,
    ablate_fusion,
    load_model,
    predict_scores,
    save_model,
    train,
)

__all__ = ["main"]


def _load_dataset(manifest_path: str):
    if not os.path.exists(manifest_path):
        raise DataError(f"manifest not found: {manifest_path}")
    rows = read_manifest(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    return [load_triplet(row, base) for row in rows]


def _parse_config_file(path: str) -> dict:
    """JSON object, or key=value lines (ints/floats/bools parsed)."""
    if not os.path.exists(path):
        raise DataError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            return json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise DataError(f"bad JSON config: {exc.msg}") from None
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"config line {lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        if value.lower() in ("true", "false"):
            out[key] = value.lower() == "true"
        else:
            try:
                out[key] = int(value)
            except ValueError:
                try:
                    out[key] = float(value)
                except ValueError:
                    out[key] = value
    return out


def _train_config(args) -> TrainConfig:
    values = {}
    if args.config:
        file_values = _parse_config_file(args.config)
        allowed = set(TrainConfig.__dataclass_fields__)
        unknown = set(file_values) - allowed
        if unknown:
            raise DataError(f"unknown config keys: {', '.join(sorted(unknown))}")
        values.update(file_values)
    for key, flag in (("epochs", "epochs"), ("batch_size", "batch_size"),
                      ("peak_lr", "lr"), ("lr_min", "lr_min"),
                      ("weight_decay", "weight_decay"), ("seed", "seed")):
        cli_value = getattr(args, flag, None)
        if cli_value is not None:
            values[key] = cli_value
    if getattr(args, "no_fusion", False):
        values["fusion_enabled"] = False
    return TrainConfig(**values)


def _cmd_gen_data(args) -> int:
    plans = build_dataset(args.n, args.seed, args.split_ratio)
    manifest = write_dataset(plans, args.out)
    n_train = sum(1 for p in plans if p.split == "train")
    print(f"wrote {len(plans)} triplets ({n_train} train / {len(plans) - n_train} test)")
    print(manifest)
    return 0


def _cmd_mos(args) -> int:
    if not os.path.exists(args.ratings):
        raise DataError(f"ratings log not found: {args.ratings}")
    records = load_ratings(args.ratings)
    if not records:
        raise DataError("ratings log is empty")
    coverage = coverage_check(records)
    expected = None
    if args.manifest:
        expected = [row.id for row in read_manifest(args.manifest)]
    mos_records, screening = compute_mos(records, expected)
    print(screening.summary())
    print(f"coverage: {coverage.actual_records}/{coverage.expected_records} records "
          f"({coverage.n_subjects} subjects x {coverage.n_triplets} triplets x 3)")
    if coverage.missing:
        shown = ", ".join("/".join(m) for m in coverage.missing[:5])
        print(f"  missing (first {min(5, len(coverage.missing))}): {shown}")
    write_mos_csv(args.out, mos_records)
    print(f"wrote {len(mos_records)} MOS rows to {args.out}")
    return 0


def _cmd_train(args) -> int:
    config = _train_config(args)
    triplets = _load_dataset(args.manifest)
    report, model = train(config, triplets)
    save_model(args.out, model)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
    final = report.final
    print(f"trained {config.epochs} epochs in {report.wall_seconds:.1f}s; "
          f"final loss {final.mean_loss:.4f}")
    for m in METRICS:
        print(f"  {m}: plcc={final.plcc[m]:.4f} srcc={final.srcc[m]:.4f}")
    print(f"checkpoint -> {args.out}")
    return 0


def _split_rows(triplets, split: str):
    if split == "all":
        return triplets
    return [t for t in triplets if t.split == split]


def _cmd_eval(args) -> int:
    if not os.path.exists(args.checkpoint):
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    model = load_model(args.checkpoint)
    triplets = _split_rows(_load_dataset(args.manifest), args.split)
    if not triplets:
        raise DataError(f"no triplets in split {args.split!r}")
    preds = {m: [] for m in METRICS}
    targets = {m: [] for m in METRICS}
    for t in triplets:
        if t.gt is None:
            raise DataError(f"triplet {t.id} has no ground-truth scores")
        scores = predict_scores(model, t)
        for m, s, g in zip(METRICS, scores, t.gt):
            preds[m].append(s)
            targets[m].append(g)
    report = correlation_report(preds, targets)
    print(f"{'metric':<8}{'PLCC':>10}{'SRCC':>10}{'n':>8}")
    for m in METRICS:
        row = report[m]
        print(f"{m:<8}{row['plcc']:>10.4f}{row['srcc']:>10.4f}{row['n']:>8}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2)
    return 0


def _cmd_predict(args) -> int:
    if not os.path.exists(args.checkpoint):
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    model = load_model(args.checkpoint)
    triplets = _split_rows(_load_dataset(args.manifest), args.split)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("id,vmc,vbd,oq\n")
        for t in triplets:
            vmc, vbd, oq = predict_scores(model, t)
            fh.write(f"{t.id},{vmc!r},{vbd!r},{oq!r}\n")
    print(f"wrote {len(triplets)} predictions to {args.out}")
    return 0


def _cmd_ablate(args) -> int:
    config = _train_config(args)
    triplets = _load_dataset(args.manifest)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    report = ablate_fusion(config, triplets, seeds)
    deltas = report.median_srcc_delta()
    epochs = report.median_epochs_to_converge()
    print("median SRCC delta (fusion - baseline):")
    for m in METRICS:
        print(f"  {m}: {deltas[m]:+.4f}")
    print(f"median epochs to 95% of final SRCC: fusion={epochs['with_fusion']:.1f} "
          f"baseline={epochs['without_fusion']:.1f}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2)
    return 0


def _cmd_serve(args) -> int:
    from .service import serve

    if not os.path.exists(args.manifest):
        raise DataError(f"manifest not found: {args.manifest}")
    serve(args.manifest, args.ratings, args.port, args.calib_size, args.ui_dir)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="angioqa",
                                     description="synthetic angiography IQA pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic triplet dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--split-ratio", type=float, default=0.8)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("mos", help="ratings log -> screening + MOS CSV")
    p.add_argument("--ratings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", default=None,
                   help="optional manifest to validate triplet coverage against")
    p.set_defaults(func=_cmd_mos)

    for name, fn in (("train", _cmd_train), ("ablate", _cmd_ablate)):
        p = sub.add_parser(name)
        p.add_argument("--manifest", required=True)
        p.add_argument("--config", default=None, help="JSON or key=value config file")
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--lr-min", dest="lr_min", type=float, default=None)
        p.add_argument("--weight-decay", dest="weight_decay", type=float, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--no-fusion", action="store_true",
                       help="train the pooled-concat baseline instead")
        if name == "train":
            p.add_argument("--out", required=True, help="checkpoint path")
            p.add_argument("--report", default=None, help="training report JSON path")
        else:
            p.add_argument("--seeds", default="0,1,2")
            p.add_argument("--out", default=None, help="ablation report JSON path")
        p.set_defaults(func=fn)

    p = sub.add_parser("eval", help="per-metric PLCC/SRCC of a checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--out", default=None, help="report JSON path")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("predict", help="per-triplet score CSV from a checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "test", "all"), default="all")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("serve", help="run the annotation HTTP service")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ratings", required=True)
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--calib-size", dest="calib_size", type=int, default=200)
    p.add_argument("--ui-dir", dest="ui_dir", default=None)
    p.set_defaults(func=_cmd_serve)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (DataError, UsageError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 1
    except Exception as exc:  # internal errors
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
