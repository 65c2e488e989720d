"""Command line entry point: ``survfuse {synth,train,eval,km,gradcheck}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

from .encoders import SynthConfig
from .harness import (
    Checkpoint,
    RunConfig,
    emit_km_plot,
    eval_report,
    evaluate_checkpoint,
    evaluation_from_predictions,
    format_p,
    read_dataset,
    run_cv,
    synth_to_disk,
)


def _load_json(path) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _run_config(args) -> RunConfig:
    d = _load_json(args.config)
    d.pop("synth", None)
    if args.seed is not None:
        d["seed"] = args.seed
    if getattr(args, "folds", None) is not None:
        d["folds"] = args.folds
    if getattr(args, "pool_ratio", None) is not None:
        d["pool_ratio"] = args.pool_ratio
    if getattr(args, "data", None) is not None:
        d["data_dir"] = str(args.data)
    if args.out is not None:
        d["out_dir"] = str(args.out)
    return RunConfig.from_dict(d)


def cmd_synth(args) -> int:
    raw = _load_json(args.config)
    raw = raw.get("synth", raw)
    known = {f.name for f in fields(SynthConfig)}
    cfg = SynthConfig(**{k: v for k, v in raw.items() if k in known})
    if args.seed is not None:
        cfg.seed = args.seed
    out = Path(args.out or "cohort")
    synth_to_disk(cfg, out)
    (out / "synth_config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")
    print(f"wrote {cfg.patients} patients to {out}")
    return 0


def cmd_train(args) -> int:
    config = _run_config(args)
    if config.data_dir is None:
        print("train: --data DIR (or data_dir in the config) is required", file=sys.stderr)
        return 2
    cohort, excluded = read_dataset(config.data_dir)
    out = Path(config.out_dir or "run")
    report = run_cv(config, cohort, out_dir=out, excluded=excluded)
    for f in report.folds:
        p = "n/a" if f.logrank_p is None else format_p(f.logrank_p)
        print(f"fold {f.fold_id}: c_index={f.c_index:.3f} pairs={f.pair_count} logrank_p={p} epochs={f.epochs_trained}")
    pooled = "n/a" if report.pooled_logrank_p is None else format_p(report.pooled_logrank_p)
    print(f"c_index {report.c_index_summary}  pooled logrank p={pooled}")
    print(f"report: {out / 'report.json'}")
    return 0


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    cohort, excluded = read_dataset(args.data)
    ev, preds = evaluate_checkpoint(ckpt, cohort)
    report = eval_report(ev, preds)
    report["excluded"] = excluded
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "eval.json").write_text(text)
    print(f"c_index={ev.c_index:.3f} pairs={ev.pair_count}")
    return 0


def cmd_km(args) -> int:
    with open(args.report) as fh:
        report = json.load(fh)
    if "folds" in report:
        preds = [p for f in report["folds"] for p in f["predictions"]]
    else:
        preds = report["predictions"]
    ev = evaluation_from_predictions(preds)
    tsv, svg = emit_km_plot(ev, args.out or ".")
    print(f"curves: {tsv}")
    if svg is not None:
        print(f"figure: {svg}  (log-rank p = {format_p(ev.logrank.p_value)})")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import default_cases, run_suite

    cases = default_cases(args.cases, seed=args.seed or 0)
    ok = True
    for r in run_suite(cases):
        c = r.case
        passed = r.pass_fraction >= 0.99
        ok &= passed
        print(
            f"{'PASS' if passed else 'FAIL'} C={c.C} d_model={c.d_model} T={c.depth} heads={c.heads} "
            f"checked={r.n_checked} pass={r.pass_fraction:.4f} max_rel={r.max_rel_error:.2e} ({r.seconds:.1f}s)"
        )
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="survfuse", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path)

    p = sub.add_parser("synth", help="write a synthetic cohort")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="cross-validated training and evaluation")
    common(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--folds", type=int)
    p.add_argument("--pool-ratio", type=float, dest="pool_ratio")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a dataset with a checkpoint")
    common(p)
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--data", type=Path, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("km", help="Kaplan-Meier curves and figure from a report")
    common(p)
    p.add_argument("report", type=Path)
    p.set_defaults(func=cmd_km)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    common(p)
    p.add_argument("--cases", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
