"""Command-line entry point: gen-data, train, infer, eval, gradcheck.

Every command is an independent process that reads and writes plain files.
Failures exit nonzero after printing one line to stderr of the form

    segtad-error kind=<ExceptionName> msg="<json-escaped message>"
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import tensor as F
from .config import load_config
from .data import SyntheticSpec, gen_synthetic_dataset, load_dataset, rescale_features, write_dataset
from .evaluation import evaluate
from .gradcheck import TOLERANCE, run_suite, tiny_config
from .labels import load_class_manifest
from .pipeline import infer, load_class_scores, load_model, predictions_json, train
from .tensor import Tensor

log = logging.getLogger("segtad")


class CliError(RuntimeError):
    pass


def _parse_spec_value(field: dataclasses.Field, raw: str):
    if field.type in ("bool", bool):
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise CliError(f"{field.name} expects true/false, got {raw!r}")
    if field.type in ("float", float):
        return float(raw)
    return int(raw)


def cmd_gen_data(args) -> int:
    spec = SyntheticSpec()
    fields = {f.name: f for f in dataclasses.fields(SyntheticSpec)}
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep or key not in fields:
            raise CliError(f"unknown dataset option {item!r}; known: {sorted(fields)}")
        setattr(spec, key, _parse_spec_value(fields[key], raw))
    if args.seed is not None:
        spec.seed = args.seed
    items, class_ids = gen_synthetic_dataset(spec)
    write_dataset(args.out, items, class_ids)
    (Path(args.out) / "spec.json").write_text(json.dumps(dataclasses.asdict(spec), indent=1))
    print(f"wrote {len(items)} videos to {args.out}")
    return 0


def _run_config(args, run_dir: Path | None = None):
    path = args.config
    if path is None and run_dir is not None and (run_dir / "config.json").exists():
        path = run_dir / "config.json"
    return load_config(path, args.set)


def _load_data(root: str, cfg, subset: str | None):
    items, class_ids = load_dataset(root, subset=subset)
    if not items:
        raise CliError(f"no videos found in {root}" + (f" for subset {subset!r}" if subset else ""))
    C = items[0].features.shape[0]
    if C != cfg.ssn.C_in:
        raise CliError(f"features have {C} channels but ssn.C_in={cfg.ssn.C_in}")
    if len(class_ids) != cfg.ssn.D:
        raise CliError(f"dataset has {len(class_ids)} classes but ssn.D={cfg.ssn.D}")
    return items, class_ids


def cmd_train(args) -> int:
    cfg = _run_config(args)
    items, class_ids = _load_data(args.data, cfg, args.subset)
    t0 = time.perf_counter()
    result = train(items, cfg, args.run, class_ids)
    last = result.log[-1] if result.log else None
    print(f"trained {cfg.train.epochs} epochs in {time.perf_counter() - t0:.1f}s", end="")
    print(f"; final loss {last['total']:.5f}" if last else "")
    return 0


def _dump_scores(model, items, path: Path) -> None:
    """Per-frame segmentation posteriors and boundary probabilities per video."""
    arrays = {}
    T = model.cfg.ssn.T
    with F.no_grad():
        for it in items:
            out = model.ssn(Tensor(rescale_features(it.features, T)))
            arrays[f"{it.video_id}/posterior"] = out.P.data
            arrays[f"{it.video_id}/start"] = out.p_start.data
            arrays[f"{it.video_id}/end"] = out.p_end.data
    np.savez_compressed(path, **arrays)


def cmd_infer(args) -> int:
    run = Path(args.run)
    cfg = _run_config(args, run)
    items, class_ids = _load_data(args.data, cfg, args.subset)
    manifest = run / "classes.json"
    if manifest.exists() and load_class_manifest(manifest) != class_ids:
        raise CliError(f"class manifest of {run} differs from {args.data}")
    checkpoint = Path(args.checkpoint) if args.checkpoint else run / "checkpoints" / "last.stad"
    model = load_model(checkpoint, cfg)
    scores = load_class_scores(args.class_scores, class_ids) if args.class_scores else None
    results = infer(model, items, scores)
    out = Path(args.out) if args.out else run / "predictions.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(predictions_json(results, class_ids), indent=1))
    if args.dump_scores:
        _dump_scores(model, items, Path(args.dump_scores))
    print(f"wrote {sum(len(r.detections) for r in results)} detections for {len(results)} videos to {out}")
    return 0


def cmd_eval(args) -> int:
    data = Path(args.data) if args.data else None
    annotations = Path(args.annotations) if args.annotations else data / "annotations.json"
    manifest = Path(args.classes) if args.classes else (data / "classes.json" if data else None)
    class_ids = load_class_manifest(manifest) if manifest and manifest.exists() else None
    report = evaluate(args.predictions, annotations, class_ids, subset=args.subset, matching=args.matching)
    out = Path(args.out) if args.out else Path(args.predictions).with_name("report.json")
    out.write_text(report.to_json())
    print(report.to_table())
    return 0


def cmd_gradcheck(args) -> int:
    if args.config:
        cfg = load_config(args.config, args.set)
    else:
        cfg = tiny_config()
        for item in args.set or []:
            key, _, value = item.partition("=")
            cfg.set(key, value)
        cfg.validate()
    t0 = time.perf_counter()
    results = run_suite(args.trials, args.seed, include_model=not args.ops_only, cfg=cfg)
    failed = [r for r in results if not r.passed]
    by_op: dict[str, float] = {}
    for r in results:
        op = r.name.split("[")[0]
        by_op[op] = max(by_op.get(op, 0.0), r.max_rel_error)
    for op, err in by_op.items():
        print(f"{'ok  ' if err < TOLERANCE else 'FAIL'} {op:24s} max rel err {err:.2e}")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {time.perf_counter() - t0:.1f}s")
    if failed:
        worst = max(failed, key=lambda r: r.max_rel_error)
        raise CliError(f"{len(failed)} gradient checks above {TOLERANCE:g}; worst {worst.name} {worst.max_rel_error:.3e}")
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.exit(2, f"segtad-error kind=UsageError msg={json.dumps(message)}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="segtad", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def config_flags(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config entry")

    p = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="FIELD=VALUE", help="synthetic spec field, e.g. n_videos=20")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train from scratch")
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True, help="run directory for checkpoints and loss log")
    p.add_argument("--subset")
    config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="write predictions JSON")
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--checkpoint", help="defaults to RUN/checkpoints/last.stad")
    p.add_argument("--out", help="defaults to RUN/predictions.json")
    p.add_argument("--subset")
    p.add_argument("--class-scores", help="JSON of per-video class scores")
    p.add_argument("--dump-scores", help="write per-frame posteriors and boundary probabilities (.npz)")
    config_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="mAP report for a predictions file")
    p.add_argument("--predictions", required=True)
    p.add_argument("--data", help="dataset directory holding annotations.json and classes.json")
    p.add_argument("--annotations")
    p.add_argument("--classes")
    p.add_argument("--subset")
    p.add_argument("--matching", choices=["optimal", "greedy"], default="optimal")
    p.add_argument("--out", help="defaults to report.json next to the predictions")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ops-only", action="store_true")
    config_flags(p)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "eval" and not (args.data or args.annotations):
        parser.error("eval needs --data or --annotations")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single reporting point for the process
        log.debug("command failed", exc_info=True)
        print(f"segtad-error kind={type(exc).__name__} msg={json.dumps(str(exc))}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
