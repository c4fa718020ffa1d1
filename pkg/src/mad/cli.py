"""Command line entry point: ``mad <command> ...``.

Exit codes: 0 success, 2 contract/parameter errors, 3 numeric failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ContractError, NumericError

log = logging.getLogger("mad")


def _read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def _cmd_synth(args) -> dict:
    from .data import SynthConfig, synth_generate

    cfg = SynthConfig.from_dict(_read_json(args.config)) if args.config else SynthConfig()
    records = synth_generate(cfg, args.out)
    return {"out": str(args.out), "segments": len(records)}


def _cmd_train(args) -> dict:
    from .harness import RunConfig, train

    cfg = RunConfig.from_dict(_read_json(args.config)) if args.config else RunConfig()
    _, report = train(cfg, args.data, out_dir=args.out)
    return json.loads(report.to_json())


def _cmd_eval(args) -> dict:
    from .harness import Checkpoint, EvalConfig, evaluate

    ckpt = Checkpoint.load(args.ckpt)
    data = args.data or ckpt.config.get("data_dir")
    if data is None:
        raise ContractError("pass --data (the checkpoint does not record its dataset)")
    mode = EvalConfig(teacher_forcing=args.tf, input=args.noise or "meg",
                      noise_ratio=args.ratio, split=args.split)
    return evaluate(ckpt, data, mode).to_dict()


def _cmd_ablate(args) -> dict:
    from .harness import RunConfig, ablate, standard_grid

    spec = _read_json(args.grid) if args.grid else {}
    if isinstance(spec, list):
        spec = {"rows": spec}
    data = args.data or spec.get("data")
    if data is None:
        raise ContractError("the grid needs a dataset: pass --data or set \"data\"")
    if "rows" in spec:
        grid = [RunConfig.from_dict(r) for r in spec["rows"]]
    else:
        grid = standard_grid(RunConfig.from_dict(spec.get("base", {})))
    out = args.out or spec.get("out", "ablation_out")
    rows = ablate(grid, data, out_dir=out)
    return {"out": str(out), "rows": rows}


def _cmd_gradcheck(args) -> dict:
    from .gradcheck_suite import run_suite

    results = run_suite(args.module, seeds=args.seeds)
    failed = [r for r in results if not r["passed"]]
    out = {"checked": len(results), "failed": failed,
           "max_rel_err": max((r["rel_err"] for r in results), default=0.0)}
    if failed:
        raise NumericError(f"{len(failed)} gradient checks failed: {json.dumps(failed)[:500]}")
    return out


def _cmd_eval_metrics(args) -> dict:
    from .metrics import metric_report

    cands = Path(args.cand).read_text().splitlines()
    refs = Path(args.ref).read_text().splitlines()
    return metric_report(cands, refs).to_dict()


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mad", description="MEG-to-text alignment toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_synth)

    s = sub.add_parser("train", help="train the MEG stream")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data")
    s.add_argument("--split", default="test", choices=["train", "validation", "test"])
    s.add_argument("--tf", action="store_true", help="teacher-forced decoding")
    s.add_argument("--noise", choices=["gaussian", "shuffle_channel", "shuffle_time",
                                       "channelwise_gaussian", "timewise_gaussian"])
    s.add_argument("--ratio", type=float, default=1.0)
    s.set_defaults(func=_cmd_eval)

    s = sub.add_parser("ablate", help="run an ablation grid")
    s.add_argument("--grid")
    s.add_argument("--data")
    s.add_argument("--out")
    s.set_defaults(func=_cmd_ablate)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    s.add_argument("--module", default="all", choices=["all", "tensors", "align", "brain", "seq2seq"])
    s.add_argument("--seeds", type=int, default=20)
    s.set_defaults(func=_cmd_gradcheck)

    s = sub.add_parser("eval-metrics", help="score candidate lines against reference lines")
    s.add_argument("--cand", required=True)
    s.add_argument("--ref", required=True)
    s.set_defaults(func=_cmd_eval_metrics)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except (ContractError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    json.dump(result, sys.stdout, indent=2, default=str)
    sys.stdout.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
