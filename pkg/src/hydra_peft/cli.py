"""``hydra-peft`` command line.

Exit codes: 0 success, 2 usage/config/checkpoint error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from hydra_peft import analysis, checkpoint
from hydra_peft.errors import CheckpointError, ContractError, DegenerateAdapterError, NumericalError, ShapeError
from hydra_peft.experiment import (
    ExperimentConfig,
    config_to_dict,
    datasets,
    evaluate_checkpoint,
    format_table,
    load_config,
    load_model,
    merge_model,
    merge_self_test,
    run_bench,
    run_finetune,
    run_pretrain,
    save_model,
)

log = logging.getLogger("hydra_peft")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seeds=(args.seed,), pretrain_seed=args.seed)
    return cfg


def _out(args, cfg: ExperimentConfig | None = None) -> Path:
    out = Path(args.out or (cfg.output_dir if cfg else "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dtype(args) -> str:
    return "f64" if args.f64 else "f32"


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    model, record = run_pretrain(cfg)
    ckpt = out / "base.ckpt"
    save_model(model, ckpt, {"stage": "pretrain", "config": config_to_dict(cfg)}, _dtype(args))
    report = {"stage": "pretrain", "source_accuracy": record.final_accuracy, "record": record.to_dict(),
              "checkpoint": str(ckpt), "crc32": checkpoint.crc_of(ckpt)}
    _write_json(out / "pretrain_report.json", report)
    print(f"source accuracy {record.final_accuracy:.4f}; wrote {ckpt}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    base, _ = load_model(args.base)
    cfg.variant(args.variant)
    seed = cfg.seeds[0]
    model, record = run_finetune(cfg, base, args.variant, seed)
    ckpt = out / f"{args.variant}_seed{seed}.ckpt"
    save_model(model, ckpt, {"stage": "finetune", "variant": args.variant, "seed": seed,
                             "config": config_to_dict(cfg)}, _dtype(args))
    report = {"stage": "finetune", "variant": args.variant, "seed": seed, "checkpoint": str(ckpt),
              "params": analysis.param_report(model), **record.to_dict()}
    _write_json(out / f"{args.variant}_seed{seed}_report.json", report)
    print(f"{args.variant} seed {seed}: accuracy {record.final_accuracy:.4f}, "
          f"adapter params {record.adapter_params}; wrote {ckpt}")
    return EXIT_OK


def cmd_merge(args) -> int:
    adapted, meta = load_model(args.adapted)
    merged = merge_model(adapted)
    out_ckpt = Path(args.out_ckpt)
    out_ckpt.parent.mkdir(parents=True, exist_ok=True)
    meta = {k: v for k, v in meta.items() if k not in ("model_config", "folded")}
    meta["stage"] = "merged"
    save_model(merged, out_ckpt, meta, _dtype(args))
    reloaded, _ = load_model(out_ckpt)
    reloaded.set_mode("inference")
    deviation = merge_self_test(adapted, reloaded, probes=args.probes, seed=args.seed or 0)
    report = {"stage": "merge", "source": str(args.adapted), "checkpoint": str(out_ckpt),
              "probes": args.probes, "max_abs_deviation": deviation, "dtype": _dtype(args)}
    _write_json(Path(args.report) if args.report else out_ckpt.with_suffix(".merge.json"), report)
    print(f"merged {args.adapted} -> {out_ckpt}; max |logit deviation| over {args.probes} probes = {deviation:.3e}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    model, _ = load_model(args.checkpoint)
    acc = evaluate_checkpoint(model, cfg, args.domain)
    print(json.dumps({"checkpoint": str(args.checkpoint), "domain": args.domain, "accuracy": acc}))
    return EXIT_OK


def _check_consistent(adapted, base) -> None:
    a = adapted.named_parameters()
    for name, (arr, role) in base.named_parameters().items():
        if role != "frozen":
            continue
        if name not in a or a[name][0].shape != arr.shape:
            raise ShapeError(f"base tensor {name!r} {arr.shape} has no matching tensor in the adapted checkpoint")


def cmd_analyze(args) -> int:
    adapted, meta = load_model(args.adapted)
    base, _ = load_model(args.base)
    _check_consistent(adapted, base)
    out = _out(args)
    written = []
    if args.mode == "similarity":
        for name in adapted.adapted_layer_names():
            block, layer = int(name.split(".")[1]), name.split(".")[2]
            for which in ("parallel", "sequential"):
                try:
                    grid = analysis.similarity_grid(adapted, block, which, args.frac, args.j_max, layer)
                except DegenerateAdapterError as exc:
                    log.warning("skipping %s/%s: %s", name, which, exc)
                    continue
                except ContractError as exc:
                    if (which == "parallel" and not adapted.linears[name].spec.parallel_rank) or (
                        which == "sequential" and not adapted.linears[name].spec.sequential_rank):
                        continue
                    raise
                path = out / f"similarity_{name}_{which}.csv"
                analysis.write_grid_csv(grid, path)
                written.append(str(path))
    elif args.mode == "features":
        cfg = _config(args)
        _, test = datasets(cfg, "target")
        tokens = test.tokens[: args.probes]
        adapted.set_mode("inference")
        path = out / "branch_features.csv"
        analysis.export_branch_features(adapted, tokens, path)
        written.append(str(path))
    else:
        report = analysis.param_report(adapted)
        if args.accuracy is not None:
            p = report["adapter_params"] + report["head_params"]
            report["pe_score"] = analysis.pe_score(analysis.PeInput(args.accuracy, p))
            print(f"PE {report['pe_score']:.3f}")
        path = out / "params.json"
        _write_json(path, report)
        written.append(str(path))
        print(json.dumps(report, sort_keys=True))
    for w in written:
        print(f"wrote {w}")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    base = None
    if args.base:
        base, _ = load_model(args.base)
    summary = run_bench(cfg, base)
    table = format_table(summary)
    (out / "bench.md").write_text(table)
    _write_json(out / "bench.json", summary)
    print(table, end="")
    if summary["all_failed"]:
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_score(args) -> int:
    pe = analysis.pe_score(analysis.PeInput(args.accuracy, args.params, args.m0))
    print(f"PE {pe:.3f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config (defaults used when omitted)")
    common.add_argument("--seed", type=int, help="override the config's seed(s)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--f64", action="store_true", help="write 64-bit checkpoint payloads")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hydra-peft", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", parents=[common], help="train the base model on the source task")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", parents=[common], help="fine-tune one adapter variant on the target task")
    p.add_argument("--base", required=True, help="base checkpoint from `pretrain`")
    p.add_argument("--variant", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("merge", parents=[common], help="fold adapters into the frozen weights")
    p.add_argument("adapted")
    p.add_argument("out_ckpt")
    p.add_argument("--probes", type=int, default=64)
    p.add_argument("--report", help="where to write the merge report (default: next to the output)")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("eval", parents=[common], help="accuracy of a checkpoint on a task split")
    p.add_argument("checkpoint")
    p.add_argument("--domain", choices=("source", "target"), default="target")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", parents=[common], help="similarity grids, branch features or param counts")
    p.add_argument("adapted")
    p.add_argument("base")
    p.add_argument("--mode", choices=("similarity", "features", "params"), required=True)
    p.add_argument("--accuracy", type=float, help="accuracy fraction for the PE score (params mode)")
    p.add_argument("--probes", type=int, default=128, help="batch size for features mode")
    p.add_argument("--frac", type=float, default=0.10, help="fraction of W0 directions (similarity mode)")
    p.add_argument("--j-max", type=int, default=2, help="adapter directions (similarity mode)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("bench", parents=[common], help="run the full variant x seed grid")
    p.add_argument("--base", help="reuse this base checkpoint instead of pretraining")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("score", parents=[common], help="PE score for an (accuracy, params) pair")
    p.add_argument("--accuracy", type=float, required=True)
    p.add_argument("--params", type=float, required=True, help="trainable parameter count")
    p.add_argument("--m0", type=float, default=analysis.PE_M0)
    p.set_defaults(func=cmd_score)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ContractError, CheckpointError, ShapeError, UsageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
