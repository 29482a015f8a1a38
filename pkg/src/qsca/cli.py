"""Command-line entry point.

Subcommands:
  gen-model     generate a random victim model file
  simulate      simulate a trace archive for a model
  attack        recover a model from a trace archive
  scenario      one-shot reproduction of a built-in experiment
  report-merge  concatenate repeat reports into one document

Every run is reproducible: all randomness flows from --seed (or the config
file's master_seed), and reruns produce byte-identical outputs except for
the duration_seconds field of reports. There are no environment variables;
flags override config-file values.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import cpa, harness, leakage, qnn
from .rng import derive_rng

_CREATED: list[Path] = []


def _track(path) -> Path:
    path = Path(path)
    _CREATED.append(path)
    return path


def _cleanup_partial() -> None:
    for path in reversed(_CREATED):
        try:
            if path.is_dir():
                for child in sorted(path.rglob("*"), reverse=True):
                    if child.is_file():
                        child.unlink()
                    else:
                        child.rmdir()
                path.rmdir()
            elif path.exists():
                path.unlink()
        except OSError:
            pass


def parse_layer_chain(text: str, input_shape: tuple[int, ...]) -> list[qnn.LayerSpec]:
    """Parse a layer chain such as
    ``conv2d:8x1x3x3:shift=8,relu,avgpool:2x2,flatten,dense:288x16:shift=9,dense:16x10``.

    Dense layers read ``in x out``; conv2d reads ``out_c x in_c x kh x kw``
    with optional ``stride=``, ``pad=``, ``shift=`` options.
    """
    specs: list[qnn.LayerSpec] = []
    for part in text.split(","):
        fields = part.strip().split(":")
        kind = fields[0]
        opts = {}
        dims: tuple[int, ...] | None = None
        for extra in fields[1:]:
            if "=" in extra:
                key, value = extra.split("=", 1)
                opts[key] = value
            else:
                dims = tuple(int(d) for d in extra.split("x"))
        if kind == "dense":
            if dims is None or len(dims) != 2:
                raise ValueError(f"dense needs INxOUT dimensions, got {part!r}")
            in_n, out_n = dims
            specs.append(qnn.LayerSpec("dense", (out_n, in_n), requant_shift=int(opts.pop("shift", 0))))
        elif kind == "conv2d":
            if dims is None or len(dims) != 4:
                raise ValueError(f"conv2d needs OUTxINxKHxKW dimensions, got {part!r}")
            stride = _parse_pair(opts.pop("stride", "1"))
            padding = _parse_pair(opts.pop("pad", "0"))
            specs.append(
                qnn.LayerSpec("conv2d", dims, stride, padding, int(opts.pop("shift", 0)))
            )
        elif kind in ("avgpool", "avgpool2d"):
            pool = dims if dims else _parse_pair(opts.pop("window", "2"))
            if len(pool) == 1:
                pool = (pool[0], pool[0])
            specs.append(qnn.LayerSpec("avgpool2d", pool))
        elif kind == "relu":
            specs.append(qnn.LayerSpec("relu"))
        elif kind == "flatten":
            specs.append(qnn.LayerSpec("flatten"))
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
        if opts:
            raise ValueError(f"unknown options {sorted(opts)} in {part!r}")
    return specs


def _parse_pair(text: str) -> tuple[int, int]:
    parts = [int(p) for p in text.split("x")]
    return (parts[0], parts[0]) if len(parts) == 1 else (parts[0], parts[1])


def _load_config(args) -> harness.ScenarioConfig:
    doc = {}
    if args.config:
        doc = json.loads(Path(args.config).read_text())
    if args.scenario is not None:
        locks = doc.pop("scenario_id", None)
        if locks is not None and locks != args.scenario:
            raise ValueError("--scenario conflicts with the config file's scenario_id")
        doc["scenario_id"] = args.scenario
        for key, value in harness._SCENARIO_LOCKS[args.scenario].items():
            doc[key] = value
    if args.seed is not None:
        doc["master_seed"] = args.seed
    if args.threads is not None:
        doc["threads"] = args.threads
    if getattr(args, "traces", None) is not None:
        doc["traces_per_attack"] = args.traces
    if getattr(args, "attacks", None) is not None:
        doc["attack_count"] = args.attacks
    return harness.config_from_dict(doc)


def cmd_gen_model(args) -> int:
    input_shape = tuple(int(d) for d in args.input_shape.split("x"))
    specs = parse_layer_chain(args.layers, input_shape)
    bias_range = (args.bias_min, args.bias_max)
    model = qnn.random_model(
        input_shape,
        specs,
        derive_rng(args.seed or 0, "gen-model"),
        bias_range=bias_range,
        metadata={"seed": args.seed or 0, "layers": args.layers},
    )
    qnn.save_model(model, _track(args.out))
    print(f"wrote {args.out}: {model.parameter_count()} parameters")
    return 0


def cmd_simulate(args) -> int:
    model = qnn.load_model(args.model)
    cfg = _load_config(args)
    seed_path = ("simulate",)
    coeffs16 = leakage.sample_coefficients(
        leakage.PRODUCT_WIDTH, cfg.coeff_mean, cfg.coeff_variance,
        derive_rng(cfg.master_seed, *seed_path, "coefficients", 16),
    )
    coeffs32 = leakage.sample_coefficients(
        leakage.SUM_WIDTH, cfg.coeff_mean, cfg.coeff_variance,
        derive_rng(cfg.master_seed, *seed_path, "coefficients", 32),
    )
    inputs = derive_rng(cfg.master_seed, *seed_path, "inputs").integers(
        -128, 128, size=(cfg.traces_per_attack, *model.input_shape), dtype=np.int64
    )
    spec = leakage.NetworkLeakageSpec(
        leakage.stochastic_model(coeffs16, cfg.noise_variance),
        leakage.stochastic_model(coeffs32, cfg.noise_variance),
    )
    trace_seed = derive_rng(cfg.master_seed, *seed_path, "trace-seed").integers(0, 1 << 62)
    archive = leakage.simulate_network_traces(model, inputs, spec, int(trace_seed))
    archive.materialize(_track(args.out))
    print(f"wrote archive {args.out}: {len(archive.targets())} targets, M={len(inputs)}")
    return 0


def _attack_config_from(args, cfg, archive) -> cpa.AttackConfig:
    w_space = cfg.weight_space()
    b_space = cpa.HypothesisSpace(
        np.arange(args.bias_min, args.bias_max + 1), leakage.SUM_WIDTH
    )
    if args.attack_model == "hw":
        return cpa.hamming_weight_attack(w_space, b_space)
    return cpa.profiled_attack(
        archive.product_model.coefficients, archive.sum_model.coefficients, w_space, b_space
    )


def cmd_attack(args) -> int:
    archive = leakage.DirectoryTraceArchive(args.archive)
    shape_model = qnn.load_model(args.model)
    architecture = qnn.architecture_of(shape_model)
    cfg = _load_config(args)
    attack = _attack_config_from(args, cfg, archive)
    start = time.perf_counter()
    recovery = cpa.recover_network(architecture, archive, attack)
    duration = time.perf_counter() - start
    out_model = _track(Path(args.out).with_suffix(".model.json"))
    qnn.save_model(recovery.model, out_model)
    per_layer = {}
    for rec in recovery.layer_recoveries:
        true_layer = shape_model.layers[rec.layer_index]
        per_layer[str(rec.layer_index)] = {
            "weights": float(np.mean(rec.weights == true_layer.weights)),
            "biases": float(np.mean(rec.biases == true_layer.biases)),
        }
    report = {
        "format_version": harness.REPORT_FORMAT_VERSION,
        "target": "network-attack",
        "config": cfg.to_dict(),
        "attack_model": args.attack_model,
        "recovered_model": out_model.name,
        "per_layer_match": per_layer,
        "duration_seconds": duration,
    }
    harness.save_report(report, _track(args.out))
    print(f"wrote {args.out} and {out_model}")
    return 0


def cmd_scenario(args) -> int:
    cfg = _load_config(args)
    if args.target == "weight":
        report = harness.run_weight_recovery_experiment(cfg).to_dict()
    elif args.target == "bias":
        report = harness.run_bias_recovery_experiment(cfg).to_dict()
    else:
        victim = harness.desk_cnn()
        eval_inputs = harness.desk_eval_inputs(args.eval_inputs)
        reports = []
        for repeat in range(args.repeats):
            rep = harness.run_network_recovery(
                cfg, victim, eval_inputs, repeat_index=repeat
            )
            reports.append(rep.to_dict())
        report = {
            "format_version": harness.REPORT_FORMAT_VERSION,
            "target": "network",
            "config": cfg.to_dict(),
            "reports": reports,
            "duration_seconds": sum(r["duration_seconds"] for r in reports),
        }
    harness.save_report(report, _track(args.out))
    if "accuracy" in report:
        print(f"{args.target}: accuracy={report['accuracy']:.4f} "
              f"average_error={report['average_error']:.4f}")
    else:
        for rep in report.get("reports", [report]):
            print(f"repeat {rep.get('repeat_index', 0)}: top1={rep['top1']:.2f} top5={rep['top5']:.2f}")
    print(f"wrote {args.out}")
    return 0


def cmd_report_merge(args) -> int:
    reports = [json.loads(Path(p).read_text()) for p in args.reports]
    merged = {
        "format_version": harness.REPORT_FORMAT_VERSION,
        "target": "merged",
        "reports": reports,
        "duration_seconds": sum(float(r.get("duration_seconds", 0.0)) for r in reports),
    }
    accs = [r["accuracy"] for r in reports if "accuracy" in r]
    if accs:
        merged["mean_accuracy"] = float(np.mean(accs))
    tops = [(r["top1"], r["top5"]) for r in reports if "top1" in r]
    if tops:
        merged["mean_top1"] = float(np.mean([t[0] for t in tops]))
        merged["mean_top5"] = float(np.mean([t[1] for t in tops]))
    harness.save_report(merged, _track(args.out))
    print(f"wrote {args.out} ({len(reports)} reports)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qsca",
        description="Side-channel analysis laboratory for quantized neural networks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, traces=False):
        p.add_argument("--config", help="JSON config file (unknown keys rejected)")
        p.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
        p.add_argument("--threads", type=int, default=None, help="worker threads, 0 = auto")
        p.add_argument("--out", required=True, help="output path")
        if traces:
            p.add_argument("--traces", type=int, default=None, help="traces per attack M")
            p.add_argument("--attacks", type=int, default=None, help="number of attacks")

    p = sub.add_parser("gen-model", help="generate a random victim model file")
    p.add_argument("--layers", required=True, help="layer chain, e.g. dense:4x3")
    p.add_argument("--input-shape", required=True, help="e.g. 4 or 1x14x14")
    p.add_argument("--bias-min", type=int, default=qnn.DEFAULT_BIAS_RANGE[0])
    p.add_argument("--bias-max", type=int, default=qnn.DEFAULT_BIAS_RANGE[1])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_model)

    p = sub.add_parser("simulate", help="simulate a trace archive for a model file")
    p.add_argument("--model", required=True)
    p.add_argument("--scenario", type=int, choices=(1, 2, 3), default=None)
    common(p, traces=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("attack", help="recover a model from a trace archive")
    p.add_argument("--archive", required=True)
    p.add_argument("--model", required=True, help="victim model file (architecture source)")
    p.add_argument("--attack-model", choices=("hw", "profiled"), default="hw")
    p.add_argument("--bias-min", type=int, default=qnn.DEFAULT_BIAS_RANGE[0])
    p.add_argument("--bias-max", type=int, default=qnn.DEFAULT_BIAS_RANGE[1])
    p.add_argument("--scenario", type=int, choices=(1, 2, 3), default=None)
    common(p, traces=True)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("scenario", help="one-shot reproduction of a built-in experiment")
    p.add_argument("scenario", type=int, choices=(1, 2, 3))
    p.add_argument("target", choices=("weight", "bias", "network"))
    p.add_argument("--repeats", type=int, default=1, help="network repeats")
    p.add_argument("--eval-inputs", type=int, default=2000)
    common(p, traces=True)
    p.set_defaults(func=cmd_scenario)

    p = sub.add_parser("report-merge", help="concatenate repeat reports")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report_merge)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _CREATED.clear()
    try:
        return args.func(args)
    except BrokenPipeError:
        return 1
    except Exception as exc:  # argparse handles usage errors before this
        _cleanup_partial()
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
