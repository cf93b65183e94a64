"""Command-line interface: poison, sanitize, metrics, evaluate, experiment."""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

from .bundle import (
    EdgeSet,
    load_bundle,
    load_poison_record,
    save_bundle,
    save_poison_record,
)
from .errors import FormatError
from .gnn import TrainConfig
from .metrics import cr, esr, evaluate_defense, f1
from .poison import AttackConfig, mettack_like, random_attack
from .sanitize import SanitizerConfig, run_sanitizer, save_result, save_trace_csv
from .experiment import run_experiment

METHODS = ("cld", "lp", "gasoline-d", "jaccard", "lp-only")
_DETECTOR = {"cld": "classdiv", "lp": "linkpred", "gasoline-d": "none",
             "jaccard": "jaccard", "lp-only": "linkpred_only"}


def _write_meta(out_dir: Path, payload: dict) -> None:
    (out_dir / "run_meta.json").write_text(
        json.dumps(payload, sort_keys=True, separators=(",", ": "), indent=2) + "\n")


def _train_config(args) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, learning_rate=args.lr, seed=args.seed)


def _add_train_flags(p):
    p.add_argument("--epochs", type=int, default=100, help="inner training epochs")
    p.add_argument("--lr", type=float, default=0.01, help="inner learning rate")
    p.add_argument("--seed", type=int, default=0)


def cmd_poison(args) -> int:
    bundle = load_bundle(args.bundle)
    cfg = AttackConfig(power=args.power, seed=args.seed)
    if args.method == "random":
        poisoned, record = random_attack(bundle, cfg)
    else:
        poisoned, record = mettack_like(bundle, cfg, train_cfg=_train_config(args))
    out = Path(args.out)
    save_bundle(poisoned, out)
    save_poison_record(record, out / "poison.json")
    _write_meta(out, {"command": "poison", "bundle": str(args.bundle),
                      "method": args.method, "power": args.power,
                      "seed": args.seed, "epochs": args.epochs, "lr": args.lr,
                      "flips": len(record)})
    print(f"poisoned graph written to {out} "
          f"({len(record.inserted)} insertions, {len(record.deleted)} deletions)")
    return 0


def cmd_sanitize(args) -> int:
    bundle = load_bundle(args.bundle)
    budget = max(1, math.ceil(args.budget_ratio * bundle.num_edges()))
    cfg = SanitizerConfig(
        detector=_DETECTOR[args.method], budget=budget,
        temperature=args.temperature, beta=args.beta, tau=args.tau, eta=args.eta,
        train=_train_config(args), meta_mode=args.meta_mode, seed=args.seed,
    )
    result = run_sanitizer(bundle, cfg)
    out = Path(args.out)
    meta = {"command": "sanitize", "bundle": str(args.bundle), "method": args.method,
            "budget_ratio": args.budget_ratio, "budget": budget, "seed": args.seed,
            "temperature": args.temperature, "beta": args.beta, "tau": args.tau,
            "eta": args.eta, "meta_mode": args.meta_mode,
            "epochs": args.epochs, "lr": args.lr, "deletions": len(result.deleted)}
    save_result(result, out, extra_meta=meta)
    save_trace_csv(result, out / "trace.csv")
    _write_meta(out, meta)
    print(f"sanitized graph written to {out} ({len(result.deleted)} deletions)")
    return 0


def _load_result_deletions(path: Path) -> EdgeSet:
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}:{e.lineno}: invalid JSON: {e.msg}") from e
    if "deleted" not in raw:
        raise FormatError(f"{path}:1: missing key 'deleted'")
    return EdgeSet.from_pairs(raw["deleted"])


def cmd_metrics(args) -> int:
    record = load_poison_record(args.poison)
    s_san = _load_result_deletions(Path(args.result))
    s_atk = record.attack_set()
    payload = {"esr": esr(s_atk, s_san), "f1": f1(s_atk, s_san),
               "cr": cr(s_atk, s_san), "attack_edges": len(s_atk),
               "deleted_edges": len(s_san)}
    print(json.dumps(payload, sort_keys=True, indent=2))
    return 0


def cmd_evaluate(args) -> int:
    poisoned = load_bundle(args.bundle)
    sanitized = load_bundle(args.sanitized)
    record = load_poison_record(Path(args.bundle) / "poison.json")
    report = evaluate_defense(poisoned, sanitized, record, seeds=args.seeds,
                              train_cfg=_train_config(args))
    payload = report.as_dict()
    payload["config"]["flags"] = {"bundle": str(args.bundle),
                                  "sanitized": str(args.sanitized),
                                  "seeds": args.seeds}
    print(json.dumps(payload, sort_keys=True, indent=2))
    return 0


def cmd_experiment(args) -> int:
    out = run_experiment(args.spec, out_dir=args.out)
    print(f"experiment results written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graphsan",
        description="Sanitize structurally poisoned graphs and evaluate the result.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("poison", help="attack a clean bundle")
    p.add_argument("bundle")
    p.add_argument("--power", type=float, required=True,
                   help="attack budget as a fraction of clean edges")
    p.add_argument("--method", choices=("mettack", "random"), default="mettack")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_poison)

    p = sub.add_parser("sanitize", help="prune suspected adversarial edges")
    p.add_argument("bundle")
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--budget-ratio", type=float, default=0.1,
                   help="deletions as a fraction of poisoned edges")
    p.add_argument("--out", required=True)
    p.add_argument("--temperature", type=float, default=2.0)
    p.add_argument("--beta", type=float, default=0.3)
    p.add_argument("--tau", type=float, default=0.6)
    p.add_argument("--eta", type=float, default=1e-4)
    p.add_argument("--meta-mode", choices=("first_order", "unrolled"),
                   default="first_order")
    _add_train_flags(p)
    p.set_defaults(func=cmd_sanitize)

    p = sub.add_parser("metrics", help="set metrics from poison.json and result.json")
    p.add_argument("poison")
    p.add_argument("result")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("evaluate", help="before/after accuracy and set metrics")
    p.add_argument("bundle", help="poisoned bundle dir containing poison.json")
    p.add_argument("sanitized", help="sanitized bundle dir")
    p.add_argument("--seeds", type=int, default=5)
    _add_train_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", help="run a JSON experiment spec")
    p.add_argument("spec")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
