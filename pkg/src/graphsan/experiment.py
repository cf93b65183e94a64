"""Experiment harness: seeded grids over attacks, sanitizers, and knobs.

A JSON spec describes the dataset, the attack powers/seeds, the sanitizers
and their budgets, and which study designs to run. Each grid cell is an
independent job keyed by its parameters; cells run in a bounded worker pool
and the rows are merged in sorted key order, so results are byte-identical
for identical specs regardless of scheduling.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .bundle import GraphBundle, load_bundle
from .errors import SpecError
from .gnn import TrainConfig, accuracy, predict, train_inner
from .metrics import cr, esr, evaluate_defense, f1
from .poison import AttackConfig, mettack_like, mixed_prune_fixture, random_attack
from .sanitize import SanitizerConfig, run_sanitizer
from .synth import sbm_bundle

__all__ = ["run_experiment", "read_csv_rows"]

OUTPUT_KINDS = ("sanitation_grid", "sequential_prune", "mixed_prune",
                "sensitivity", "ablation")
METHOD_MAP = {
    "cld": "classdiv",
    "lp": "linkpred",
    "gasoline-d": "none",
    "jaccard": "jaccard",
    "lp-only": "linkpred_only",
}
SENSITIVITY_PARAMS = ("temperature", "beta", "eta", "tau")


def _expect(cond: bool, path: str, msg: str) -> None:
    if not cond:
        raise SpecError(f"{path}: {msg}")


def _train_config(raw: dict, path: str) -> TrainConfig:
    allowed = {"epochs", "learning_rate", "weight_decay", "seed", "init_scale"}
    for key in raw:
        _expect(key in allowed, f"{path}.{key}", "unknown training field")
    return TrainConfig(**raw)


def _dataset(spec: dict, seed: int) -> GraphBundle:
    kind = spec["kind"]
    if kind == "bundle":
        return load_bundle(spec["path"])
    params = {k: v for k, v in spec.items() if k != "kind"}
    params.setdefault("seed", seed)
    if spec.get("reseed", True):
        params["seed"] = seed
    params.pop("reseed", None)
    return sbm_bundle(**params)


def _attack(bundle: GraphBundle, method: str, power: float, seed: int,
            train_cfg: TrainConfig):
    cfg = AttackConfig(power=power, seed=seed)
    if method == "random":
        return random_attack(bundle, cfg)
    return mettack_like(bundle, cfg, train_cfg=train_cfg.with_seed(seed))


def _sanitizer_config(method: str, params: dict, budget: int,
                      train_cfg: TrainConfig, seed: int) -> SanitizerConfig:
    base = dict(params)
    base.pop("method", None)
    return SanitizerConfig(detector=METHOD_MAP[method], budget=budget,
                           train=train_cfg.with_seed(seed), seed=seed, **base)


def _mean_test_accuracy(bundle: GraphBundle, train_cfg: TrainConfig,
                        eval_seeds: int, base_seed: int = 0) -> float:
    accs = []
    for i in range(eval_seeds):
        gnn = train_inner(bundle, train_cfg.with_seed(base_seed + i))
        accs.append(accuracy(predict(gnn.probs), bundle.labels, bundle.split.test))
    return float(np.mean(accs))


# --- grid cells (top-level so the process pool can pickle them) -----------


def _grid_cell(args: dict) -> list:
    train_cfg = _train_config(args["train"], "train")
    clean = _dataset(args["dataset"], args["seed"])
    poisoned, record = _attack(clean, args["attack_method"], args["power"],
                               args["seed"], train_cfg)
    rows = []
    for ratio in args["r_asb"]:
        budget = max(1, math.ceil(ratio * poisoned.num_edges()))
        for method, params in args["sanitizers"]:
            cfg = _sanitizer_config(method, params, budget, train_cfg, args["seed"])
            result = run_sanitizer(poisoned, cfg)
            report = evaluate_defense(poisoned, result.sanitized, record,
                                      seeds=args["eval_seeds"], train_cfg=train_cfg)
            rows.append({
                "power": args["power"], "seed": args["seed"], "r_asb": ratio,
                "method": method, "budget": budget,
                "deletions": len(result.deleted),
                "esr": report.esr, "f1": report.f1, "cr": report.cr,
                "accuracy_before": report.accuracy_before,
                "accuracy_after": report.accuracy_after,
            })
    return rows


def _sequential_cell(args: dict) -> list:
    train_cfg = _train_config(args["train"], "train")
    clean = _dataset(args["dataset"], args["seed"])
    poisoned, record = _attack(clean, args["attack_method"], args["power"],
                               args["seed"], train_cfg)
    rng = np.random.default_rng(args["seed"])
    order = [tuple(e) for e in record.inserted.sorted_pairs()]
    rng.shuffle(order)
    stride = args["stride"]
    checkpoints = list(range(0, len(order) + 1, stride))
    if checkpoints[-1] != len(order):
        checkpoints.append(len(order))
    A = poisoned.adjacency.copy()
    rows = []
    done = 0
    for k in checkpoints:
        for u, v in order[done:k]:
            A[u, v] = A[v, u] = 0.0
        done = k
        acc = _mean_test_accuracy(poisoned.with_adjacency(A), train_cfg,
                                  args["eval_seeds"])
        rows.append({"seed": args["seed"], "num_deleted": k, "mean_accuracy": acc})
    return rows


def _mixed_cell(args: dict) -> list:
    train_cfg = _train_config(args["train"], "train")
    clean = _dataset(args["dataset"], args["seed"])
    poisoned, record = _attack(clean, args["attack_method"], args["power"],
                               args["seed"], train_cfg)
    s_atk = record.attack_set()
    rows = []
    for frac in args["fractions"]:
        result = mixed_prune_fixture(poisoned, record, frac, seed=args["seed"])
        s_san = result.deleted_set()
        acc = _mean_test_accuracy(result.sanitized, train_cfg, args["eval_seeds"])
        rows.append({
            "fraction": frac, "seed": args["seed"],
            "esr": esr(s_atk, s_san), "f1": f1(s_atk, s_san),
            "cr": cr(s_atk, s_san), "mean_accuracy": acc,
        })
    return rows


def _sensitivity_cell(args: dict) -> list:
    train_cfg = _train_config(args["train"], "train")
    clean = _dataset(args["dataset"], args["seed"])
    poisoned, record = _attack(clean, args["attack_method"], args["power"],
                               args["seed"], train_cfg)
    budget = max(1, math.ceil(args["r_asb"] * poisoned.num_edges()))
    rows = []
    for value in args["values"]:
        params = dict(args["params"])
        params[args["param"]] = value
        cfg = _sanitizer_config(args["method"], params, budget, train_cfg, args["seed"])
        result = run_sanitizer(poisoned, cfg)
        rows.append({
            "param": args["param"], "value": value, "seed": args["seed"],
            "esr": esr(record.attack_set(), result.deleted_set()),
        })
    return rows


def _ablation_cell(args: dict) -> list:
    train_cfg = _train_config(args["train"], "train")
    clean = _dataset(args["dataset"], args["seed"])
    poisoned, record = _attack(clean, args["attack_method"], args["power"],
                               args["seed"], train_cfg)
    budget = max(1, math.ceil(args["r_asb"] * poisoned.num_edges()))
    s_atk = record.attack_set()
    rows = []
    for mode in args["modes"]:
        on_params, off_params = dict(args["params"]), dict(args["params"])
        if mode == "adaptive_lambda":
            on_params["adaptive_lambda"], off_params["adaptive_lambda"] = True, False
        elif mode == "normal_focus":
            on_params["normal_loss_focus"], off_params["normal_loss_focus"] = True, False
        scores = {}
        for tag, params in (("on", on_params), ("off", off_params)):
            cfg = _sanitizer_config(args["method"], params, budget, train_cfg,
                                    args["seed"])
            result = run_sanitizer(poisoned, cfg)
            scores[tag] = esr(s_atk, result.deleted_set())
        rows.append({"mode": mode, "seed": args["seed"],
                     "esr_on": scores["on"], "esr_off": scores["off"]})
    return rows


_CELL_FNS = {
    "sanitation_grid": _grid_cell,
    "sequential_prune": _sequential_cell,
    "mixed_prune": _mixed_cell,
    "sensitivity": _sensitivity_cell,
    "ablation": _ablation_cell,
}


def _run_cell(job):
    kind, args = job
    return kind, _CELL_FNS[kind](args)


# --- spec handling ---------------------------------------------------------


def _validate_spec(spec: dict) -> dict:
    _expect(isinstance(spec, dict), "", "spec must be a JSON object")
    _expect("dataset" in spec, "dataset", "missing")
    ds = spec["dataset"]
    _expect(isinstance(ds, dict) and "kind" in ds, "dataset.kind", "missing")
    _expect(ds["kind"] in ("sbm", "bundle"), "dataset.kind", "must be 'sbm' or 'bundle'")
    if ds["kind"] == "bundle":
        _expect("path" in ds, "dataset.path", "missing")

    _expect("attack" in spec, "attack", "missing")
    atk = spec["attack"]
    _expect(atk.get("method") in ("mettack_like", "random"), "attack.method",
            "must be 'mettack_like' or 'random'")
    _expect(isinstance(atk.get("powers"), list) and atk["powers"], "attack.powers",
            "must be a nonempty list")
    _expect(isinstance(atk.get("seeds"), list) and atk["seeds"], "attack.seeds",
            "must be a nonempty list")

    outputs = spec.get("outputs", ["sanitation_grid"])
    _expect(isinstance(outputs, list) and outputs, "outputs", "must be a nonempty list")
    for i, out in enumerate(outputs):
        _expect(out in OUTPUT_KINDS, f"outputs[{i}]", f"must be one of {OUTPUT_KINDS}")

    sanitizers = spec.get("sanitizers", [])
    if "sanitation_grid" in outputs:
        _expect(sanitizers, "sanitizers", "required for sanitation_grid")
    for i, entry in enumerate(sanitizers):
        _expect(isinstance(entry, dict) and entry.get("method") in METHOD_MAP,
                f"sanitizers[{i}].method", f"must be one of {sorted(METHOD_MAP)}")

    r_asb = spec.get("r_asb", [0.1])
    _expect(isinstance(r_asb, list) and r_asb, "r_asb", "must be a nonempty list")
    for i, r in enumerate(r_asb):
        _expect(0 < r <= 1, f"r_asb[{i}]", "must lie in (0, 1]")

    if "sensitivity" in outputs:
        sens = spec.get("sensitivity")
        _expect(isinstance(sens, dict), "sensitivity", "required for sensitivity output")
        _expect(sens.get("param") in SENSITIVITY_PARAMS, "sensitivity.param",
                f"must be one of {SENSITIVITY_PARAMS}")
        _expect(isinstance(sens.get("values"), list) and sens["values"],
                "sensitivity.values", "must be a nonempty list")
    return spec


def _collect_jobs(spec: dict) -> list:
    ds = spec["dataset"]
    atk = spec["attack"]
    train = spec.get("train", {})
    eval_seeds = spec.get("eval_seeds", 3)
    outputs = spec.get("outputs", ["sanitation_grid"])
    r_asb = spec.get("r_asb", [0.1])
    sanitizers = [(s["method"], s.get("params", {})) for s in spec.get("sanitizers", [])]
    jobs = []
    if "sanitation_grid" in outputs:
        for power in atk["powers"]:
            for seed in atk["seeds"]:
                jobs.append(("sanitation_grid", {
                    "dataset": ds, "attack_method": atk["method"], "power": power,
                    "seed": seed, "train": train, "eval_seeds": eval_seeds,
                    "r_asb": r_asb, "sanitizers": sanitizers,
                }))
    if "sequential_prune" in outputs:
        opts = spec.get("sequential_prune", {})
        for seed in atk["seeds"]:
            jobs.append(("sequential_prune", {
                "dataset": ds, "attack_method": atk["method"],
                "power": atk["powers"][0], "seed": seed, "train": train,
                "eval_seeds": opts.get("eval_seeds", eval_seeds),
                "stride": opts.get("stride", 10),
            }))
    if "mixed_prune" in outputs:
        opts = spec.get("mixed_prune", {})
        fractions = opts.get("fractions", [round(0.1 * i, 1) for i in range(11)])
        for seed in opts.get("seeds", atk["seeds"]):
            jobs.append(("mixed_prune", {
                "dataset": ds, "attack_method": atk["method"],
                "power": atk["powers"][0], "seed": seed, "train": train,
                "eval_seeds": opts.get("eval_seeds", eval_seeds),
                "fractions": fractions,
            }))
    if "sensitivity" in outputs:
        sens = spec["sensitivity"]
        for seed in atk["seeds"]:
            jobs.append(("sensitivity", {
                "dataset": ds, "attack_method": atk["method"],
                "power": atk["powers"][0], "seed": seed, "train": train,
                "r_asb": r_asb[0], "param": sens["param"], "values": sens["values"],
                "method": sens.get("method", "cld"),
                "params": sens.get("params", {}),
            }))
    if "ablation" in outputs:
        abl = spec.get("ablation", {})
        for seed in atk["seeds"]:
            jobs.append(("ablation", {
                "dataset": ds, "attack_method": atk["method"],
                "power": atk["powers"][0], "seed": seed, "train": train,
                "r_asb": r_asb[0],
                "modes": abl.get("modes", ["adaptive_lambda", "normal_focus"]),
                "method": abl.get("method", "cld"), "params": abl.get("params", {}),
            }))
    return jobs


def _write_csv(path: Path, rows: list, columns: list) -> None:
    def cell(v):
        return repr(float(v)) if isinstance(v, float) else str(v)

    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(cell(row[c]) for c in columns))
    path.write_text("".join(line + "\n" for line in lines))


def read_csv_rows(path) -> list:
    """Parse a harness CSV back into dicts with exact float round-trip."""
    lines = Path(path).read_text().splitlines()
    columns = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        row = {}
        for col, tok in zip(columns, line.split(",")):
            try:
                row[col] = int(tok)
            except ValueError:
                try:
                    row[col] = float(tok)
                except ValueError:
                    row[col] = tok
        rows.append(row)
    return rows


def _rankdata(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    ranks[order] = np.arange(1, len(x) + 1)
    vals, inv, counts = np.unique(x, return_inverse=True, return_counts=True)
    sums = np.zeros(len(vals))
    np.add.at(sums, inv, ranks)
    return sums[inv] / counts[inv]


def _spearman(x, y) -> float:
    rx, ry = _rankdata(np.asarray(x, dtype=float)), _rankdata(np.asarray(y, dtype=float))
    if np.std(rx) == 0 or np.std(ry) == 0:
        return 0.0
    return float(np.corrcoef(rx, ry)[0, 1])


_GRID_COLUMNS = ["power", "seed", "r_asb", "method", "budget", "deletions",
                 "esr", "f1", "cr", "accuracy_before", "accuracy_after"]
_COLUMNS = {
    "sanitation_grid": _GRID_COLUMNS,
    "sequential_prune": ["seed", "num_deleted", "mean_accuracy"],
    "mixed_prune": ["fraction", "seed", "esr", "f1", "cr", "mean_accuracy"],
    "sensitivity": ["param", "value", "seed", "esr"],
    "ablation": ["mode", "seed", "esr_on", "esr_off"],
}
_SORT_KEYS = {
    "sanitation_grid": ("power", "seed", "r_asb", "method"),
    "sequential_prune": ("seed", "num_deleted"),
    "mixed_prune": ("fraction", "seed"),
    "sensitivity": ("param", "value", "seed"),
    "ablation": ("mode", "seed"),
}


def _summarize(tables: dict) -> dict:
    summary = {}
    if "sanitation_grid" in tables:
        agg = {}
        for row in tables["sanitation_grid"]:
            key = (row["method"], row["power"], row["r_asb"])
            agg.setdefault(key, []).append(row)
        summary["sanitation_grid"] = [
            {
                "method": m, "power": p, "r_asb": r,
                "mean_esr": float(np.mean([x["esr"] for x in rows])),
                "mean_f1": float(np.mean([x["f1"] for x in rows])),
                "mean_cr": float(np.mean([x["cr"] for x in rows])),
                "mean_accuracy_before": float(np.mean([x["accuracy_before"] for x in rows])),
                "mean_accuracy_after": float(np.mean([x["accuracy_after"] for x in rows])),
                "seeds": len(rows),
            }
            for (m, p, r), rows in sorted(agg.items())
        ]
    if "sequential_prune" in tables:
        slopes = []
        by_seed = {}
        for row in tables["sequential_prune"]:
            by_seed.setdefault(row["seed"], []).append(row)
        for seed, rows in sorted(by_seed.items()):
            xs = [r["num_deleted"] for r in rows]
            ys = [r["mean_accuracy"] for r in rows]
            slopes.append({"seed": seed, "slope": float(np.polyfit(xs, ys, 1)[0])})
        summary["sequential_prune"] = {"slopes": slopes}
    if "mixed_prune" in tables:
        by_frac = {}
        for row in tables["mixed_prune"]:
            by_frac.setdefault(row["fraction"], []).append(row["mean_accuracy"])
        fracs = sorted(by_frac)
        means = [float(np.mean(by_frac[f])) for f in fracs]
        summary["mixed_prune"] = {
            "fractions": fracs,
            "mean_accuracy": means,
            "spearman_fraction_accuracy": _spearman(fracs, means),
        }
    if "sensitivity" in tables:
        by_val = {}
        for row in tables["sensitivity"]:
            by_val.setdefault(row["value"], []).append(row["esr"])
        summary["sensitivity"] = [
            {"value": v, "mean_esr": float(np.mean(by_val[v]))} for v in sorted(by_val)
        ]
    if "ablation" in tables:
        by_mode = {}
        for row in tables["ablation"]:
            by_mode.setdefault(row["mode"], []).append(row)
        summary["ablation"] = [
            {
                "mode": mode,
                "mean_esr_on": float(np.mean([r["esr_on"] for r in rows])),
                "mean_esr_off": float(np.mean([r["esr_off"] for r in rows])),
            }
            for mode, rows in sorted(by_mode.items())
        ]
    return summary


def run_experiment(spec, out_dir=None) -> Path:
    """Run every study in the spec; returns the results directory."""
    if not isinstance(spec, dict):
        spec_path = Path(spec)
        try:
            spec = json.loads(spec_path.read_text())
        except json.JSONDecodeError as e:
            raise SpecError(f"{spec_path}:{e.lineno}: invalid JSON: {e.msg}") from e
    spec = _validate_spec(spec)
    out = Path(out_dir or spec.get("out_dir", f"results/{spec.get('name', 'experiment')}"))
    out.mkdir(parents=True, exist_ok=True)

    jobs = _collect_jobs(spec)
    workers = int(spec.get("workers", 1))
    tables = {kind: [] for kind in OUTPUT_KINDS}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for kind, rows in pool.map(_run_cell, jobs):
                tables[kind].extend(rows)
    else:
        for job in jobs:
            kind, rows = _run_cell(job)
            tables[kind].extend(rows)

    tables = {k: v for k, v in tables.items() if v}
    for kind, rows in tables.items():
        keys = _SORT_KEYS[kind]
        rows.sort(key=lambda r: tuple(r[k] for k in keys))
        name = kind if kind != "sensitivity" else f"sensitivity_{spec['sensitivity']['param']}"
        _write_csv(out / f"{name}.csv", rows, _COLUMNS[kind])

    summary = {"spec": spec, "results": _summarize(tables)}
    (out / "summary.json").write_text(
        json.dumps(summary, sort_keys=True, separators=(",", ": "), indent=2) + "\n")
    return out
