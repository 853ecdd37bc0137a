"""``mirrorlab`` command line.

Exit codes: 0 success, 1 drift validity failure, 2 usage or config error,
3 divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from mirrorlab import config as cfgmod
from mirrorlab.drift import drift_to_dict, export_heatmap, verify_drift
from mirrorlab.errors import ConfigError, DivergenceError
from mirrorlab.esmeta import EsConfig, MetaState, meta_train
from mirrorlab.trainer import RunRecord, TrainConfig, train

log = logging.getLogger("mirrorlab")

EXIT_OK, EXIT_INVALID, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3
SUMMARY_KEYS = ("eval_return", "train_return", "entropy")


class UsageError(Exception):
    pass


def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def _prepare_out(out: Path, names: list[str], force: bool) -> None:
    existing = [n for n in names if (out / n).exists()]
    if existing and not force:
        raise UsageError(f"{out} already holds {', '.join(existing)}; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n")


def _load_config(args) -> cfgmod.RunConfig:
    cfg = cfgmod.load(args.config)
    if getattr(args, "env", None):
        cfg.env_id = args.env
        cfg.horizon = None
    if getattr(args, "drift", None):
        cfg.drift = parse_drift_arg(args.drift)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "seeds", None) is not None:
        if args.seeds < 1:
            raise ConfigError("--seeds must be >= 1")
        cfg.n_seeds = args.seeds
    cfg = cfgmod.from_dict(cfgmod.resolved_dict(cfg))  # re-validate overrides
    return cfg


def parse_drift_arg(text: str) -> dict:
    """``ppo``, ``dpo``, ``learned:PATH`` or ``constant[:VALUE]``."""
    kind, _, rest = text.partition(":")
    if kind == "ppo" and not rest:
        return {"kind": "ppo", "epsilon": 0.2}
    if kind == "dpo" and not rest:
        return {"kind": "dpo", "alpha": 2.0, "beta": 0.6}
    if kind == "learned" and rest:
        return cfgmod.load_drift_file(rest)
    if kind == "constant":
        try:
            return {"kind": "constant", "value": float(rest) if rest else 1.0}
        except ValueError:
            pass
    raise ConfigError(f"cannot parse --drift {text!r}; expected ppo, dpo or learned:PATH")


# --- train ----------------------------------------------------------------------


def seed_summary(records: list[RunRecord]) -> list[dict]:
    """Per-iteration mean and standard error (sample std / sqrt(N)) across seeds."""
    n_it = min(len(r.metrics) for r in records)
    rows = []
    for i in range(n_it):
        row = {"iteration": i, "timesteps": records[0].metrics[i]["timesteps"], "n_seeds": len(records)}
        for key in SUMMARY_KEYS:
            vals = np.array([np.nan if r.metrics[i].get(key) is None else r.metrics[i][key] for r in records])
            vals = vals[np.isfinite(vals)]
            row[f"{key}_mean"] = float(vals.mean()) if len(vals) else None
            row[f"{key}_se"] = float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else None
        rows.append(row)
    return rows


def _final_stats(values: list[float | None]) -> dict:
    v = np.array([np.nan if x is None else x for x in values], dtype=np.float64)
    v = v[np.isfinite(v)]
    return {"values": [None if x is None else float(x) for x in values],
            "mean": float(v.mean()) if len(v) else None,
            "se": float(v.std(ddof=1) / np.sqrt(len(v))) if len(v) > 1 else None,
            "median": float(np.median(v)) if len(v) else None}


def write_summary(out: Path, records: list[RunRecord], seeds: list[int]) -> None:
    rows = seed_summary(records)
    fields = ["iteration", "timesteps", "n_seeds"] + [f"{k}_{s}" for k in SUMMARY_KEYS for s in ("mean", "se")]
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for row in rows:
            w.writerow([row[k] if k in ("iteration", "timesteps", "n_seeds") else _fmt(row[k]) for k in fields])
    _write_json(out / "summary.json", {
        "seeds": seeds,
        "drift": records[0].drift,
        "env": records[0].env,
        "final_eval_return": _final_stats([r.final_eval_return for r in records]),
        "final_entropy": _final_stats([r.final_entropy for r in records]),
        "diverged": [r.diverged for r in records],
    })


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    seeds = [cfg.seed + k for k in range(cfg.n_seeds)]
    names = ["config.yaml", "summary.csv", "summary.json"]
    names += [f"run_seed{s}{ext}" for s in seeds for ext in (".json", "_metrics.csv")]
    _prepare_out(out, names, args.force)
    cfgmod.dump(cfg, out / "config.yaml")
    env_spec, drift = cfg.env_spec, cfg.drift_spec()
    records = []
    for s in seeds:
        rec = train(env_spec, drift, replace(cfg.train, seed=s))
        rec.save(out, f"run_seed{s}")
        records.append(rec)
        print(f"seed {s}: final eval return {_fmt(rec.final_eval_return) or 'n/a'}, "
              f"entropy {_fmt(rec.final_entropy) or 'n/a'}{' (diverged)' if rec.diverged else ''}")
    write_summary(out, records, seeds)
    if any(r.diverged for r in records):
        print("error: at least one run diverged", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


# --- meta-train -------------------------------------------------------------------


def _write_meta_outputs(out: Path, state: MetaState) -> None:
    state.write_history_csv(out / "history.csv")
    _write_json(out / "best_drift.json", drift_to_dict(state.best_drift()))
    _write_json(out / "final_drift.json", drift_to_dict(state.drift()))
    _write_json(out / "final_validity.json", verify_drift(state.drift()).to_dict())


def cmd_meta_train(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    ckpt = out / "checkpoint.json"
    resume = None
    if args.resume:
        if not ckpt.is_file():
            raise UsageError(f"no checkpoint to resume at {ckpt}")
        resume = MetaState.load(ckpt)
        if resume.seed != cfg.seed or resume.cfg.to_dict() != cfg.es.to_dict():
            raise UsageError("checkpoint was written with a different config or seed")
    else:
        _prepare_out(out, ["config.yaml", "checkpoint.json", "history.csv", "best_drift.json",
                           "final_drift.json", "final_validity.json"], args.force)
    cfgmod.dump(cfg, out / "config.yaml")
    state = meta_train(cfg.es, cfg.seed, checkpoint=ckpt, resume=resume)
    _write_meta_outputs(out, state)
    last = state.history[-1] if state.history else None
    print(f"generations: {state.generation}, best fitness: {_fmt(state.best_fitness)}"
          + (f", last mean fitness: {_fmt(last['mean_fitness'])}" if last else ""))
    return EXIT_OK


# --- verify / heatmap ---------------------------------------------------------------


def cmd_verify_drift(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    _prepare_out(out, ["validity.json"], args.force)
    g = cfg.verify
    report = verify_drift(cfg.drift_spec(), g.r_range, g.A_range, g.resolution)
    (out / "validity.json").write_text(report.to_json() + "\n")
    if report.valid:
        print("drift is valid")
        return EXIT_OK
    for msg in report.failures:
        print(f"invalid: {msg}")
    return EXIT_INVALID


def cmd_heatmap(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    _prepare_out(out, ["heatmap.csv", "heatmap_slices.csv", "config.yaml"], args.force)
    cfgmod.dump(cfg, out / "config.yaml")
    g = cfg.heatmap
    hm = export_heatmap(cfg.drift_spec(), g.r_range, g.A_range, g.resolution, cfg.slice_A)
    paths = hm.write(out)
    print("wrote " + ", ".join(str(p) for p in paths))
    return EXIT_OK


# --- compare ------------------------------------------------------------------------


def _collect_records(paths: list[str]) -> list[tuple[str, RunRecord]]:
    found = []
    for p in map(Path, paths):
        files = sorted(p.glob("run_seed*.json")) if p.is_dir() else [p]
        if not files or not all(f.is_file() for f in files):
            raise UsageError(f"no run records at {p}")
        for f in files:
            try:
                found.append((str(f), RunRecord.load(f)))
            except (json.JSONDecodeError, KeyError, ConfigError) as exc:
                raise UsageError(f"{f} is not a run record: {exc}") from exc
    # label sources relative to their common directory so output does not depend on where it lives
    root = os.path.commonpath([str(Path(f).resolve().parent) for f, _ in found])
    return [(Path(os.path.relpath(Path(f).resolve(), root)).as_posix(), rec) for f, rec in found]


def compare_tables(records: list[tuple[str, RunRecord]]) -> dict[str, list[list]]:
    """Per-iteration return and entropy, one column per run plus its delta against the first."""
    n_it = min(len(r.metrics) for _, r in records)
    tables = {}
    for key in ("eval_return", "entropy"):
        cols = [r.series(key)[:n_it] for _, r in records]
        header = ["iteration", "timesteps"]
        for k, (label, _) in enumerate(records):
            header.append(f"{key}[{k}]")
            if k:
                header.append(f"delta[{k}]")
        rows = [header]
        for i in range(n_it):
            row = [i, records[0][1].metrics[i]["timesteps"]]
            for k, c in enumerate(cols):
                row.append(_fmt(c[i]))
                if k:
                    row.append(_fmt(c[i] - cols[0][i]))
            rows.append(row)
        tables[key] = rows
    return tables


def cmd_compare(args) -> int:
    records = _collect_records(args.runs)
    out = Path(args.out)
    _prepare_out(out, ["compare_return.csv", "compare_entropy.csv", "compare_final.csv"], args.force)
    for key, rows in compare_tables(records).items():
        name = "return" if key == "eval_return" else key
        with open(out / f"compare_{name}.csv", "w", newline="") as fh:
            csv.writer(fh).writerows(rows)
    base = records[0][1]
    final = [["run", "source", "drift", "final_eval_return", "delta_return", "final_entropy", "delta_entropy"]]
    for k, (src, rec) in enumerate(records):
        dr = None if rec.final_eval_return is None or base.final_eval_return is None \
            else rec.final_eval_return - base.final_eval_return
        de = None if rec.final_entropy is None or base.final_entropy is None \
            else rec.final_entropy - base.final_entropy
        final.append([k, src, rec.drift.get("description", rec.drift.get("kind")), _fmt(rec.final_eval_return),
                      _fmt(dr), _fmt(rec.final_entropy), _fmt(de)])
    with open(out / "compare_final.csv", "w", newline="") as fh:
        csv.writer(fh).writerows(final)
    widths = [max(len(str(row[c])) for row in final) for c in range(len(final[0]))]
    for row in final:
        print("  ".join(str(v).ljust(w) for v, w in zip(row, widths)).rstrip())
    return EXIT_OK


# --- ablate-features ----------------------------------------------------------------


def mask_label(mask) -> str:
    return "".join("1" if m else "0" for m in mask)


def cmd_ablate_features(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    labels = [mask_label(m) for m in cfg.feature_masks]
    if len(set(labels)) != len(labels):
        raise ConfigError("duplicate feature masks in ablate.feature_masks")
    _prepare_out(out, ["config.yaml", "ablation.csv"] + [f"mask_{l}" for l in labels], args.force)
    cfgmod.dump(cfg, out / "config.yaml")
    rows = [["feature_mask", "best_fitness", "final_mean_fitness", "final_valid"]]
    for mask, label in zip(cfg.feature_masks, labels):
        es = EsConfig.from_dict({**cfg.es.to_dict(), "feature_mask": list(mask), "train": cfg.es.train})
        sub = out / f"mask_{label}"
        sub.mkdir(parents=True, exist_ok=True)
        state = meta_train(es, cfg.seed, checkpoint=sub / "checkpoint.json")
        _write_meta_outputs(sub, state)
        final_mean = state.history[-1]["mean_fitness"] if state.history else None
        rows.append([label, _fmt(state.best_fitness), _fmt(final_mean), int(verify_drift(state.drift()).valid)])
        print(f"mask {label}: best fitness {_fmt(state.best_fitness)}")
    with open(out / "ablation.csv", "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    return EXIT_OK


# --- entry point --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mirrorlab", description="Mirror-learning drifts: train, meta-train, analyse.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default, seeds=False, env=True, drift=True):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--out", default=out_default, help=f"output directory (default {out_default})")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        sp.add_argument("--seed", type=int, help="override the config seed")
        if seeds:
            sp.add_argument("--seeds", type=int, help="number of consecutive seeds to run")
        if env:
            sp.add_argument("--env", choices=("cartpole", "pendulum"))
        if drift:
            sp.add_argument("--drift", help="ppo, dpo or learned:PATH")

    common(sub.add_parser("train", help="train policies with a fixed drift"), "runs/train", seeds=True)
    mt = sub.add_parser("meta-train", help="ES meta-training of a learned drift")
    common(mt, "runs/meta", env=False, drift=False)
    mt.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.json")
    common(sub.add_parser("verify-drift", help="check the drift conditions on a grid"), "runs/verify", env=False)
    common(sub.add_parser("heatmap", help="export the ratio-derivative heatmap"), "runs/heatmap", env=False)
    cp = sub.add_parser("compare", help="tabulate return and entropy across run records")
    cp.add_argument("runs", nargs="+", help="run record JSON files or train output directories")
    cp.add_argument("--out", default="runs/compare")
    cp.add_argument("--force", action="store_true")
    common(sub.add_parser("ablate-features", help="meta-train once per feature mask"), "runs/ablate",
           env=False, drift=False)
    return p


COMMANDS = {
    "train": cmd_train, "meta-train": cmd_meta_train, "verify-drift": cmd_verify_drift,
    "heatmap": cmd_heatmap, "compare": cmd_compare, "ablate-features": cmd_ablate_features,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, FloatingPointError) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
