"""Command line entry point.

Every subcommand writes its outputs into ``--out-dir`` (``fit`` also takes
explicit ``--out`` and ``--report`` paths) together with a ``manifest.json`` recording the resolved settings, input hashes, seed and
version. Settings resolve as: command-line flag, then ``GAWARE_<NAME>``
environment variable, then the ``--config`` JSON file, then the default.

Exit codes: 0 success, 1 invalid input or usage, 2 internal error.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
import traceback

import numpy as np

from . import __version__
from .core import (EstimateTable, _rows_to_csv, atomic_write_text, dumps_json, load_estimate_table,
                   load_raw_study, load_tree, save_estimate_table)
from .errors import GAwareError, ValidationError

ENV_PREFIX = "GAWARE_"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# name -> (type, default, help); every option is registered with default=None
# so that unset flags can fall through to the environment and the config file
COMMON = {
    "out-dir": (str, "gaware-out", "directory for outputs and the run manifest"),
    "seed": (int, 0, "master seed; all randomness derives from it"),
}
TREE = {
    "sigma2": (float, 1.5, "per-unit-mass cost of abstaining"),
    "depth": (int, 3, "tree depth L"),
    "groups": (int, 4, "G: ignorance plus at most G-1 archetypes"),
    "splits": (int, 5, "candidate split values per variable and scope"),
    "min-leaf": (int, 20, "archetypes need more than this many types"),
    "split-rule": (str, "equal", "equal | quantile"),
    "min-leaf-rule": (str, "force_ignorance", "force_ignorance | discard_split"),
}
SUBCOMMANDS = {
    "build-estimates": ("turn a raw study CSV into a per-type estimate table", {
        "input": (str, None, "raw study CSV (default: shipped synthetic sample)"),
        "estimator": (str, "ipw", "ipw | dr | param | matched"),
        "key": (str, "covariates", "covariates | unit: how units map to types"),
        "oracle": (str, "ridge", "outcome model for dr/param/matched: ridge | knn | zero | constant"),
        "folds": (int, 2, "cross-fitting folds"),
        "match-size": (int, 1, "matched estimator: units per treatment arm in a group"),
    }),
    "fit": ("fit a G-aware tree", {
        "table": (str, None, "estimate table CSV (default: shipped synthetic sample)"),
        "out": (str, None, "model JSON path (default: <out-dir>/model.json)"),
        "report": (str, None, "per-type report CSV path (default: <out-dir>/report.csv)"),
        **TREE,
    }),
    "sweep": ("fit across a sigma2 grid and tabulate the frontier", {
        "table": (str, None, "estimate table CSV (default: shipped synthetic sample)"),
        "sigma2-grid": (str, "0.5:5.5:1.0", "start:stop:step or comma list"),
        **{k: v for k, v in TREE.items() if k != "sigma2"},
    }),
    "infer": ("test candidate partitions on split samples", {
        "input": (str, None, "raw study CSV (default: shipped synthetic sample)"),
        "candidates": (str, "all-ignorance,pooled", "comma list of tree JSON paths or all-ignorance | pooled"),
        "gamma": (float, 0.1, "family-wise level"),
        "estimator": (str, "ipw", "ipw | dr | param"),
        "per-group": (bool, False, "center variance terms within groups"),
        **TREE,
    }),
    "forest": ("bagged trees and generalizability scores", {
        "table": (str, None, "estimate table CSV (default: shipped synthetic sample)"),
        "trees": (int, 100, "number of trees M"),
        "mtry": (int, 0, "covariates per tree m (default r-1)"),
        "no-bootstrap": (bool, False, "diagnostic mode: every tree sees all rows"),
        **TREE,
    }),
    "simulate": ("run the contaminated-design benchmark", {
        "scales": (str, "0.1,0.5,1,2,3", "Cauchy scales"),
        "sigma2-grid": (str, "0.1,0.5,1,1.5,2", "G-aware cost levels"),
        "reps": (int, 50, "replications per scale"),
        "n": (int, 2000, "types per replication"),
        "units-per-type": (int, 10, "units in every type"),
        "no-shrinkage": (bool, False, "skip the shrinkage baselines"),
    }),
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gaware", description="Generalizability-aware trees: fit, test and benchmark.")
    p.add_argument("--version", action="version", version=f"gaware {__version__}")
    p.add_argument("--threads", type=int, default=None, help="cap on worker processes")
    p.add_argument("--config", default=None, help="JSON file mirroring flag names")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    for name, (helptext, opts) in SUBCOMMANDS.items():
        sp = sub.add_parser(name, help=helptext, description=helptext)
        for opt, (typ, default, h) in {**opts, **COMMON}.items():
            shown = f"{h} [default: {default}]" if default not in (None, False) else h
            if typ is bool:
                sp.add_argument(f"--{opt}", action="store_true", default=None, help=h)
            else:
                sp.add_argument(f"--{opt}", type=typ, default=None, help=shown)
    return p


def _coerce(typ, value, source):
    if typ is bool:
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off", ""):
            return False
        raise ValidationError(f"{source}: expected a boolean, got {value!r}")
    try:
        return typ(value)
    except (TypeError, ValueError):
        raise ValidationError(f"{source}: expected {typ.__name__}, got {value!r}") from None


def resolve_settings(command: str, args: argparse.Namespace, config: dict, environ=None) -> dict:
    environ = os.environ if environ is None else environ
    opts = {**SUBCOMMANDS[command][1], **COMMON}
    known = set(opts) | {k.replace("-", "_") for k in opts} | {"threads"}
    unknown = sorted(k for k in config if k not in known)
    if unknown:
        raise ValidationError(f"unknown config keys: {', '.join(unknown)}")
    out = {}
    for opt, (typ, default, _) in opts.items():
        attr = opt.replace("-", "_")
        env = ENV_PREFIX + attr.upper()
        cli = getattr(args, attr)
        if cli is not None:
            out[attr] = cli
        elif env in environ:
            out[attr] = _coerce(typ, environ[env], env)
        elif opt in config or attr in config:
            out[attr] = _coerce(typ, config.get(opt, config.get(attr)), f"config key {opt}")
        else:
            out[attr] = default
    threads = args.threads
    if threads is None and ENV_PREFIX + "THREADS" in environ:
        threads = _coerce(int, environ[ENV_PREFIX + "THREADS"], ENV_PREFIX + "THREADS")
    if threads is None and "threads" in config:
        threads = _coerce(int, config["threads"], "config key threads")
    out["threads"] = max(1, threads or 1)
    return out


def parse_grid(text: str) -> list:
    """``start:stop:step`` (stop included) or a comma-separated list."""
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValidationError(f"grid {text!r}: expected start:stop:step")
        try:
            a, b, step = (float(x) for x in parts)
        except ValueError:
            raise ValidationError(f"grid {text!r}: not numeric") from None
        if step <= 0 or b < a:
            raise ValidationError(f"grid {text!r}: need step > 0 and stop >= start")
        k = int(np.floor((b - a) / step + 1e-9))
        return [round(a + i * step, 12) for i in range(k + 1)]
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ValidationError(f"grid {text!r}: not numeric") from None
    if not vals:
        raise ValidationError("grid is empty")
    return vals


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class _Run:
    """Collects inputs and outputs of one invocation and writes the manifest."""

    def __init__(self, command: str, settings: dict):
        self.command = command
        self.settings = settings
        self.inputs = {}
        self.outputs = []
        self.out_dir = settings["out_dir"]
        self.t0 = time.perf_counter()

    def input(self, path: str) -> str:
        if not os.path.exists(path):
            raise ValidationError(f"file not found: {path}")
        self.inputs[path] = _sha256(path)
        return path

    def write(self, name: str, text: str, path: str | None = None) -> None:
        """Write ``name`` into the output directory, or to ``path`` when given."""
        target = path or os.path.join(self.out_dir, name)
        os.makedirs(os.path.dirname(target) or ".", exist_ok=True)
        atomic_write_text(target, text)
        self.outputs.append(path or name)

    def finish(self) -> None:
        manifest = {"subcommand": self.command, "config": self.settings, "inputs": self.inputs,
                    "seed": self.settings.get("seed"), "version": __version__, "outputs": sorted(self.outputs),
                    "wall_time": time.perf_counter() - self.t0}
        self.write("manifest.json", dumps_json(manifest))


def _search_config(s: dict, sigma2=None):
    from .tree import SearchConfig
    return SearchConfig(depth=s["depth"], splits=s["splits"], min_leaf=s["min_leaf"], G=s["groups"],
                        sigma2=s["sigma2"] if sigma2 is None else sigma2, split_rule=s["split_rule"],
                        min_leaf_rule=s["min_leaf_rule"])


def _table(run: _Run, path) -> EstimateTable:
    from .sample import sample_table_path
    return load_estimate_table(run.input(path or sample_table_path()))


def _study(run: _Run, path):
    from .sample import sample_study_path
    return load_raw_study(run.input(path or sample_study_path()))


def cmd_build_estimates(run: _Run, s: dict) -> None:
    from .estimates import (dr_pseudo_outcomes, ipw_pseudo_outcomes, make_oracle, matched_variance_table,
                            parametric_variance_table)
    study = _study(run, s["input"])
    if s["key"] not in ("covariates", "unit"):
        raise ValidationError("key must be 'covariates' or 'unit'")
    est = s["estimator"]
    if est == "ipw":
        table = ipw_pseudo_outcomes(study, key=s["key"])
    elif est == "dr":
        table = dr_pseudo_outcomes(study, make_oracle(s["oracle"], s["seed"]), s["folds"], key=s["key"], seed=s["seed"])
    elif est == "param":
        table = parametric_variance_table(study, make_oracle(s["oracle"], s["seed"]), s["folds"], key=s["key"],
                                          seed=s["seed"])
    elif est == "matched":
        table = matched_variance_table(study, make_oracle(s["oracle"], s["seed"]), s["folds"], s["match_size"],
                                       seed=s["seed"])
    else:
        raise ValidationError(f"unknown estimator {est!r}")
    os.makedirs(run.out_dir, exist_ok=True)
    save_estimate_table(table, os.path.join(run.out_dir, "estimates.csv"))
    run.outputs.append("estimates.csv")
    print(f"{len(study)} units -> {len(table)} types ({est})")


def _fit_report(fit) -> dict:
    return {"objective": fit.objective, "epsilon": fit.epsilon, "helper_loss": fit.helper_loss,
            "flags": list(fit.flags), "breakdown": dataclasses.asdict(fit.breakdown),
            "ignorance_mass": fit.breakdown.ignorance_mass}


def cmd_fit(run: _Run, s: dict) -> None:
    from .tree import fit_gaware_tree
    table = _table(run, s["table"])
    fit = fit_gaware_tree(table, _search_config(s))
    run.write("model.json", dumps_json(fit.tree.to_dict()), s["out"])
    run.write("summary.json", dumps_json(_fit_report(fit)))
    leaf = fit.tree.leaf_index(table.X)
    pred = fit.tree.predict(table.X)
    header = ["type_id", "leaf", "label"] + [f"prediction_{q}" for q in table.outcome_names]
    rows = ([tid, int(k), fit.tree.leaves[k].label]
            + (["IGNORANCE"] * pred.shape[1] if np.isnan(p).any() else p.tolist())
            for tid, k, p in zip(table.type_ids, leaf, pred))
    run.write("report.csv", _rows_to_csv(header, rows), s["report"])
    print(f"objective {fit.objective:.6g}  ignorance mass {fit.breakdown.ignorance_mass:.4g}  "
          f"archetypes {fit.breakdown.n_archetypes}  epsilon {fit.epsilon:.3g}"
          + (f"  flags {','.join(fit.flags)}" if fit.flags else ""))


def cmd_sweep(run: _Run, s: dict) -> None:
    from .reward import sigma_frontier
    from .tree import fit_gaware_tree
    table = _table(run, s["table"])
    grid = parse_grid(s["sigma2_grid"])
    rows = sigma_frontier(table, lambda t, s2: fit_gaware_tree(t, _search_config(s, s2)), grid)
    header = ["sigma2", "ignorance_mass", "r_hat", "w_hat", "n_archetypes", "error"]
    run.write("frontier.csv", _rows_to_csv(header, ([r.sigma2, r.ignorance_mass, r.r_hat, r.w_hat,
                                                     r.n_archetypes, r.error or ""] for r in rows)))
    for r in rows:
        print(f"sigma2 {r.sigma2:g}: ignorance mass {r.ignorance_mass:.4g}, archetypes {r.n_archetypes}"
              + (f" ({r.error})" if r.error else ""))


def _candidate(choice: str, run: _Run, table: EstimateTable, G: int):
    from .core import Partition
    n = len(table)
    if choice == "all-ignorance":
        return Partition(table.type_ids, np.ones(n, dtype=int), G)
    if choice == "pooled":
        return Partition(table.type_ids, np.full(n, 2), G)
    return load_tree(run.input(choice)).partition(table)


def cmd_infer(run: _Run, s: dict) -> None:
    from .estimates import split_for_inference
    from .inference import prune_partition_set
    study = _study(run, s["input"])
    pair = split_for_inference(study, seed=s["seed"], estimator=s["estimator"])
    config = _search_config(s)
    specs = [c.strip() for c in s["candidates"].split(",") if c.strip()]
    cands = [_candidate(c, run, pair.main, config.G) for c in specs]
    _, reports = prune_partition_set(pair, cands, s["gamma"], config, names=specs, per_group=s["per_group"])
    header = ["candidate", "t_hat", "v2_hat", "critical_value", "gamma_star", "n_types", "degenerate", "decision"]
    run.write("tests.csv", _rows_to_csv(header, ([r.candidate, r.t_hat, r.v2_hat, r.critical_value, r.gamma_star,
                                                   r.n_types, r.degenerate, r.decision] for r in reports)))
    run.write("excluded_types.json", dumps_json(list(pair.excluded)))
    for r in reports:
        print(f"{r.candidate}: T = {r.t_hat:.4g}, v2 = {r.v2_hat:.4g} -> {r.decision}")


def cmd_forest(run: _Run, s: dict) -> None:
    from .forest import fit_forest, out_of_bag_scores, predict_with_scores
    table = _table(run, s["table"])
    bootstrap = not s["no_bootstrap"]
    m = s["mtry"] or (table.n_covariates - 1 if bootstrap else table.n_covariates)
    model = fit_forest(table, _search_config(s), s["trees"], m, seed=s["seed"], bootstrap=bootstrap,
                       workers=s["threads"])
    pred = predict_with_scores(model, table)
    header = ["type_id", "score", "n_predicting"] + [f"prediction_{q}" for q in table.outcome_names]
    cols = [pred.score, pred.n_predicting]
    if bootstrap:
        oob = out_of_bag_scores(model, table)
        header.insert(3, "oob_score")
        cols.append(oob.score)

    def row(i):
        vals = [table.type_ids[i], float(pred.score[i]), int(pred.n_predicting[i])]
        if bootstrap:
            vals.append(float(cols[2][i]))
        return vals + ["" if np.isnan(v) else float(v) for v in pred.prediction[i]]

    run.write("scores.csv", _rows_to_csv(header, (row(i) for i in range(len(table)))))
    run.write("forest.json", dumps_json(model.to_dict()))
    print(f"{model.M} trees, m = {m}; mean score {float(pred.score.mean()):.3f}")


def cmd_simulate(run: _Run, s: dict) -> None:
    from .simbench import SimConfig, config_dict, run_benchmark
    cfg = SimConfig(n=s["n"], reps=s["reps"], seed=s["seed"], units_per_type=s["units_per_type"])
    scales = parse_grid(s["scales"])
    grid = parse_grid(s["sigma2_grid"])
    report = run_benchmark(cfg, scales, grid, shrinkage=not s["no_shrinkage"], workers=s["threads"])
    run.write("bench.csv", report.to_csv())
    summary = {"config": config_dict(cfg), "scales": scales, "sigma2_grid": grid,
               "medians": report.medians(),
               "best_gaware": {str(sc): report.best_gaware(sc) for sc in scales}}
    run.write("summary.json", dumps_json(_finite_or_none(summary)))
    for sc in scales:
        s2, err = report.best_gaware(sc)
        plain = report.median_of("plain_tree", sc)
        print(f"scale {sc:g}: best G-aware error {err:.4g} (sigma2 {s2:g}) vs plain tree {plain:.4g}")


def _finite_or_none(obj):
    if isinstance(obj, dict):
        return {k: _finite_or_none(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite_or_none(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


HANDLERS = {"build-estimates": cmd_build_estimates, "fit": cmd_fit, "sweep": cmd_sweep,
            "infer": cmd_infer, "forest": cmd_forest, "simulate": cmd_simulate}


def _load_config(path) -> dict:
    if path is None:
        return {}
    if not os.path.exists(path):
        raise ValidationError(f"config file not found: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: malformed JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: expected a JSON object")
    return doc


def main(argv=None, environ=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:   # --help and --version
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        settings = resolve_settings(args.command, args, _load_config(args.config), environ)
        run = _Run(args.command, settings)
        HANDLERS[args.command](run, settings)
        run.finish()
    except (GAwareError, OSError) as exc:
        print(f"gaware {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception:  # noqa: BLE001 - anything else is a bug
        print(f"gaware {args.command}: internal error", file=sys.stderr)
        traceback.print_exc()
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
