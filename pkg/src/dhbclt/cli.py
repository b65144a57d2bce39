"""Command-line entry point: ``dhbclt {fit,simulate,eval,km}``.

Exit codes: 0 success, 2 input validation failure, 3 numerical failure.
"""
import argparse
import csv
import hashlib
import json
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .bpe import kaplan_meier
from .data import (adjusted_rand_index, homogeneous_scenario, load_cohort,
                   load_scenario, load_survival, membership_diff, project_out_covariates,
                   read_labels, simulate_cohort, two_cluster_scenario, write_cohort)
from .estimator import DHBCLT, dendrogram_to_dict
from .exceptions import CohortValidationError, NumericalFailure

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3

# config-file keys that are not estimator parameters
_ALIASES = {"seed": "random_state", "threads": "n_jobs"}
_RUN_KEYS = ("project_out", "drop_variable")

_PRESETS = {"two_cluster": two_cluster_scenario, "homogeneous": homogeneous_scenario}


class _InputError(Exception):
    def __init__(self, message, diagnostics=()):
        super().__init__(message)
        self.diagnostics = list(diagnostics)


def _to_json(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, (set, tuple)):
        return list(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _dump_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, default=_to_json)
        fh.write("\n")


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _report(exc, stream=None):
    stream = sys.stderr if stream is None else stream
    print(f"error: {exc}", file=stream)
    for line in getattr(exc, "diagnostics", ()):
        print(f"  {line}", file=stream)


def _write_km_csv(path, rows, group=None):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow((["group"] if group is not None else []) + ["time", "survival", "at_risk",
                                                                "events"])
        for g, table in rows:
            for t, s, n, e in table:
                w.writerow(([g] if group is not None else []) + [repr(t), repr(s), n, e])


# ---------------------------------------------------------------------------
# fit

def _read_config(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise _InputError(f"cannot read config {path}", [str(exc)]) from exc
    if not isinstance(cfg, dict):
        raise _InputError("config must be a flat JSON object", [f"{path}: top level is "
                                                                 f"{type(cfg).__name__}"])
    return cfg


def resolve_fit_config(args):
    """Merge defaults, the config file and command-line flags (flags win).

    Returns ``(estimator_params, run_options)``.
    """
    params = DHBCLT().get_params()
    run = {"project_out": [], "drop_variable": []}
    bad = []
    for key, value in _read_config(args.config).items():
        key = _ALIASES.get(key, key)
        if key in params:
            params[key] = value
        elif key in _RUN_KEYS:
            run[key] = [value] if isinstance(value, str) else list(value)
        else:
            bad.append(f"unknown config key {key!r}")
    if bad:
        raise _InputError("invalid config", bad)
    flags = {"max_clusters": args.max_clusters, "min_cluster_size": args.min_cluster_size,
             "random_state": args.seed, "n_jobs": args.threads,
             "grid_width": args.grid_width, "survival_model": args.survival_model,
             "split_init": args.split_init, "design": args.design}
    params.update({k: v for k, v in flags.items() if v is not None})
    if args.project_out:
        run["project_out"] = [c for c in args.project_out.split(",") if c]
    if args.drop_variable:
        run["drop_variable"] = list(args.drop_variable)
    try:
        DHBCLT(**params)._run_config()
    except (TypeError, ValueError) as exc:
        raise _InputError("invalid configuration", [str(exc)]) from exc
    return params, run


def _prepare_cohort(args, run):
    try:
        cohort = load_cohort(args.long, args.surv, args.covariates)
    except OSError as exc:
        raise _InputError("cannot read input", [str(exc)]) from exc
    if run["drop_variable"]:
        cohort = cohort.drop_variables(run["drop_variable"])
    if run["project_out"]:
        cohort = project_out_covariates(cohort, run["project_out"])
    return cohort


def _assignment_rows(est):
    ks = [rec["n_clusters"] for rec in est.history_]
    cols = {k: est.labels_for(k) for k in ks}
    header = ["subject_id", "cluster"] + [f"cluster_k{k}" for k in ks]
    rows = [[sid, int(est.labels_[i])] + [int(cols[k][i]) for k in ks]
            for i, sid in enumerate(est.subject_ids_)]
    return header, rows


def _manifest(args, params, run, cohort, status, started, result=None, warns=()):
    inputs = [args.long, *args.surv] + ([args.covariates] if args.covariates else [])
    if args.config:
        inputs.append(args.config)
    out = {
        "tool": "dhbclt",
        "version": __version__,
        "status": status,
        "command": "fit",
        "config": params,
        "alpha_grid_resolved": list(DHBCLT(**params)._run_config().alphas),
        "run_options": run,
        "seed": params["random_state"],
        "inputs": {str(p): _sha256(p) for p in inputs},
        "n_subjects": len(cohort),
        "variables": list(cohort.variable_names),
        "events": list(cohort.event_names),
    }
    if result is not None:
        out["min_cluster_size"] = result.min_cluster_size
        out["K"] = result.K
        out["alpha_trace"] = [{"alpha": r["alpha"], "objective": r["objective"],
                               "n_clusters": r["n_clusters"]} for r in result.per_alpha]
        out["accepted_splits"] = [{"alpha": r["alpha"], "objective": r["objective"],
                                   "n_clusters": r["n_clusters"], "split": r["split"]}
                                  for r in result.history]
    out["warnings"] = sorted(set(warns))
    out["wall_clock_seconds"] = round(time.perf_counter() - started, 3)
    return out


def cmd_fit(args):
    started = time.perf_counter()
    try:
        params, run = resolve_fit_config(args)
        cohort = _prepare_cohort(args, run)
    except (_InputError, CohortValidationError) as exc:
        _report(exc)
        return EXIT_INVALID
    est = DHBCLT(**params)
    out = Path(args.out)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            est.fit(cohort)
        except NumericalFailure as exc:
            _report(exc)
            out.mkdir(parents=True, exist_ok=True)
            partial = exc.partial
            if partial is not None:
                _dump_json(out / "dendrogram.json",
                           dendrogram_to_dict(partial.root, cohort.subject_ids))
            _dump_json(out / "manifest.json",
                       _manifest(args, params, run, cohort, "numerical_failure", started,
                                 partial, [str(w.message) for w in caught]))
            return EXIT_NUMERICAL
        except CohortValidationError as exc:
            _report(exc)
            return EXIT_INVALID
    out.mkdir(parents=True, exist_ok=True)
    header, rows = _assignment_rows(est)
    with open(out / "assignments.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    _dump_json(out / "dendrogram.json", est.dendrogram_dict())
    _dump_json(out / "params.json", {
        "clusters": [{"cluster": k, "size": est.cluster_sizes_[k], **p.to_dict()}
                     for k, p in est.cluster_params_.items()],
        "grids": {e: list(g.cuts) for e, g in zip(cohort.event_names, est.grids_)},
        "variables": list(cohort.variable_names),
    })
    single = len(cohort.event_names) == 1
    for k in est.cluster_params_:
        sub = cohort.subset(np.flatnonzero(est.labels_ == k))
        for e in cohort.event_names:
            name = f"km_{k}.csv" if single else f"km_{k}_{e}.csv"
            _write_km_csv(out / name, [(None, kaplan_meier(sub.records(e)))])
    _dump_json(out / "manifest.json",
               _manifest(args, params, run, cohort, "ok", started, est.result_,
                         [str(w.message) for w in caught]))
    print(f"clusters={est.n_clusters_} min_cluster_size={est.min_cluster_size_} out={out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate / eval / km

def cmd_simulate(args):
    try:
        if args.scenario in _PRESETS:
            scenario = _PRESETS[args.scenario](seed=args.seed)
        else:
            scenario = load_scenario(args.scenario)
            if args.seed is not None:
                scenario = type(scenario).from_dict({**scenario.to_dict(), "seed": args.seed})
    except (OSError, ValueError, KeyError, TypeError) as exc:
        _report(_InputError(f"invalid scenario {args.scenario}", [repr(exc)]))
        return EXIT_INVALID
    cohort, labels = simulate_cohort(scenario)
    out = Path(args.out)
    write_cohort(cohort, out, labels)
    _dump_json(out / "scenario.json", scenario.to_dict())
    print(f"subjects={len(cohort)} out={out}")
    return EXIT_OK


def cmd_eval(args):
    try:
        pred = read_labels(args.pred)
        truth = read_labels(args.truth)
        count, frac = membership_diff(pred, truth)
    except (OSError, CohortValidationError) as exc:
        _report(exc)
        return EXIT_INVALID
    keys = sorted(truth)
    ari = adjusted_rand_index([pred[k] for k in keys], [truth[k] for k in keys])
    print(f"ari={ari!r}")
    print(f"diff_count={count}")
    print(f"diff_fraction={frac!r}")
    return EXIT_OK


def cmd_km(args):
    try:
        ids, t, d = load_survival(args.surv)
        groups = read_labels(args.groups) if args.groups else None
        if groups is not None and set(groups) != set(ids):
            raise CohortValidationError("groups and survival cover different subjects",
                                        [f"subject {s}: in only one file"
                                         for s in sorted(set(groups) ^ set(ids))[:20]])
    except (OSError, CohortValidationError) as exc:
        _report(exc)
        return EXIT_INVALID
    records = list(zip(ids, t, d))
    if groups is None:
        tables = [("all", kaplan_meier(records))]
    else:
        labs = sorted(set(groups.values()), key=lambda g: (len(g), g))
        tables = [(g, kaplan_meier([r for r in records if groups[r[0]] == g])) for g in labs]
    _write_km_csv(args.out, tables, group=True)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="dhbclt", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="cluster a cohort")
    f.add_argument("--long", required=True, help="longitudinal CSV")
    f.add_argument("--surv", required=True, action="append",
                   help="survival CSV (repeat for several event variables)")
    f.add_argument("--covariates", help="static covariates CSV (subject_id, ...)")
    f.add_argument("--config", help="flat JSON config; flags override it")
    f.add_argument("--project-out", help="comma-separated covariates to project out")
    f.add_argument("--drop-variable", action="append",
                   help="refit without this longitudinal variable (repeatable)")
    f.add_argument("--out", required=True, help="output directory")
    f.add_argument("--max-clusters", type=int)
    f.add_argument("--min-cluster-size", type=int)
    f.add_argument("--seed", type=int)
    f.add_argument("--threads", type=int)
    f.add_argument("--grid-width", type=float)
    f.add_argument("--survival-model", choices=("bpe", "weibull"))
    f.add_argument("--split-init", choices=("two_means", "two_medoids"))
    f.add_argument("--design", choices=("linear", "quadratic", "linear_slope"))
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="write a synthetic cohort")
    s.add_argument("--scenario", required=True,
                   help=f"scenario JSON, or a preset: {', '.join(_PRESETS)}")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("eval", help="compare two label files")
    e.add_argument("--pred", required=True)
    e.add_argument("--truth", required=True)
    e.set_defaults(func=cmd_eval)

    k = sub.add_parser("km", help="Kaplan-Meier tables")
    k.add_argument("--surv", required=True)
    k.add_argument("--groups", help="labels CSV (subject_id, cluster)")
    k.add_argument("--out", required=True)
    k.set_defaults(func=cmd_km)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "simulate" and args.scenario in _PRESETS and args.seed is None:
        args.seed = 0
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
