"""Command-line pipeline: simulate, ingest, fit, classify, analyze.

Every command checks its inputs before writing anything and leaves a
``manifest.json`` in its output directory listing config hashes, input and
output digests and per-test outcomes. Timestamps appear only there.

Exit codes: 0 success, 1 usage error, 2 input schema error, 3 every
estimation failed.
"""
from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from . import config as cfgmod
from .cohort import (PARAMETERS, MissingMode, ParamTriple, abs_diff_stat, clustered_bootstrap,
                     group_means, separation_check)
from .diagnosis import classify_hba1c, classify_ogtt
from .estimator import (EstimationConfig, EstimationError, chain_diagnostics, run_estimation,
                        write_traces)
from .ingestion import SchemaViolation, apply_inclusion_rules, parse_cohort, write_cohort
from .plotting import scatter_svg
from .synth import SynthSpec, generate_cohort, write_truth

log = logging.getLogger("ogtt_da")

EXIT_OK, EXIT_USAGE, EXIT_SCHEMA, EXIT_FIT = 0, 1, 2, 3
MODES = {"with-insulin": True, "without-insulin": False}
MODE_ORDER = ("with-insulin", "without-insulin")
ESTIMATE_COLUMNS = ("patient_id", "test_date", "mode", "status", "sigma", "SI", "sigma_SI",
                    "selected_chain", "mse", "rhat_sigma", "rhat_SI", "acceptance_rate")


class InputError(Exception):
    """Bad input file contents; maps to exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


class Manifest:
    def __init__(self, command: str, out_dir: Path):
        self.out_dir = out_dir
        self.doc = {"tool": "ogtt_da", "version": __version__, "command": command,
                    "started_at": _now(), "config_hashes": {}, "inputs": {}, "outputs": {},
                    "seed": None, "per_test": []}

    def add_input(self, path) -> None:
        self.doc["inputs"][Path(path).name] = cfgmod.file_digest(path)

    def write(self) -> None:
        outputs = {}
        for p in sorted(self.out_dir.rglob("*")):
            if p.is_file() and p.name != "manifest.json":
                outputs[p.relative_to(self.out_dir).as_posix()] = cfgmod.file_digest(p)
        self.doc["outputs"] = outputs
        self.doc["finished_at"] = _now()
        _write_json(self.out_dir / "manifest.json", self.doc)


def _load_cohort(path):
    """Parse a cohort that must be clean (the output of ``ingest``)."""
    try:
        res = parse_cohort(path)
    except (OSError, SchemaViolation) as exc:
        raise InputError(str(exc)) from exc
    if res.errors:
        first = res.errors[0]
        raise InputError(f"{path}: line {first.line}: {first.message} "
                         f"({len(res.errors)} row errors; run ingest first)")
    return res


def _load_params(path):
    try:
        return cfgmod.load_model_params(path)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise InputError(f"model parameters: {exc}") from exc


# ---------------------------------------------------------------- simulate

def cmd_simulate(args) -> int:
    try:
        spec = SynthSpec.load(args.spec)
    except (OSError, ValueError, TypeError, KeyError) as exc:
        raise InputError(f"{args.spec}: {exc}") from exc
    params, params_hash = _load_params(args.params)
    out = _out_dir(args.out)
    man = Manifest("simulate", out)
    man.add_input(args.spec)
    if args.params:
        man.add_input(args.params)
    man.doc["config_hashes"] = {"model_params": params_hash, "synth_spec": cfgmod.digest(spec.to_dict())}
    man.doc["seed"] = spec.seed
    records, truth, hba1c = generate_cohort(spec, params)
    write_cohort(records, out / "cohort.csv", hba1c)
    write_truth(truth, out / "truth.csv")
    man.doc["per_test"] = [{"patient_id": t.patient_id, "test_date": t.test_date.isoformat(),
                            "archetype": t.archetype} for t in truth]
    man.write()
    print(f"wrote {len(records)} tests for {spec.n_patients} patients to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- ingest

def cmd_ingest(args) -> int:
    try:
        res = parse_cohort(args.input)
    except OSError as exc:
        raise InputError(str(exc)) from exc
    except SchemaViolation as exc:
        raise InputError(f"schema violation: {exc}") from exc
    kwargs = {"patterns": tuple(args.pattern)} if args.pattern else {}
    retained, report = apply_inclusion_rules(res.records, min_tests=args.min_tests, **kwargs)
    out = _out_dir(args.out)
    man = Manifest("ingest", out)
    man.add_input(args.input)
    kept = {r.key for r in retained}
    hba1c = [h for h in res.hba1c if h.patient_id in {k[0] for k in kept}]
    write_cohort(retained, out / "cohort.csv", hba1c)
    (out / "filter_report.json").write_text(report.to_json(), encoding="utf-8")
    _write_csv(out / "ingest_diagnostics.csv", ("line", "severity", "message"),
               [(d.line, d.severity, d.message) for d in res.diagnostics])
    man.doc["per_test"] = [{"patient_id": p, "test_date": d, "outcome": o} for p, d, o in report.outcomes]
    man.write()
    for d in res.diagnostics:
        log.warning("line %d: %s: %s", d.line, d.severity, d.message)
    print(f"retained {report.retained_tests}/{report.input_tests} tests "
          f"from {report.retained_patients}/{report.input_patients} patients")
    return EXIT_OK


# ---------------------------------------------------------------- fit

def seed_key_for(patient_id: str, test_date: dt.date, mode: str) -> tuple:
    """Stable integer key per (test, mode), independent of cohort order."""
    h = hashlib.sha256(f"{patient_id}|{test_date.isoformat()}".encode("utf-8")).digest()
    return (int.from_bytes(h[:4], "big"), int.from_bytes(h[4:8], "big"), MODE_ORDER.index(mode))


def _fit_one(job):
    """Worker: estimate one (test, mode). Returns a plain row dict and chains."""
    pid, date, mode, obs, cfg, params, want_traces = job
    cfg = cfg.with_(include_insulin=MODES[mode])
    row = {"patient_id": pid, "test_date": date.isoformat(), "mode": mode}
    try:
        res = run_estimation(obs, cfg, params, seed_key=seed_key_for(pid, date, mode))
    except (EstimationError, ValueError, ArithmeticError) as exc:
        row.update(status="failed", error=str(exc))
        return row, None
    sel = res.selected_chain
    rhat = chain_diagnostics(res.chains, cfg.burn_in).rhat if len(res.chains) > 1 else {}
    row.update(status="ok", sigma=res.sigma, SI=res.SI, sigma_SI=res.sigma_SI, selected_chain=sel,
               mse=res.chain_mse[sel], rhat_sigma=rhat.get("sigma"), rhat_SI=rhat.get("SI"),
               acceptance_rate=res.chains[sel].acceptance_rate, config_hash=res.config_hash)
    return row, (res.chains if want_traces else None)


def _estimation_config(args) -> tuple[EstimationConfig, str]:
    try:
        doc = cfgmod.load_estimation_document(args.config)
        cfg = EstimationConfig.from_document(doc)
        overrides = {}
        if args.seed is not None:
            overrides["rng_seed"] = args.seed
        if args.n_iter is not None:
            overrides["n_iter"] = args.n_iter
            overrides["burn_in"] = args.burn_in if args.burn_in is not None else args.n_iter // 2
        elif args.burn_in is not None:
            overrides["burn_in"] = args.burn_in
        cfg = cfg.with_(**overrides)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise InputError(f"estimation config: {exc}") from exc
    return cfg, cfg.hash


def cmd_fit(args) -> int:
    cohort = _load_cohort(args.cohort)
    cfg, cfg_hash = _estimation_config(args)
    params, params_hash = _load_params(args.params)
    modes = list(MODE_ORDER) if args.mode == "both" else [args.mode]
    out = _out_dir(args.out)
    man = Manifest("fit", out)
    man.add_input(args.cohort)
    man.doc["config_hashes"] = {"model_params": params_hash, "estimation_config": cfg_hash}
    man.doc["seed"] = cfg.rng_seed
    man.doc["modes"] = modes

    jobs = []
    for r in sorted(cohort.records, key=lambda r: r.key):
        for mode in modes:
            if MODES[mode] and not r.has_insulin:
                continue
            jobs.append((r.patient_id, r.test_date, mode, r.observation(), cfg, params, args.traces))
    if not jobs:
        raise InputError(f"{args.cohort}: no tests to fit in mode {args.mode}")

    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_fit_one, jobs))
    else:
        results = [_fit_one(j) for j in jobs]

    rows = []
    if args.traces:
        (out / "traces").mkdir(exist_ok=True)
    for row, chains in results:
        rows.append([row["patient_id"], row["test_date"], row["mode"], row["status"]]
                    + [_fmt(row.get(k)) for k in ("sigma", "SI", "sigma_SI")]
                    + [str(row.get("selected_chain", ""))]
                    + [_fmt(row.get(k)) for k in ("mse", "rhat_sigma", "rhat_SI", "acceptance_rate")])
        outcome = {k: row[k] for k in ("patient_id", "test_date", "mode", "status")}
        if row["status"] != "ok":
            outcome["error"] = row["error"]
            log.warning("%s %s %s failed: %s", row["patient_id"], row["test_date"], row["mode"], row["error"])
        man.doc["per_test"].append(outcome)
        if chains is not None:
            write_traces(chains, out / "traces" / f"{row['patient_id']}_{row['test_date']}_{row['mode']}.csv")
    _write_csv(out / "estimates.csv", ESTIMATE_COLUMNS, rows)
    n_ok = sum(1 for row, _ in results if row["status"] == "ok")
    man.doc["n_ok"], man.doc["n_failed"] = n_ok, len(results) - n_ok
    man.write()
    print(f"fitted {n_ok}/{len(results)} (test, mode) pairs")
    return EXIT_OK if n_ok else EXIT_FIT


# ---------------------------------------------------------------- classify

def cmd_classify(args) -> int:
    cohort = _load_cohort(args.cohort)
    out = _out_dir(args.out)
    man = Manifest("classify", out)
    man.add_input(args.cohort)
    rows = []
    for r in sorted(cohort.records, key=lambda r: r.key):
        try:
            cls = classify_ogtt(r).label
        except ValueError as exc:
            cls = ""
            log.warning("%s %s: %s", r.patient_id, r.test_date, exc)
        hb_cls = classify_hba1c(r.hba1c).label if r.hba1c is not None else ""
        rows.append((r.patient_id, r.test_date.isoformat(), cls, _fmt(r.hba1c), hb_cls))
        man.doc["per_test"].append({"patient_id": r.patient_id, "test_date": r.test_date.isoformat(),
                                    "ogtt_class": cls})
    _write_csv(out / "classes.csv", ("patient_id", "test_date", "ogtt_class", "hba1c", "hba1c_class"), rows)
    _write_csv(out / "hba1c_classes.csv", ("patient_id", "date", "hba1c", "hba1c_class"),
               [(h.patient_id, h.date.isoformat(), _fmt(h.value), classify_hba1c(h.value).label)
                for h in cohort.hba1c])
    man.write()
    print(f"classified {len(rows)} tests")
    return EXIT_OK


# ---------------------------------------------------------------- analyze

def read_estimates(path) -> dict:
    """mode -> {(patient_id, date): ParamTriple} for successful rows."""
    out: dict = {}
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != ESTIMATE_COLUMNS:
                raise InputError(f"{path}: header must be {','.join(ESTIMATE_COLUMNS)}")
            for row in reader:
                if row["mode"] not in MODES:
                    raise InputError(f"{path}: line {reader.line_num}: unknown mode {row['mode']!r}")
                if row["status"] != "ok":
                    continue
                key = (row["patient_id"], dt.date.fromisoformat(row["test_date"]))
                out.setdefault(row["mode"], {})[key] = ParamTriple.of(float(row["sigma"]), float(row["SI"]))
    except OSError as exc:
        raise InputError(str(exc)) from exc
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from exc
    return out


def _pattern(text: str) -> tuple:
    try:
        times = tuple(int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of minutes: {text!r}") from None
    if 0 not in times:
        raise argparse.ArgumentTypeError("a pattern must include the fasting draw (0)")
    return times


def _year_fraction(d: dt.date) -> float:
    start = dt.date(d.year, 1, 1)
    days = (dt.date(d.year + 1, 1, 1) - start).days
    return d.year + (d - start).days / days


def cmd_analyze(args) -> int:
    est = read_estimates(args.estimates)
    cohort = _load_cohort(args.cohort)
    if not est:
        raise InputError(f"{args.estimates}: no successful estimates")
    out = _out_dir(args.out)
    man = Manifest("analyze", out)
    man.add_input(args.estimates)
    man.add_input(args.cohort)
    man.doc["seed"] = args.seed
    records = {r.key: r for r in cohort.records}
    classes = {}
    for key, r in records.items():
        try:
            classes[key] = classify_ogtt(r)
        except ValueError:
            pass
    summary = {"n_boot": args.n_boot, "seed": args.seed, "modes": sorted(est), "warnings": []}

    # robustness of each parameter to dropping insulin
    if all(m in est for m in MODE_ORDER):
        w, wo = est["with-insulin"], est["without-insulin"]
        common = sorted(set(w) & set(wo))
        try:
            if len(common) < 2:
                raise MissingMode("fewer than two tests fitted in both modes")
            diffs = abs_diff_stat({k: w[k] for k in common}, {k: wo[k] for k in common})
            values = {name: [diffs[k][name] for k in common] for name in PARAMETERS}
            boot = clustered_bootstrap(values, [k[0] for k in common], args.n_boot, args.seed)
            (out / "bootstrap_summary.csv").write_text(boot.to_csv(), encoding="utf-8")
            summary["bootstrap"] = boot.to_dict()
        except (MissingMode, ValueError) as exc:
            summary["warnings"].append(f"bootstrap skipped: {exc}")
    else:
        missing = [m for m in MODE_ORDER if m not in est]
        summary["warnings"].append(f"bootstrap skipped: no estimates for {', '.join(missing)}")

    # group means per mode
    gm = group_means({m: list(est[m].values()) for m in MODE_ORDER if m in est})
    modes = [m for m in MODE_ORDER if m in gm]
    _write_csv(out / "group_means.csv", ["parameter"] + [f"mean_{m.replace('-', '_')}" for m in modes],
               [[name] + [_fmt(gm[m][name]) for m in modes] for name in PARAMETERS])
    summary["group_means"] = gm

    # per-patient separation of classes and the plots
    plot_mode = "without-insulin" if "without-insulin" in est else "with-insulin"
    plot_param = args.parameter
    sep = {}
    (out / "plots").mkdir(exist_ok=True)
    patients = sorted({k[0] for m in est for k in est[m]})
    for pid in patients:
        sep[pid] = {}
        for mode in modes:
            keys = sorted(k for k in est[mode] if k[0] == pid and k in classes)
            sep[pid][mode] = {name: separation_check([est[mode][k].get(name) for k in keys],
                                                     [classes[k] for k in keys]).to_dict()
                              for name in PARAMETERS}
        keys = sorted(k for k in est[plot_mode] if k[0] == pid)
        pts, hb, rows = [], [], []
        for i, k in enumerate(keys):
            x = _year_fraction(k[1])
            cls = classes.get(k)
            val = est[plot_mode][k].get(plot_param)
            if cls is not None:
                pts.append((x, val, cls))
            r = records.get(k)
            hv = r.hba1c if r is not None else None
            if hv is not None:
                hb.append((x, hv, classify_hba1c(hv)))
            rows.append((pid, i, k[1].isoformat(), repr(x), plot_mode, plot_param, _fmt(val),
                         cls.label if cls is not None else "", _fmt(hv),
                         classify_hba1c(hv).label if hv is not None else ""))
        _write_csv(out / "plots" / f"{pid}.csv",
                   ("patient_id", "test_index", "test_date", "year", "mode", "parameter", "value",
                    "ogtt_class", "hba1c", "hba1c_class"), rows)
        if pts or hb:
            svg = scatter_svg(pts, hb, title=f"{pid}: HbA1c and {plot_param} by year ({plot_mode})",
                              y_label=plot_param)
            (out / "plots" / f"{pid}.svg").write_text(svg, encoding="utf-8")
    _write_json(out / "separation.json", sep)
    summary["separation_counts"] = {
        mode: {name: _count_verdicts(sep, mode, name) for name in PARAMETERS} for mode in modes}
    _write_json(out / "summary.json", summary)
    for w in summary["warnings"]:
        log.warning("%s", w)
    man.write()
    print(f"analyzed {sum(len(v) for v in est.values())} estimates for {len(patients)} patients")
    return EXIT_OK


def _count_verdicts(sep, mode, name) -> dict:
    counts: dict = {}
    for per_mode in sep.values():
        if mode in per_mode:
            v = per_mode[mode][name]["verdict"]
            counts[v] = counts.get(v, 0) + 1
    return dict(sorted(counts.items()))


# ---------------------------------------------------------------- entry point

def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="ogtt-da", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log warnings to stderr")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate a synthetic cohort with known parameters")
    p.add_argument("spec", help="SynthSpec JSON file")
    p.add_argument("--params", help="model parameter document (default: packaged nominal values)")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("ingest", help="validate a cohort CSV and apply the inclusion rules")
    p.add_argument("input")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--pattern", action="append", type=_pattern, metavar="T0,T1,...",
                   help="accepted glucose timepoint pattern; repeatable (default 0,30,120 and 0,60,120)")
    p.add_argument("--min-tests", type=int, default=2)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("fit", help="estimate sigma and S_I for every test")
    p.add_argument("cohort")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--config", help=f"estimation config document (default: ${cfgmod.CONFIG_DIR_ENV} or packaged)")
    p.add_argument("--params", help="model parameter document")
    p.add_argument("--mode", choices=("with-insulin", "without-insulin", "both"), default="both")
    p.add_argument("--seed", type=int, help="overrides the config rng_seed")
    p.add_argument("--n-iter", type=int, help="overrides n_iter (burn-in defaults to half)")
    p.add_argument("--burn-in", type=int)
    p.add_argument("--traces", action="store_true", help="write per-test chain traces")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("classify", help="disease class per OGTT and per HbA1c value")
    p.add_argument("cohort")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("analyze", help="robustness bootstrap, group means, separation and plots")
    p.add_argument("estimates")
    p.add_argument("cohort")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--n-boot", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--parameter", choices=PARAMETERS, default="sigma_SI", help="parameter to plot")
    p.set_defaults(func=cmd_analyze)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.verbose else logging.ERROR,
                        format="%(levelname)s: %(message)s")
    if getattr(args, "jobs", 1) < 1 or getattr(args, "n_boot", 2) < 2:
        ap.error("--jobs must be >= 1 and --n-boot >= 2")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"ogtt-da: {exc}", file=sys.stderr)
        return EXIT_SCHEMA


if __name__ == "__main__":
    sys.exit(main())
