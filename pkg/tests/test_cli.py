import csv
import json
from pathlib import Path

import pytest

from ogtt_da.cli import ESTIMATE_COLUMNS, EXIT_FIT, EXIT_OK, EXIT_SCHEMA, EXIT_USAGE, build_parser, main

DATA = Path(__file__).parent / "data"
TIMESTAMPS = ("started_at", "finished_at")


def run_pipeline(root: Path, spec: dict, n_iter=200, n_boot=100, mode="both") -> Path:
    root.mkdir(parents=True, exist_ok=True)
    (root / "spec.json").write_text(json.dumps(spec))
    steps = [
        ["simulate", str(root / "spec.json"), "-o", str(root / "sim")],
        ["ingest", str(root / "sim" / "cohort.csv"), "-o", str(root / "ing")],
        ["fit", str(root / "ing" / "cohort.csv"), "-o", str(root / "fit"), "--n-iter", str(n_iter),
         "--mode", mode, "--seed", "5"],
        ["classify", str(root / "ing" / "cohort.csv"), "-o", str(root / "cls")],
        ["analyze", str(root / "fit" / "estimates.csv"), str(root / "ing" / "cohort.csv"),
         "-o", str(root / "an"), "--n-boot", str(n_boot), "--seed", "1"],
    ]
    for argv in steps:
        assert main(argv) == EXIT_OK, argv
    return root


def tree(root: Path) -> dict:
    """relpath -> bytes, with manifest timestamps removed."""
    out = {}
    for p in sorted(root.rglob("*")):
        if not p.is_file():
            continue
        rel = p.relative_to(root).as_posix()
        if p.name == "manifest.json":
            doc = json.loads(p.read_text())
            for k in TIMESTAMPS:
                assert k in doc
                doc.pop(k)
            out[rel] = json.dumps(doc, sort_keys=True).encode()
        else:
            out[rel] = p.read_bytes()
    return out


SPEC = {"n_patients": 3, "noise_sd_glucose": 5, "noise_sd_insulin": 2, "hba1c_prob": 0.5,
        "insulin_missing_prob": 0.2, "seed": 3}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("run"), SPEC)


def test_end_to_end_deterministic(pipeline, tmp_path):
    again = run_pipeline(tmp_path / "again", SPEC)
    a, b = tree(pipeline), tree(again)
    assert sorted(a) == sorted(b)
    assert all(a[k] == b[k] for k in a)


def test_manifest_lists_every_output(pipeline):
    for step in ("sim", "ing", "fit", "cls", "an"):
        d = pipeline / step
        man = json.loads((d / "manifest.json").read_text())
        files = {p.relative_to(d).as_posix() for p in d.rglob("*") if p.is_file() and p.name != "manifest.json"}
        assert set(man["outputs"]) == files
        assert man["version"] and man["inputs"]
    fit = json.loads((pipeline / "fit" / "manifest.json").read_text())
    assert set(fit["config_hashes"]) == {"model_params", "estimation_config"}
    assert fit["seed"] == 5


def test_estimates_one_row_per_test_and_mode(pipeline):
    with open(pipeline / "fit" / "estimates.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == ESTIMATE_COLUMNS
    with open(pipeline / "ing" / "cohort.csv", newline="") as fh:
        cohort = list(csv.DictReader(fh))
    tests = {(r["patient_id"], r["test_date"]) for r in cohort if r["assay"] == "glucose"}
    with_ins = {(r["patient_id"], r["test_date"]) for r in cohort if r["assay"] == "insulin"}
    got = [(r["patient_id"], r["test_date"], r["mode"]) for r in rows]
    assert len(got) == len(set(got))
    assert {(p, d) for p, d, m in got if m == "without-insulin"} == tests
    assert {(p, d) for p, d, m in got if m == "with-insulin"} == with_ins
    assert got == sorted(got)
    assert all(r["status"] == "ok" for r in rows)


def test_analyze_outputs(pipeline):
    an = pipeline / "an"
    lines = (an / "bootstrap_summary.csv").read_text().splitlines()
    assert lines[0] == "parameter,mean,se,ci_lo,ci_hi"
    gm = (an / "group_means.csv").read_text().splitlines()
    assert gm[0] == "parameter,mean_with_insulin,mean_without_insulin"
    assert all(len(ln.split(",")) == 3 and "," in ln and ln.split(",")[2] for ln in gm[1:])
    summary = json.loads((an / "summary.json").read_text())
    assert summary["n_boot"] == 100 and summary["warnings"] == []
    sep = json.loads((an / "separation.json").read_text())
    assert set(sep) == {"P001", "P002", "P003"}


def test_analyze_single_mode_degrades(tmp_path):
    root = run_pipeline(tmp_path, {**SPEC, "n_patients": 2}, mode="without-insulin")
    an = root / "an"
    assert not (an / "bootstrap_summary.csv").exists()
    summary = json.loads((an / "summary.json").read_text())
    assert any("bootstrap skipped" in w for w in summary["warnings"])
    assert (an / "group_means.csv").read_text().splitlines()[0] == "parameter,mean_without_insulin"


def test_nine_patients_nine_svgs(tmp_path):
    root = run_pipeline(tmp_path, {"n_patients": 9, "seed": 8, "hba1c_prob": 1.0}, n_iter=60, n_boot=20,
                        mode="without-insulin")
    plots = root / "an" / "plots"
    assert len(list(plots.glob("*.svg"))) == 9 and len(list(plots.glob("*.csv"))) == 9
    assert len(list((root / "an").glob("*.json"))) == 3  # summary, separation, manifest
    assert (root / "an" / "summary.json").exists()


def test_default_n_boot_is_1000():
    args = build_parser().parse_args(["analyze", "e.csv", "c.csv", "-o", "x"])
    assert args.n_boot == 1000
    assert build_parser().parse_args(["fit", "c.csv", "-o", "x"]).mode == "both"


def test_usage_errors_exit_1(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(["fit", "c.csv", "-o", str(tmp_path), "--mode", "sideways"])
    assert exc.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(["analyze", "e.csv", "c.csv", "-o", str(tmp_path), "--n-boot", "1"])
    assert exc.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(["ingest", "x.csv", "-o", str(tmp_path), "--pattern", "30,120"])
    assert exc.value.code == EXIT_USAGE


def test_schema_error_exit_2_writes_nothing(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("who,when,what\n1,2,3\n")
    out = tmp_path / "out"
    assert main(["ingest", str(bad), "-o", str(out)]) == EXIT_SCHEMA
    assert not out.exists() or not any(out.iterdir())
    assert main(["ingest", str(tmp_path / "missing.csv"), "-o", str(out)]) == EXIT_SCHEMA


def test_fit_rejects_uncleaned_cohort(tmp_path):
    # the violations fixture has row errors, so fit must refuse it before writing
    out = tmp_path / "fit"
    assert main(["fit", str(DATA / "violations.csv"), "-o", str(out), "--n-iter", "20"]) == EXIT_SCHEMA
    assert not out.exists() or not any(out.iterdir())


def test_ingest_fixture_report(tmp_path):
    assert main(["ingest", str(DATA / "violations.csv"), "-o", str(tmp_path)]) == EXIT_OK
    report = json.loads((tmp_path / "filter_report.json").read_text())
    assert report["retained_tests"] == 8


def test_all_fits_failing_exits_3(tmp_path, monkeypatch):
    import ogtt_da.cli as cli
    from ogtt_da.estimator import EstimationError

    def fail(*a, **k):
        raise EstimationError("no finite posterior")
    monkeypatch.setattr(cli, "run_estimation", fail)
    root = tmp_path
    (root / "spec.json").write_text(json.dumps({"n_patients": 2, "seed": 1}))
    assert main(["simulate", str(root / "spec.json"), "-o", str(root / "sim")]) == EXIT_OK
    assert main(["fit", str(root / "sim" / "cohort.csv"), "-o", str(root / "fit"), "--n-iter", "20"]) == EXIT_FIT
    man = json.loads((root / "fit" / "manifest.json").read_text())
    assert man["n_ok"] == 0 and all(t["status"] == "failed" for t in man["per_test"])
