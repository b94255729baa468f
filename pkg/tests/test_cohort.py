import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ogtt_da.cohort import (BootstrapSummary, MissingMode, ParamTriple, Separation, ZeroVariance,
                            abs_diff_stat, bootstrap_mean, cluster_replicates, clustered_bootstrap,
                            group_means, separation_check, standardize)
from ogtt_da.diagnosis import DiseaseClass

N, IMP, DM = DiseaseClass.NORMAL, DiseaseClass.IMPAIRED_GLUCOSE, DiseaseClass.DIABETES


def test_standardize_small():
    np.testing.assert_allclose(standardize([1.0, 2.0, 3.0]), [-1.0, 0.0, 1.0])
    with pytest.raises(ZeroVariance):
        standardize([2.0, 2.0, 2.0])


@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=30))
@settings(max_examples=50, deadline=None)
def test_standardize_moments(xs):
    x = np.array(xs)
    if x.std(ddof=1) < 1e-6:
        return
    z = standardize(x)
    assert abs(z.mean()) < 1e-9 and z.std(ddof=1) == pytest.approx(1.0, rel=1e-9)


def test_abs_diff_three_tests_by_hand():
    w = {"a": ParamTriple.of(1.0, 1.0), "b": ParamTriple.of(2.0, 2.0), "c": ParamTriple.of(3.0, 1.0)}
    wo = {"a": ParamTriple.of(2.0, 1.0), "b": ParamTriple.of(2.0, 1.0), "c": ParamTriple.of(4.0, 1.0)}
    d = abs_diff_stat(w, wo)
    # sigma column pooled: [1, 2, 3, 2, 2, 4], mean 7/3, sd sqrt(16/15)
    sd = math.sqrt(16 / 15)
    assert d["a"]["sigma"] == pytest.approx(1 / sd)
    assert d["b"]["sigma"] == pytest.approx(0.0)
    assert d["c"]["sigma"] == pytest.approx(1 / sd)
    # SI column pooled: [1, 2, 1, 1, 1, 1], sd sqrt(1/6)
    assert d["b"]["SI"] == pytest.approx(1 / math.sqrt(1 / 6))
    # product column pooled: [1, 4, 3, 2, 2, 4], mean 8/3
    sd_p = np.std([1, 4, 3, 2, 2, 4], ddof=1)
    assert d["a"]["sigma_SI"] == pytest.approx(1 / sd_p)
    assert d["b"]["sigma_SI"] == pytest.approx(2 / sd_p)
    assert list(d) == ["a", "b", "c"]


def test_abs_diff_requires_matching_tests():
    w = {"a": ParamTriple.of(1, 1), "b": ParamTriple.of(2, 2)}
    with pytest.raises(MissingMode):
        abs_diff_stat(w, {"a": ParamTriple.of(1, 1)})


def test_param_triple_consistency():
    with pytest.raises(ValueError):
        ParamTriple(2.0, 3.0, 7.0)


def test_cluster_integrity():
    ids = ["p1", "p1", "p2", "p3", "p3", "p3", "p4"]
    members = {"p1": [0, 1], "p2": [2], "p3": [3, 4, 5], "p4": [6]}
    uniq = sorted(members)
    rng = np.random.default_rng(0)
    for drawn, idx in cluster_replicates(ids, 200, rng):
        assert len(drawn) == 4
        expected = np.concatenate([members[uniq[j]] for j in drawn])
        assert np.array_equal(idx, expected)


def test_bootstrap_se_matches_cluster_formula():
    # one test per patient: cluster bootstrap SE -> sd/sqrt(n) * sqrt((n-1)/n)
    rng = np.random.default_rng(5)
    x = rng.normal(size=60)
    stat = bootstrap_mean(x, list(range(60)), 4000, np.random.default_rng(1))
    expected = x.std(ddof=0) / math.sqrt(60)
    assert stat.se == pytest.approx(expected, rel=0.08)
    assert stat.ci_lo < x.mean() < stat.ci_hi


def test_bootstrap_ci_coverage():
    # clustered population with known mean 1.0; tests within a patient are correlated
    hits = 0
    for rep in range(100):
        rng = np.random.default_rng([77, rep])
        ids, vals = [], []
        for p in range(40):
            u = rng.normal(0.0, 0.5)
            for _ in range(rng.integers(1, 4)):
                ids.append(p)
                vals.append(1.0 + u + rng.normal(0.0, 0.3))
        s = clustered_bootstrap({"x": vals}, ids, n_boot=400, seed=rep)
        hits += s.stats["x"].ci_lo <= 1.0 <= s.stats["x"].ci_hi
    assert hits >= 90


def test_bootstrap_reproducible_and_shaped():
    ids = ["a", "a", "b", "c", "c", "d"]
    vals = {"sigma": [1, 2, 3, 4, 5, 6], "SI": [6, 5, 4, 3, 2, 1], "sigma_SI": [1, 1, 2, 2, 3, 3]}
    a = clustered_bootstrap(vals, ids, n_boot=300, seed=11)
    b = clustered_bootstrap(vals, ids, n_boot=300, seed=11)
    assert a.to_csv() == b.to_csv()
    lines = a.to_csv().splitlines()
    assert lines[0] == "parameter,mean,se,ci_lo,ci_hi"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["sigma", "SI", "sigma_SI"]
    assert a.n_patients == 4 and a.n_tests == 6
    assert clustered_bootstrap(vals, ids, n_boot=300, seed=12).to_csv() != a.to_csv()
    assert BootstrapSummary.COLUMNS == ("parameter", "mean", "se", "ci_lo", "ci_hi")


def test_bootstrap_hook_sees_every_replicate():
    seen = []
    clustered_bootstrap({"x": [1.0, 2.0, 3.0]}, ["a", "b", "b"], n_boot=25, seed=0,
                        on_replicate=lambda name, drawn, idx: seen.append(name))
    assert seen == ["x"] * 25


def test_group_means_table_layout():
    est = {"with-insulin": [ParamTriple.of(1000, 0.5), ParamTriple.of(2000, 1.0)],
           "without-insulin": [ParamTriple.of(3000, 0.25), ParamTriple.of(1000, 1.0)]}
    gm = group_means(est)
    assert gm["with-insulin"] == {"sigma": 1500.0, "SI": 0.75, "sigma_SI": 1250.0}
    assert gm["without-insulin"] == {"sigma": 2000.0, "SI": 0.625, "sigma_SI": 875.0}
    with pytest.raises(ValueError):
        group_means({"with-insulin": []})


def test_separation_examples():
    v = separation_check([10, 12, 5, 6, 1], [N, N, IMP, IMP, DM])
    assert v.verdict is Separation.SEPARATED
    assert v.direction == (N, IMP, DM)
    v = separation_check([10, 5, 8, 7], [N, N, DM, DM])
    assert v.verdict is Separation.NOT_SEPARATED
    assert separation_check([1, 2], [N, N]).verdict is Separation.INDETERMINATE
    v = separation_check([1.0, 9.0], [N, DM])
    assert v.direction == (DM, N)
    assert v.to_dict()["direction"] == ["Diabetes", "Normal"]
    # touching ranges are not disjoint
    assert separation_check([1, 2, 2, 3], [N, N, IMP, IMP]).verdict is Separation.NOT_SEPARATED


def test_abs_diff_symmetries():
    rng = np.random.default_rng(3)
    w = {k: ParamTriple.of(*rng.uniform([100, 0.1], [3000, 3])) for k in range(8)}
    wo = {k: ParamTriple.of(*rng.uniform([100, 0.1], [3000, 3])) for k in range(8)}
    assert all(v == {"sigma": 0.0, "SI": 0.0, "sigma_SI": 0.0} for v in abs_diff_stat(w, w).values())
    a, b = abs_diff_stat(w, wo), abs_diff_stat(wo, w)
    for k in w:
        for name in a[k]:
            assert a[k][name] == pytest.approx(b[k][name], abs=1e-12)


def test_single_patient_bootstrap_is_degenerate():
    s = clustered_bootstrap({"x": [0.2, 0.5, 0.8]}, ["p", "p", "p"], n_boot=50, seed=1)
    st_ = s.stats["x"]
    assert st_.mean == pytest.approx(0.5) and st_.se == 0.0
    assert st_.ci_lo == pytest.approx(0.5) and st_.ci_hi == pytest.approx(0.5)


def test_bootstrap_se_halves_when_cohort_quadruples():
    def se(n_pat, seed):
        rng = np.random.default_rng(seed)
        ids = np.repeat(np.arange(n_pat), 2)
        vals = np.repeat(rng.normal(size=n_pat), 2) + 0.3 * rng.normal(size=2 * n_pat)
        return clustered_bootstrap({"x": vals}, ids, n_boot=2000, seed=seed).stats["x"].se
    small = np.mean([se(50, s) for s in range(5)])
    large = np.mean([se(200, s) for s in range(5)])
    assert small / large == pytest.approx(2.0, rel=0.15)


def test_robustness_summary_fixture():
    # a robustness summary has one row per parameter with mean, SE and a 95% interval
    rows = {"sigma": (0.6254, 0.0015, 0.6224, 0.6284), "SI": (0.8411, 0.0020, 0.8371, 0.8451),
            "sigma_SI": (0.0868, 0.0002, 0.0864, 0.0872)}
    from ogtt_da.cohort import BootstrapStat
    s = BootstrapSummary({k: BootstrapStat(*v) for k, v in rows.items()}, 1000, 0, 124, 124)
    lines = s.to_csv().splitlines()
    assert lines[1] == "sigma,0.6254,0.0015,0.6224,0.6284"
    assert min(rows, key=lambda k: rows[k][0]) == "sigma_SI"


def test_group_means_reference_fixture():
    # two tests per mode built so their means reproduce reference cohort means
    def pair(s, si, prod, a):
        b = (prod - s * si) / a
        return [ParamTriple.of(s + a, si + b), ParamTriple.of(s - a, si - b)]
    gm = group_means({"with-insulin": pair(1355.136, 0.962, 1111.803, 500.0),
                      "without-insulin": pair(2039.622, 0.588, 1076.999, 1000.0)})
    assert gm["with-insulin"]["sigma"] == pytest.approx(1355.136)
    assert gm["with-insulin"]["SI"] == pytest.approx(0.962)
    assert gm["with-insulin"]["sigma_SI"] == pytest.approx(1111.803)
    assert gm["without-insulin"]["sigma_SI"] == pytest.approx(1076.999)
    w, wo = gm["with-insulin"], gm["without-insulin"]
    assert wo["sigma"] > w["sigma"] and wo["SI"] < w["SI"]
    assert abs(wo["sigma_SI"] - w["sigma_SI"]) / w["sigma_SI"] < 0.10


def test_group_means_trivial_cases():
    one = ParamTriple.of(1200.0, 0.7)
    assert group_means({"m": [one]})["m"] == {"sigma": 1200.0, "SI": 0.7, "sigma_SI": 1200.0 * 0.7}
    assert group_means({"m": [one, one]}) == group_means({"m": [one]})


def test_separation_spec_examples():
    v = separation_check([2000, 2200, 900, 1100], [N, N, IMP, IMP])
    assert v.verdict is Separation.SEPARATED and v.direction[0] is N
    assert separation_check([2000, 900, 1100], [N, N, IMP]).verdict is Separation.NOT_SEPARATED
    assert separation_check([2000, 900, 1100], [N, N, N]).verdict is Separation.INDETERMINATE
