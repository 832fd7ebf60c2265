import json
import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from btba.diagnostics import (
    BiasReport,
    EstimateSample,
    Verdict,
    ZStarTransformer,
    arb_percent,
    classify,
    diagnose,
    read_report_json,
    relative_bias,
    report_summary,
    rmse,
    summarize,
    write_report_json,
    zstar,
    zstar_moments,
)
from btba.errors import EmptySample, NearZeroTruth, ZeroRmse

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@st.composite
def samples(draw):
    truth = draw(finite)
    est = draw(st.lists(finite, min_size=2, max_size=60))
    est = np.array(est)
    assume(rmse(est, truth) > 1e-6)
    return est, truth


# -- relative bias -----------------------------------------------------------------


@pytest.mark.parametrize(
    "est,truth,rb",
    [(0.105, 0.1, 0.05), (0.024, 0.02, 0.20), (0.005, 0.001, 4.0), (0.7, 0.7, 0.0), (-2.0, -2.0, 0.0)],
)
def test_relative_bias_examples(est, truth, rb):
    assert relative_bias(est, truth) == pytest.approx(rb, abs=1e-12)


def test_near_zero_truth_echoes_value():
    with pytest.raises(NearZeroTruth) as info:
        relative_bias(0.01, 1e-9)
    assert "1e-09" in str(info.value)


def test_arb_is_percent_magnitude():
    assert arb_percent(0.095, 0.1) == pytest.approx(5.0)


# -- rmse / zstar --------------------------------------------------------------------


def test_rmse_examples():
    assert rmse([0.7, 0.3], 0.5) == pytest.approx(0.2, abs=1e-15)
    assert rmse([0.4, 0.4, 0.4], 0.4) == 0.0
    assert rmse([0.1, 0.2, 0.4], 0.2) == pytest.approx(math.sqrt(0.05 / 3), abs=1e-15)
    with pytest.raises(EmptySample):
        rmse([], 0.0)


def test_zstar_two_point():
    z = zstar([1.3, 0.7], 1.0)
    assert np.allclose(z, [1.0, -1.0], atol=1e-14)
    assert zstar_moments(z) == pytest.approx((0.0, 1.0), abs=1e-14)


@pytest.mark.parametrize("c", [0.2, -0.05])
def test_zstar_constant_offset(c):
    z = zstar(np.full(5, 0.3 + c), 0.3)
    assert np.allclose(z, np.sign(c), atol=1e-12)
    m, v = zstar_moments(z)
    assert m == pytest.approx(np.sign(c)) and v == pytest.approx(0.0, abs=1e-24)


def test_zstar_zero_rmse():
    with pytest.raises(ZeroRmse):
        zstar([0.3, 0.3], 0.3)


def test_sample_variance_flag():
    z = zstar([1.3, 0.7], 1.0)
    assert zstar_moments(z, "sample")[1] == pytest.approx(2.0)


@given(samples())
def test_identity_m2_plus_v(sample):
    est, truth = sample
    m, v = zstar_moments(zstar(est, truth))
    assert abs(m * m + v - 1.0) <= 1e-12


@given(samples())
def test_rmse_decomposition(sample):
    est, truth = sample
    bias = est.mean() - truth
    lhs = rmse(est, truth) ** 2
    rhs = bias**2 + est.var()
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, lhs)


@given(samples(), st.sampled_from([1e-3, -2.0, 7.5, 1e3]))
def test_scale_invariance(sample, k):
    # a negative factor mirrors the sample, so Z* changes sign
    est, truth = sample
    expected = np.sign(k) * zstar(est, truth)
    assert np.allclose(zstar(est * k, truth * k), expected, atol=1e-12, rtol=0)
    if abs(truth) >= 1e-8 and abs(truth * k) >= 1e-8:
        assert relative_bias(est.mean() * k, truth * k) == pytest.approx(relative_bias(est.mean(), truth), rel=1e-9, abs=1e-12)


@given(samples())
def test_sign_of_mean_follows_bias(sample):
    est, truth = sample
    rep = summarize(EstimateSample(est, truth))
    assert rep.rmse >= abs(rep.bias) - 1e-12
    if abs(rep.bias) > 1e-9 * max(1, abs(truth)):
        assert np.sign(rep.zstar_mean) == np.sign(rep.bias)


# -- decision matrix ---------------------------------------------------------------


@pytest.mark.parametrize(
    "m,v,expected",
    [
        (0.05, 0.9975, Verdict.ACCEPT),
        (0.15, 0.9775, Verdict.ACCEPT_WITH_CAUTION),
        (0.35, 0.8775, Verdict.REJECT),
        (-0.25, 0.9375, Verdict.RESEARCH_DEPENDENT),
    ],
)
def test_classify_examples(m, v, expected):
    assert classify(m, v).verdict is expected


@pytest.mark.parametrize(
    "m,v,expected",
    [
        (0.10, 0.99, Verdict.ACCEPT),
        (-0.10, 0.99, Verdict.ACCEPT),
        (0.20, 0.96, Verdict.ACCEPT_WITH_CAUTION),
        (0.30, 0.91, Verdict.RESEARCH_DEPENDENT),
        (0.0, 0.90, Verdict.ACCEPT),
        (0.0, 1.0, Verdict.ACCEPT),
        (0.0, 1.10, Verdict.ACCEPT),
        (0.0, 0.8999, Verdict.REJECT),
        (0.0, 1.1001, Verdict.REJECT),
        (0.3001, 0.95, Verdict.REJECT),
    ],
)
def test_classify_boundaries(m, v, expected):
    assert classify(m, v).verdict is expected


def test_classify_rejects_negative_variance():
    with pytest.raises(ValueError):
        classify(0.0, -0.1)


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 2))
def test_classify_monotone_in_abs_m(a, b, v):
    lo, hi = sorted([a, b])
    assert classify(hi, v).verdict.severity >= classify(lo, v).verdict.severity
    assert classify(-hi, v).verdict.severity >= classify(-lo, v).verdict.severity


# -- summarize ---------------------------------------------------------------------


def test_summarize_two_point():
    rep = summarize(EstimateSample([0.4, 0.2], 0.3))
    assert rep.verdict.verdict is Verdict.ACCEPT
    assert rep.zstar_mean == pytest.approx(0.0, abs=1e-14)
    assert rep.zstar_var == pytest.approx(1.0, abs=1e-14)


def test_summarize_constant_offset():
    rep = summarize(EstimateSample(np.full(4, 0.35), 0.3))
    assert rep.verdict.verdict is Verdict.REJECT
    assert rep.zstar_mean == pytest.approx(1.0) and rep.zstar_var == pytest.approx(0.0, abs=1e-24)


def test_summarize_large_r_monte_carlo():
    rng = np.random.default_rng(11)
    rep = summarize(EstimateSample(0.3 + rng.normal(0, 0.05, 100_000), 0.3))
    assert abs(rep.zstar_mean) < 0.02 and abs(rep.zstar_var - 1) < 0.02
    assert rep.verdict.verdict is Verdict.ACCEPT


def test_summarize_exactly_unbiased():
    rep = summarize(EstimateSample([0.3, 0.3, 0.3], 0.3))
    assert rep.verdict.verdict is Verdict.ACCEPT
    assert any("exactly unbiased" in f for f in rep.flags)


def test_summarize_near_zero_truth():
    rep = summarize(EstimateSample([0.01, -0.01, 0.02], 0.0))
    assert rep.rb is None and rep.arb_percent is None
    assert any("near-zero truth" in f for f in rep.flags)


def test_above_unit_variance_flag_with_sample_kind():
    # six symmetric pairs: V = 12/11 with the R-1 denominator
    est = 0.3 + np.repeat([0.01, -0.01], 6)
    rep = summarize(EstimateSample(est, 0.3), "sample")
    assert rep.zstar_var == pytest.approx(12 / 11)
    assert "above-unit variance" in rep.flags


def test_arb_pathology_against_constant_zstar():
    spread = np.array([-0.01, 0.0, 0.01])
    arbs, ms = [], []
    for truth in (0.1, 0.3, 0.55):
        rep = summarize(EstimateSample(truth + 0.005 + spread, truth))
        arbs.append(rep.arb_percent)
        ms.append(rep.zstar_mean)
    assert arbs == pytest.approx([5.0, 5 / 3, 10 / 11], abs=1e-9)
    assert max(ms) - min(ms) < 1e-9


def test_report_json_round_trip(tmp_path):
    rep = summarize(EstimateSample([0.31, 0.28, 0.35], 0.3, condition_id="c1", metadata={"rho": 0.3}))
    path = write_report_json(rep, tmp_path / "r.json")
    assert json.loads(path.read_text())["schema_version"] == "btba.report/1"
    back = read_report_json(path)
    assert back.verdict == rep.verdict
    assert np.array_equal(back.zstar, rep.zstar)
    assert back.metadata == {"rho": 0.3}
    assert "zstar" not in report_summary(back)


def test_transformer_api():
    t = ZStarTransformer(truth=1.0)
    out = t.fit_transform(np.array([1.3, 0.7]))
    assert out.shape == (2, 1)
    assert t.verdict_.verdict is Verdict.ACCEPT
    assert t.get_params() == {"truth": 1.0, "variance_kind": "population"}


def test_diagnose_files(tmp_path):
    est = tmp_path / "est.csv"
    est.write_text(
        "# external estimates\n"
        "condition_id,replication_id,converged,estimate\n"
        "a,2,true,0.35\n"
        "a,1,true,0.25\n"
        "a,3,false,9.0\n"
        "b,1,1,0.5\n"
        "b,2,1,0.5\n"
    )
    truths = tmp_path / "truth.csv"
    truths.write_text("condition_id,truth\na,0.3\nb,0.4\n")
    reports = diagnose(est, truths, tmp_path / "out")
    assert [r.condition_id for r in reports] == ["a", "b"]
    assert reports[0].n_replications == 2
    assert reports[0].verdict.verdict is Verdict.ACCEPT
    assert reports[1].verdict.verdict is Verdict.REJECT
    assert (tmp_path / "out" / "report_a.json").exists()
    lines = (tmp_path / "out" / "verdicts.csv").read_text().splitlines()
    assert lines[0] == "# schema: btba.verdicts/1"
    assert lines[2].endswith(",Accept") and lines[3].endswith(",Reject")
    assert isinstance(reports[0], BiasReport)
