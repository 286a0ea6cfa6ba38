import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from rdbound.evaluation import (
    CurveFormatError,
    RDCurve,
    RDPoint,
    bd_rate,
    estimate_rd_point,
    format_curve,
    gaussian_bound_check,
    gaussian_oracle_curve,
    load_curve,
    log_lambdas,
    oracle_points_curve,
    parse_curve,
    save_curve,
    sweep,
)
from rdbound.model import build, toy_config
from rdbound.oracles import DiscreteSourceSpec, ba_curve

from .test_model import _PassThrough


def curve(rates, psnrs, **kw):
    return RDCurve([RDPoint(lmb=None, rate_bpp=float(r), mse=float(10 ** (-q / 10))) for r, q in zip(rates, psnrs)], **kw)


REF = ([0.1, 0.25, 0.5, 0.9, 1.4, 2.1], [26.0, 28.5, 31.0, 33.2, 35.1, 37.0])


# points and curves -------------------------------------------------------------------


def test_point_recomputes_psnr_and_validates():
    p = RDPoint(lmb=1.0, rate_bpp=0.5, mse=0.01)
    assert p.psnr_db == pytest.approx(20.0)
    with pytest.raises(ValueError):
        RDPoint(lmb=1.0, rate_bpp=-0.1, mse=0.01)
    with pytest.raises(ValueError):
        RDPoint(lmb=1.0, rate_bpp=0.1, mse=0.0)


def test_curve_sorted_and_deduplicated():
    with pytest.warns(UserWarning):
        c = curve([0.5, 0.1, 0.5], [30, 25, 31])
    assert list(c.rates) == [0.1, 0.5]


def test_curve_diagnostics_and_hull():
    c = curve([0.1, 0.2, 0.3, 0.4], [25, 27, 26.5, 29])
    assert len(c.diagnostics()) == 1
    h = c.hull()
    assert 0.3 not in list(h.rates)
    assert h.metadata["view"] == "hull"
    assert len(curve(*REF).diagnostics()) == 0


# BD-rate ---------------------------------------------------------------------------


def test_bd_rate_identity_and_scaling():
    ref = curve(*REF)
    assert bd_rate(ref, curve(*REF)) == 0.0
    for k in (0.5, 2.0, 1.1):
        assert bd_rate(ref, curve([r * k for r in REF[0]], REF[1])) == pytest.approx((k - 1) * 100, abs=1e-6)


@settings(max_examples=50)
@given(st.floats(0.2, 5.0))
def test_bd_rate_exact_under_log_offset(k):
    ref = curve(*REF)
    assert bd_rate(ref, curve([r * k for r in REF[0]], REF[1])) == pytest.approx((k - 1) * 100, abs=1e-6)


def test_bd_rate_matches_independent_integration():
    # DERIVED: scipy quad over numpy lstsq cubic fits
    from scipy import integrate

    ref = curve(*REF)
    test_rates = [0.08, 0.2, 0.45, 0.8, 1.3, 2.0]
    test_psnr = [25.5, 28.3, 31.2, 33.0, 35.3, 37.4]
    tst = curve(test_rates, test_psnr)
    fr = np.polyfit(REF[1], np.log(REF[0]), 3)
    ft = np.polyfit(test_psnr, np.log(test_rates), 3)
    lo, hi = max(min(REF[1]), min(test_psnr)), min(max(REF[1]), max(test_psnr))
    avg = integrate.quad(lambda q: np.polyval(ft, q) - np.polyval(fr, q), lo, hi)[0] / (hi - lo)
    assert bd_rate(ref, tst) == pytest.approx((math.exp(avg) - 1) * 100, abs=1e-4)


def test_bd_rate_errors():
    ref = curve(*REF)
    with pytest.raises(ValueError, match="at least 4"):
        bd_rate(ref, curve([0.1, 0.2, 0.3], [20, 21, 22]))
    with pytest.raises(ValueError) as err:
        bd_rate(ref, curve([0.1, 0.2, 0.3, 0.4], [40, 41, 42, 43]))
    assert "26.000" in str(err.value) and "40.000" in str(err.value)


# file format ---------------------------------------------------------------------------


def test_round_trip(tmp_path):
    pts = [RDPoint(lmb=4.0 * i, rate_bpp=0.1 * i + 1e-17, mse=1 / (3 + i), num_images=5, mc_samples=8,
                   rate_se_bpp=0.001 * i, mse_se=None) for i in range(1, 6)]
    c = RDCurve(pts, "mine", {"theoretical": "false", "dataset": "x"})
    save_curve(c, tmp_path / "c.csv")
    back = load_curve(tmp_path / "c.csv")
    assert back == c
    assert format_curve(back) == format_curve(c)


def test_missing_psnr_column_is_recomputed():
    c = parse_curve("lambda,rate_bpp,mse,num_images,mc_samples\n4,0.1,0.01,1,1\n")
    assert c.points[0].psnr_db == pytest.approx(20.0)


def test_psnr_only_file_derives_mse():
    c = parse_curve("rate_bpp,psnr_db\n0.1,30\n0.2,32\n")
    assert c.points[0].mse == pytest.approx(1e-3)


def test_negative_rate_names_the_row():
    text = "lambda,rate_bpp,mse,psnr_db,num_images,mc_samples\n4,0.1,0.01,20,1,1\n8,-0.2,0.01,20,1,1\n"
    with pytest.raises(CurveFormatError, match=r"f.csv:3"):
        parse_curve(text, "f.csv")


@pytest.mark.parametrize("text", ["", "rate_bpp,bogus\n1,2\n", "rate_bpp,mse\n1\n", "rate_bpp,mse\nx,0.1\n", "lambda,mse\n1,0.1\n"])
def test_malformed_files(text):
    with pytest.raises(CurveFormatError):
        parse_curve(text)


def test_oracle_curves_export():
    g = gaussian_oracle_curve(1.0, 32)
    assert len(g) == 32 and g.theoretical
    pts = ba_curve(DiscreteSourceSpec.bernoulli(0.5), -np.logspace(-1, 1, 10))
    c = oracle_points_curve(pts, "ba")
    assert len(c) == 10 and c.theoretical
    assert all(p.lmb > 0 for p in c.points)


# estimation ----------------------------------------------------------------------------


def _toy_data(n=16, seed=0):
    rng = np.random.default_rng(seed)
    x = np.clip(0.5 + rng.normal(size=(n, 1, 4, 4)) / 6, 0, 1).astype(np.float32)
    return torch.from_numpy(x)


def test_estimate_rejects_lambda_outside_schedule():
    model = build(toy_config())
    with pytest.raises(ValueError, match="outside the trained range"):
        estimate_rd_point(model, _toy_data(), 3.0)
    with pytest.raises(ValueError):
        sweep(model, _toy_data(), [10.0, 4096.0])


def test_estimate_is_chunking_invariant():
    model = build(toy_config())
    a = estimate_rd_point(model, _toy_data(), 50.0, mc_samples=3, seed=2, chunk=5)
    b = estimate_rd_point(model, _toy_data(), 50.0, mc_samples=3, seed=2, chunk=1024)
    assert a.rate_bpp == pytest.approx(b.rate_bpp, rel=1e-6)
    assert a.mse == pytest.approx(b.mse, rel=1e-6)
    assert a.rate_se_bpp is not None and a.mse_se is not None


def test_forced_equal_heads_give_zero_rate():
    model = build(toy_config())
    for stage in model.dec_stages:
        for blk in stage:
            blk.post_block = _PassThrough()
            blk.post_head.load_state_dict(blk.prior_head.state_dict())
    model.encode = lambda x: [torch.zeros(1) for _ in model.config.stages]
    p = estimate_rd_point(model, _toy_data(), 100.0, mc_samples=2)
    assert p.rate_bpp == 0.0


def test_sweep_single_and_duplicate_lambdas(toy_run):
    # an untrained model ignores lambda (zero-initialised modulation), so use the trained one
    model = toy_run.model
    assert len(sweep(model, _toy_data(4), [20.0], mc_samples=1)) == 1
    with pytest.warns(UserWarning, match="duplicate"):
        c = sweep(model, _toy_data(4), [20.0, 20.0, 400.0], mc_samples=1)
    assert len(c) == 2


def test_log_lambdas():
    v = log_lambdas(8, 4, 2048)
    assert len(v) == 8 and v[0] == pytest.approx(4) and v[-1] == pytest.approx(2048)
    assert log_lambdas(1, 4, 16) == [8.0]


def test_single_vs_many_samples_agree(toy_run, toy_heldout):
    # DERIVED: both are unbiased for the same expectation
    a = estimate_rd_point(toy_run.model, toy_heldout, 90.0, mc_samples=1, seed=3)
    b = estimate_rd_point(toy_run.model, toy_heldout, 90.0, mc_samples=16, seed=4)
    se = math.hypot(a.rate_se_bpp, b.rate_se_bpp)
    assert abs(a.rate_bpp - b.rate_bpp) < 2 * se
    se_d = math.hypot(a.mse_se, b.mse_se)
    assert abs(a.mse - b.mse) < 2 * se_d


def test_swept_curve_rates_ascend_with_lambda(toy_curve):
    lambdas = [p.lmb for p in toy_curve.points]
    assert lambdas == sorted(lambdas)


def test_bound_check_every_point(toy_curve):
    checks = gaussian_bound_check(toy_curve, 1 / 36)
    assert all(c.holds for c in checks)


def test_bound_check_flags_violation():
    c = RDCurve([RDPoint(lmb=10.0, rate_bpp=0.0, mse=0.001, rate_se_bpp=0.01)])
    (chk,) = gaussian_bound_check(c, 1 / 36)
    assert not chk.holds and chk.gap < 0
