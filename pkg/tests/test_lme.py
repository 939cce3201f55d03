import csv
import math
import warnings

import numpy as np
import pandas as pd
import pytest
import statsmodels.formula.api as smf
from hypothesis import given, settings, strategies as st

from mrharmonize.lme import (REPORT_COLUMNS, ConvergenceError, DegenerateVarianceError, IdentifiabilityError,
                             LongitudinalObservation, compare_harmonization, fit_lme, icc, read_observations,
                             simulate, write_report)


def _statsmodels(subjects, x, y, reml):
    df = pd.DataFrame({"g": subjects, "x": x, "y": y})
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = smf.mixedlm("y ~ x", df, groups=df["g"]).fit(reml=reml, method=["lbfgs"], gtol=1e-12)
    return res


def _balanced_subject_level(seed, j=30, n=4):
    """Balanced design whose covariate is constant within subject."""
    rng = np.random.default_rng(seed)
    xj = rng.uniform(20, 80, j)
    b = rng.normal(0, math.sqrt(75), j)
    subj = np.repeat(np.arange(j), n)
    x = np.repeat(xj, n)
    y = 10 - 0.05 * x + b[subj] + rng.normal(0, 5, j * n)
    return subj, x, y


def _anova(subj, x, y, divisor_between):
    """Moment estimators from within/between sums of squares (balanced data)."""
    j = len(np.unique(subj))
    n = len(y) // j
    ybar = np.array([y[subj == k].mean() for k in range(j)])
    xbar = np.array([x[subj == k].mean() for k in range(j)])
    ssw = sum(((y[subj == k] - ybar[k]) ** 2).sum() for k in range(j))
    se2 = ssw / (j * (n - 1))
    coef = np.polyfit(xbar, ybar, 1)
    rss_b = ((ybar - np.polyval(coef, xbar)) ** 2).sum()
    tau = rss_b / divisor_between(j)
    return max(tau - se2 / n, 0.0), se2, coef


# -- icc arithmetic -----------------------------------------------------------------

def test_icc_arithmetic():
    assert icc(75, 25) == 0.75
    assert icc(0, 3) == 0.0
    assert icc(2, 2) == 0.5
    with pytest.raises(DegenerateVarianceError):
        icc(0, 0)
    with pytest.raises(ValueError):
        icc(-1, 2)


# -- oracles ---------------------------------------------------------------------------

@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("method", ["ML", "REML"])
def test_matches_statsmodels(seed, method):
    subj, x, y = simulate(40, 3, seed=seed)
    fit = fit_lme(subj, x, y, method=method)
    ref = _statsmodels(subj, x, y, reml=method == "REML")
    assert fit.a0 == pytest.approx(ref.fe_params["Intercept"], rel=1e-5)
    assert fit.a1 == pytest.approx(ref.fe_params["x"], rel=1e-4, abs=1e-6)
    assert fit.sigma_e2 == pytest.approx(ref.scale, rel=1e-4)
    assert fit.sigma_b2 == pytest.approx(float(ref.cov_re.iloc[0, 0]), rel=1e-4)
    assert fit.loglik == pytest.approx(ref.llf, rel=1e-7)
    assert fit.loglik >= ref.llf - 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_ml_matches_moment_oracle_on_balanced_design(seed):
    subj, x, y = _balanced_subject_level(seed)
    sb2, se2, coef = _anova(subj, x, y, lambda j: j)
    fit = fit_lme(subj, x, y, method="ML")
    assert fit.sigma_e2 == pytest.approx(se2, rel=1e-3)
    assert fit.sigma_b2 == pytest.approx(sb2, rel=1e-3)
    assert fit.icc == pytest.approx(sb2 / (sb2 + se2), rel=1e-3)
    assert fit.a1 == pytest.approx(coef[0], rel=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_reml_matches_classic_anova(seed):
    subj, x, y = _balanced_subject_level(seed)
    # classic ANOVA: between-subject residual mean square with J - p degrees of freedom
    sb2, se2, _ = _anova(subj, x, y, lambda j: j - 2)
    fit = fit_lme(subj, x, y, method="REML")
    assert fit.sigma_e2 == pytest.approx(se2, rel=1e-6)
    assert fit.sigma_b2 == pytest.approx(sb2, rel=1e-6)


def test_boundary_zero_between_variance():
    rng = np.random.default_rng(0)
    subj = np.repeat(np.arange(30), 3)
    x = rng.uniform(20, 80, 90)
    y = 1 + 0.1 * x + rng.normal(0, 1, 90)
    y -= np.array([y[subj == k].mean() for k in range(30)])[subj] * 0.5  # shrink subject means
    fit = fit_lme(subj, x, y)
    assert fit.sigma_b2 == 0.0 and fit.icc == 0.0
    # with no subject effect the model is ordinary least squares
    coef = np.polyfit(x, y, 1)
    rss = float(((y - np.polyval(coef, x)) ** 2).sum())
    assert fit.a1 == pytest.approx(coef[0], rel=1e-8)
    assert fit.sigma_e2 == pytest.approx(rss / 90, rel=1e-10)
    assert fit.loglik == pytest.approx(-45 * (math.log(2 * math.pi * rss / 90) + 1), rel=1e-10)


# -- acceptance-level behaviour ------------------------------------------------------------

def test_generate_and_refit_recovers_icc():
    subj, x, y = simulate(200, 3, seed=0)
    assert abs(fit_lme(subj, x, y).icc - 0.75) < 0.02


def test_zero_noise_limit():
    subj, x, y = simulate(50, 3, sigma_e2=1e-12, seed=1)
    assert fit_lme(subj, x, y).icc > 0.999


# -- invariances ----------------------------------------------------------------

@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10 ** 6), c=st.floats(-100, 100), k=st.floats(0.1, 10))
def test_shift_scale_invariance(seed, c, k):
    subj, x, y = simulate(25, 3, seed=seed)
    base = fit_lme(subj, x, y)
    shifted = fit_lme(subj, x, y + c)
    assert shifted.a0 == pytest.approx(base.a0 + c, rel=1e-8, abs=1e-8)
    assert shifted.a1 == pytest.approx(base.a1, rel=1e-8, abs=1e-10)
    assert shifted.icc == pytest.approx(base.icc, abs=1e-8)
    assert shifted.sigma_e2 == pytest.approx(base.sigma_e2, rel=1e-8)
    scaled = fit_lme(subj, x, y * k)
    assert scaled.icc == pytest.approx(base.icc, abs=1e-8)
    assert scaled.sigma_e2 == pytest.approx(k * k * base.sigma_e2, rel=1e-8)
    assert scaled.sigma_b2 == pytest.approx(k * k * base.sigma_b2, rel=1e-8, abs=1e-10)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_relabeling_invariance(seed):
    subj, x, y = simulate(20, 3, seed=seed)
    rng = np.random.default_rng(seed)
    names = {s: f"z{rng.integers(10 ** 9)}-{i}" for i, s in enumerate(np.unique(subj))}
    order = rng.permutation(len(y))
    a = fit_lme(subj, x, y)
    b = fit_lme(np.array([names[s] for s in subj])[order], x[order], y[order])
    assert b.icc == pytest.approx(a.icc, abs=1e-10)
    assert b.a1 == pytest.approx(a.a1, rel=1e-10)


def test_unbalanced_and_observation_input():
    subj, x, y = simulate(30, 4, seed=3)
    keep = np.ones(len(y), bool)
    keep[::7] = False
    fit = fit_lme(subj[keep], x[keep], y[keep])
    ref = _statsmodels(subj[keep], x[keep], y[keep], reml=False)
    assert fit.sigma_e2 == pytest.approx(ref.scale, rel=1e-4)
    obs = [LongitudinalObservation(s, a, b) for s, a, b in zip(subj[keep], x[keep], y[keep])]
    assert fit_lme(obs).icc == fit.icc


def test_identifiability_errors():
    with pytest.raises(IdentifiabilityError):
        fit_lme(["a", "a"], [1, 2], [1, 2])
    with pytest.raises(IdentifiabilityError):
        fit_lme(["a", "b", "c"], [1, 2, 3], [1, 2, 4])
    with pytest.raises(IdentifiabilityError):
        fit_lme(["a", "a", "b", "b"], [1, 1, 1, 1], [1, 2, 3, 4])
    with pytest.raises(ValueError):
        fit_lme(["a", "a", "b", "b"], [1, 2, 3, 4], [1, 2, 3, np.nan])
    with pytest.raises(ValueError):
        fit_lme(["a", "a", "b", "b"], [1, 2, 3, 4], [1, 2, 3, 4], method="GEE")


def test_iteration_cap_raises_convergence_error():
    subj, x, y = simulate(20, 3, seed=0)
    with pytest.raises(ConvergenceError, match="converge"):
        fit_lme(subj, x, y, maxiter=2)


def test_exact_fit_reports_zero_residual_variance():
    subj = np.repeat(np.arange(5), 3)
    x = np.random.default_rng(0).uniform(20, 80, 15)
    with pytest.raises(ConvergenceError, match="residual variance"):
        fit_lme(subj, x, 2 + 0.5 * x + 10 * np.arange(5.0)[subj])


# -- comparison report ---------------------------------------------------------------

def _obs(subj, x, y):
    return [LongitudinalObservation(s, a, b) for s, a, b in zip(subj, x, y)]


def test_compare_harmonization(tmp_path):
    subj, x, y = simulate(60, 3, seed=4)
    means = np.array([y[subj == s].mean() for s in subj])
    noisier = means + (y - means) * 2.0
    before = {"WM": _obs(subj, x, noisier), "GM": _obs(subj, x, y)}
    after = {"WM": _obs(subj, x, y), "GM": _obs(subj, x, y)}
    rows = compare_harmonization(before, after)
    wm = next(r for r in rows if r["structure"] == "WM")
    gm = next(r for r in rows if r["structure"] == "GM")
    assert wm["icc_after"] > wm["icc_before"] and wm["improved"]
    assert gm["icc_after"] == gm["icc_before"] and not gm["improved"]
    out = write_report(rows, tmp_path / "r.csv")
    with out.open() as f:
        reader = csv.DictReader(f)
        assert tuple(reader.fieldnames) == REPORT_COLUMNS
        assert len(list(reader)) == 2
    with pytest.raises(ValueError):
        compare_harmonization(before, {"WM": after["WM"]})
    with pytest.raises(ValueError):
        compare_harmonization({"WM": before["WM"]}, {"WM": after["WM"][:-1]})


def test_read_observations(tmp_path):
    path = tmp_path / "obs.csv"
    path.write_text("subject_id,age,structure,volume,total_brain_volume\n"
                    "s1,50,WM,450,1000\ns1,52,WM,440,1000\n")
    obs = read_observations(path)
    assert obs["WM"][0] == LongitudinalObservation("s1", 50.0, 45.0)
