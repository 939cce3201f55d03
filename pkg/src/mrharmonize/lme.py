"""Random-intercept linear mixed-effects model and longitudinal ICC.

    y_ij = a0 + a1 x_ij + b_j + e_ij,   b_j ~ N(0, sb2),  e_ij ~ N(0, se2)

Fitted by maximum likelihood (or REML) profiled over the variance ratio
g = sb2 / se2. For a given g the fixed effects are the GLS solution and se2
has a closed form, so only a 1-D root search on the score remains.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import brentq

LOG_G_BOUNDS = (math.log(1e-14), math.log(1e14))


class IdentifiabilityError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    pass


class DegenerateVarianceError(ValueError):
    pass


@dataclass(frozen=True)
class LongitudinalObservation:
    subject_id: str
    x: float  # age in years
    y: float  # structure volume as a percentage of total brain volume


@dataclass(frozen=True)
class LMEFit:
    a0: float
    a1: float
    sigma_b2: float
    sigma_e2: float
    icc: float
    loglik: float
    ratio: float
    method: str
    n_subjects: int
    n_obs: int


def icc(fit_or_sb2, sigma_e2: float | None = None) -> float:
    """sb2 / (sb2 + se2) from a fit or from the two variances."""
    if sigma_e2 is None:
        sb2, se2 = fit_or_sb2.sigma_b2, fit_or_sb2.sigma_e2
    else:
        sb2, se2 = float(fit_or_sb2), float(sigma_e2)
    if sb2 < 0 or se2 < 0:
        raise ValueError("variances must be non-negative")
    if sb2 + se2 == 0:
        raise DegenerateVarianceError("both variance components are zero")
    return sb2 / (sb2 + se2)


class _Design:
    """Per-subject sufficient statistics for the profiled likelihood."""

    def __init__(self, subjects, x, y):
        subjects = np.asarray(subjects)
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if not (len(subjects) == len(x) == len(y)):
            raise ValueError("subjects, x and y must have equal length")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("observations must be finite")
        # group in a label-independent order so relabeling cannot change the result
        _, inverse, counts = np.unique(subjects, return_inverse=True, return_counts=True)
        if len(counts) < 2:
            raise IdentifiabilityError("need at least two subjects")
        if counts.max() < 2:
            raise IdentifiabilityError("need at least one subject with two or more sessions")
        X = np.column_stack([np.ones_like(x), x])
        if np.linalg.matrix_rank(X) < 2:
            raise IdentifiabilityError("covariate x is constant; slope is not identifiable")
        self.N = len(y)
        self.p = X.shape[1]
        self.n = counts.astype(np.float64)
        J = len(counts)
        self.X, self.y, self.groups = X, y, inverse
        self.sX = np.zeros((J, self.p))  # per-subject column sums of X
        self.sy = np.zeros(J)
        np.add.at(self.sX, inverse, X)
        np.add.at(self.sy, inverse, y)
        # within-subject centred design, for numerically stable sums of squares
        self.Xw = X - (self.sX / self.n[:, None])[inverse]
        self.yw = y - (self.sy / self.n)[inverse]
        self.XwXw = self.Xw.T @ self.Xw
        self.Xwyw = self.Xw.T @ self.yw

    def solve(self, g: float):
        """GLS fixed effects, RSS, per-subject residual sums and X'HX at ratio ``g``.

        With H = I - c 11' per subject and c = g / (1 + n g), the quadratic
        forms split into a within-subject part and a between-subject part
        weighted by w / n, where w = 1 / (1 + n g).
        """
        wn = 1.0 / ((1.0 + self.n * g) * self.n)
        A = self.XwXw + (self.sX * wn[:, None]).T @ self.sX
        b = self.Xwyw + (self.sX * wn[:, None]).T @ self.sy
        beta = np.linalg.solve(A, b)
        rw = self.yw - self.Xw @ beta
        sr = self.sy - self.sX @ beta
        rss = float(rw @ rw) + float(np.sum(wn * sr ** 2))
        return beta, rss, sr, A

    def score(self, g: float, reml: bool) -> float:
        beta, rss, sr, A = self.solve(g)
        w = 1.0 / (1.0 + self.n * g)
        dof = self.N - self.p if reml else self.N
        out = 0.5 * dof * float(np.sum(sr ** 2 * w ** 2)) / rss - 0.5 * float(np.sum(self.n * w))
        if reml:
            M = (self.sX * (w ** 2)[:, None]).T @ self.sX
            out += 0.5 * float(np.trace(np.linalg.solve(A, M)))
        return out

    def loglik(self, g: float, reml: bool) -> tuple[float, np.ndarray, float]:
        beta, rss, _, A = self.solve(g)
        logdet = float(np.sum(np.log1p(self.n * g)))
        if reml:
            dof = self.N - self.p
            se2 = rss / dof
            ll = -0.5 * (dof * (math.log(2 * math.pi * se2) + 1) + logdet + np.linalg.slogdet(A)[1])
        else:
            se2 = rss / self.N
            ll = -0.5 * (self.N * (math.log(2 * math.pi * se2) + 1) + logdet)
        return float(ll), beta, se2


def _unpack(obs, x, y):
    if x is None:
        obs = list(obs)
        return [o.subject_id for o in obs], [o.x for o in obs], [o.y for o in obs]
    return obs, x, y


def fit_lme(obs: Sequence[LongitudinalObservation] | Sequence, x=None, y=None, method: str = "ML",
            xtol: float = 1e-8, maxiter: int = 200) -> LMEFit:
    """Fit the random-intercept model.

    Call as ``fit_lme(observations)`` or ``fit_lme(subject_ids, x, y)``.
    ``method`` is 'ML' (default) or 'REML'.
    """
    method = method.upper()
    if method not in ("ML", "REML"):
        raise ValueError("method must be 'ML' or 'REML'")
    reml = method == "REML"
    design = _Design(*_unpack(obs, x, y))

    def f(t):
        return design.score(math.exp(t), reml)

    lo, hi = LOG_G_BOUNDS
    f_lo = f(lo)
    if f_lo <= 0:
        g = 0.0
    else:
        f_hi = f(hi)
        if f_hi > 0:
            raise ConvergenceError(
                f"score still positive at ratio {math.exp(hi):.3g}: residual variance is numerically zero")
        try:
            # xtol on log(g) is a relative tolerance on the ratio itself
            t, info = brentq(f, lo, hi, xtol=xtol, rtol=4 * np.finfo(float).eps, maxiter=maxiter,
                             full_output=True)
        except RuntimeError as err:
            raise ConvergenceError(f"ratio search did not converge in {maxiter} iterations: {err}") from err
        if not info.converged:
            raise ConvergenceError(f"ratio search did not converge: {info.flag}, last log-ratio {info.root}")
        g = math.exp(t)
    ll, beta, se2 = design.loglik(g, reml)
    sb2 = g * se2
    return LMEFit(float(beta[0]), float(beta[1]), float(sb2), float(se2), icc(sb2, se2), ll, g, method,
                  len(design.n), design.N)


# ---------------------------------------------------------------------------
# before/after comparison

REPORT_COLUMNS = ("structure", "icc_before", "icc_after", "sig2_before", "sig2_after", "improved")


def _key(obs) -> list[tuple]:
    return sorted((o.subject_id, o.x) for o in obs)


def compare_harmonization(before: Mapping[str, Sequence[LongitudinalObservation]],
                          after: Mapping[str, Sequence[LongitudinalObservation]], method: str = "ML") -> list[dict]:
    """Per-structure ICC and residual variance before and after harmonization.

    ``improved`` is True when the ICC rises. Units of ``sig2_*`` are squared
    percentage points of total brain volume.
    """
    if set(before) != set(after):
        raise ValueError("before and after cover different structures")
    rows = []
    for s in sorted(before):
        if _key(before[s]) != _key(after[s]):
            raise ValueError(f"{s}: before and after differ in subjects or sessions")
        fb, fa = fit_lme(before[s], method=method), fit_lme(after[s], method=method)
        rows.append({"structure": s, "icc_before": fb.icc, "icc_after": fa.icc,
                     "sig2_before": fb.sigma_e2, "sig2_after": fa.sigma_e2, "improved": fa.icc > fb.icc})
    return rows


def read_observations(path) -> dict[str, list[LongitudinalObservation]]:
    """CSV columns: subject_id, age, structure, volume, total_brain_volume."""
    out: dict = {}
    with Path(path).open(newline="") as f:
        for row in csv.DictReader(f):
            pct = 100.0 * float(row["volume"]) / float(row["total_brain_volume"])
            age = row.get("age", row.get("session_date_or_age"))
            out.setdefault(row["structure"], []).append(LongitudinalObservation(row["subject_id"], float(age), pct))
    return out


def write_report(rows: Iterable[dict], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in r.items()})
    return path


def simulate(n_subjects: int, n_sessions: int, a0=10.0, a1=-0.05, sigma_b2=75.0, sigma_e2=25.0,
             seed=None, age_range=(20.0, 80.0), followup=(0.5, 3.0)):
    """Synthetic longitudinal data from the model; ages advance within subject."""
    rng = np.random.default_rng(seed)
    subj, xs, ys = [], [], []
    for j in range(n_subjects):
        age0 = rng.uniform(*age_range)
        ages = age0 + np.concatenate([[0.0], np.cumsum(rng.uniform(*followup, size=n_sessions - 1))])
        b = rng.normal(0.0, math.sqrt(sigma_b2))
        y = a0 + a1 * ages + b + rng.normal(0.0, math.sqrt(sigma_e2), size=n_sessions)
        subj += [f"s{j:04d}"] * n_sessions
        xs.append(ages)
        ys.append(y)
    return np.array(subj), np.concatenate(xs), np.concatenate(ys)
