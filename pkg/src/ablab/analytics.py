"""Closed-form approximations, quadrature oracles and the (Δ, Γ) inverse fit."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .hvcore import (CHSH_SIGNS, TWO_PI, DetectionModel, ModelKind, PairType, Station,
                     Substate, port_probabilities, wrap)

# δ/Δ used by the single-exponential approximation; √π·δ/Δ = 1.3401.
DELTA_RATIO = 0.7561
# ⟨η⟩(τ) ≈ 1.34 Δ and d⟨η⟩/dt ≈ 1.34 Γ Δ at the origin.
ETA_COEFF = 1.34
SQRT_PI = math.sqrt(math.pi)


class FitError(ValueError):
    """The inverse fit is undefined for the supplied data."""


class InsufficientCountsError(ValueError):
    """A CHSH setting has no coincidences."""


@dataclass(frozen=True)
class ApproxParams:
    gamma: float
    delta_width: float
    tau: float
    alpha_tau: float
    target_a: float

    def __post_init__(self) -> None:
        if self.gamma * self.tau > math.exp(-1) + 1e-12:
            warnings.warn(f"Γτ = {self.gamma * self.tau:.3g} > 1/e: the monotone approximation "
                          "does not hold", RuntimeWarning, stacklevel=3)

    @property
    def delta_small(self) -> float:
        return DELTA_RATIO * self.delta_width


@dataclass(frozen=True)
class FitResult:
    delta_est: float
    gamma_est: float
    eta0: float
    slope: float
    correction_factor: float

    def as_text(self) -> str:
        return "\n".join(f"{k}={v!r}" for k, v in self.as_dict().items())

    def as_dict(self) -> dict:
        return {"delta_est": self.delta_est, "gamma_est": self.gamma_est, "eta0": self.eta0,
                "slope": self.slope, "factor": self.correction_factor}


def _check_time(t, p: ApproxParams):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < p.tau - 1e-12 * max(1.0, abs(p.tau))):
        raise ValueError("approximations are only defined for t >= tau")
    return t


def alpha_approx(t, p: ApproxParams):
    t = _check_time(t, p)
    return (p.target_a - p.alpha_tau) * (1.0 - np.exp(-p.gamma * (t - p.tau))) + p.alpha_tau


def eta_approx(t, p: ApproxParams):
    t = _check_time(t, p)
    d0 = p.alpha_tau - p.target_a
    return np.exp(-(d0 * d0) * np.exp(-2.0 * p.gamma * (t - p.tau)) / p.delta_small ** 2)


def mean_eta_approx(t, p: ApproxParams):
    t = _check_time(t, p)
    if p.delta_small > 0.3:
        warnings.warn(f"δ = {p.delta_small:.3g} is not small; the averaged form is unreliable",
                      RuntimeWarning, stacklevel=2)
    return np.minimum(SQRT_PI * p.delta_small * np.exp(p.gamma * (t - p.tau)), 1.0)


def forward_observables(delta: float, gamma: float, correction_factor: float = 1.0):
    """Measured ``(eta0, slope)`` implied by (Δ, Γ) after losses of ``correction_factor``."""
    return ETA_COEFF * delta / correction_factor, ETA_COEFF * gamma * delta / correction_factor


def invert_fit(eta0_measured: float, slope_measured: float, correction_factor: float = 1.0) -> FitResult:
    if not eta0_measured > 0:
        raise FitError(f"efficiency at the origin must be positive, got {eta0_measured}")
    if not slope_measured > 0:
        raise FitError(f"slope must be positive, got {slope_measured}")
    if not correction_factor >= 1:
        raise FitError(f"correction factor must be >= 1, got {correction_factor}")
    delta = correction_factor * eta0_measured / ETA_COEFF
    gamma = slope_measured / eta0_measured
    return FitResult(delta, gamma, float(eta0_measured), float(slope_measured), float(correction_factor))


def ols_slope(t, y):
    """Ordinary least squares line; returns ``(slope, intercept, slope_stderr)``."""
    t = np.asarray(t, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if t.size < 2:
        raise FitError("need at least two points for a slope")
    tm, ym = t.mean(), y.mean()
    sxx = np.sum((t - tm) ** 2)
    if sxx == 0:
        raise FitError("degenerate time axis")
    slope = np.sum((t - tm) * (y - ym)) / sxx
    intercept = ym - slope * tm
    if t.size > 2:
        resid = y - (intercept + slope * t)
        se = math.sqrt(np.sum(resid ** 2) / (t.size - 2) / sxx)
    else:
        se = float("nan")
    return float(slope), float(intercept), se


@dataclass(frozen=True)
class CurveFit:
    result: FitResult
    origin: float
    segment: tuple
    gamma_seed: float
    n_points: int


def fit_efficiency_curve(t, eta, tau: float, t_on: float = 0.0, correction_factor: float = 1.0,
                         gamma_seed: Optional[float] = None) -> CurveFit:
    """Estimate (Δ, Γ) from a rising efficiency curve.

    ``eta0`` is the mean efficiency before the reaction arrives, on
    ``[t_on, t_on + τ]``.  The slope is an OLS line on ``[t_on + τ,
    t_on + τ + 1/Γ]``, where Γ is refreshed once from a seed.  Without an
    explicit seed, the seed is the e-folding time of the curve.
    """
    t = np.asarray(t, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    ok = np.isfinite(eta)
    t, eta = t[ok], eta[ok]
    origin = t_on + tau
    pre = (t >= t_on) & (t <= origin)
    if not pre.any():
        after = np.nonzero(t >= t_on)[0]
        if after.size == 0:
            raise FitError("no data after the pump turns on")
        pre = np.zeros_like(t, dtype=bool)
        pre[after[0]] = True
    eta0 = float(eta[pre].mean())
    if not eta0 > 0:
        raise FitError("zero efficiency at the origin")
    late = t > origin
    if gamma_seed is None:
        above = np.nonzero(late & (eta >= math.e * eta0))[0]
        if above.size:
            gamma_seed = 1.0 / (t[above[0]] - origin)
        else:
            slope, _, _ = ols_slope(t[late | pre], eta[late | pre])
            gamma_seed = slope / eta0
    if not gamma_seed > 0:
        raise FitError("could not seed the fit segment")
    seg = (origin, origin + 1.0 / gamma_seed)
    m = (t >= seg[0]) & (t <= seg[1])
    slope, _, _ = ols_slope(t[m], eta[m])
    return CurveFit(invert_fit(eta0, slope, correction_factor), origin, seg, float(gamma_seed),
                    int(m.sum()))


# --------------------------------------------------------------------------
# quadrature
# --------------------------------------------------------------------------


def simpson(f: Callable, lo: float, hi: float, n: int) -> float:
    """Composite Simpson rule with ``n`` (even) subintervals."""
    if n % 2:
        n += 1
    x = np.linspace(lo, hi, n + 1)
    # endpoints as one-sided limits, so a jump sitting on a breakpoint is harmless
    eps = 1e-12 * (hi - lo)
    x[0] += eps
    x[-1] -= eps
    y = f(x)
    w = np.ones(n + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return float((hi - lo) / (3 * n) * np.dot(w, y))


def piecewise_simpson(f: Callable, breakpoints: Sequence[float], lo: float, hi: float,
                      min_nodes: int = 10_000, tol: float = 1e-8, max_nodes: int = 1 << 24) -> float:
    """Simpson over the smooth pieces between ``breakpoints``, doubling nodes until stable."""
    pts = sorted({lo, hi, *[b for b in breakpoints if lo < b < hi]})
    length = hi - lo
    nodes = min_nodes

    def total(n_total):
        s = 0.0
        for x0, x1 in zip(pts, pts[1:]):
            # narrow pieces (peaks) still get a fair share of nodes
            n = max(2, int(math.ceil(n_total * (x1 - x0) / length)), n_total // (4 * (len(pts) - 1)))
            s += simpson(f, x0, x1, n)
        return s

    prev = total(nodes)
    while True:
        nodes *= 2
        cur = total(nodes)
        if abs(cur - prev) < tol or nodes >= max_nodes:
            return cur
        prev = cur


def _circle_breaks(model: DetectionModel, centers) -> list:
    out = []
    for c in centers:
        out.append(c + math.pi)
        if model.kind is ModelKind.SLIT:
            out.extend([c - 0.5 * model.delta, c + 0.5 * model.delta])
        elif 8 * model.delta < math.pi:
            out.extend([c - 8 * model.delta, c + 8 * model.delta])
    return [float(np.mod(x, TWO_PI)) for x in out]


def quadrature_oracle_coincidence(model: DetectionModel, a: float, b: float,
                                  ports: tuple[str, str] = ("+", "+")) -> float:
    """Coincidence probability by direct integration over a uniform hidden angle."""
    want_a = 0 if ports[0] == "+" else 1
    want_b = 0 if ports[1] == "+" else 1

    def integrand(lam):
        acc = np.zeros_like(lam)
        for ptype in (PairType.ALPHA, PairType.BETA):
            for sub in (Substate.PLUS, Substate.MINUS):
                pa = port_probabilities(ptype, lam, sub, Station.A, a, model)[want_a]
                pb = port_probabilities(ptype, lam, sub, Station.B, b, model)[want_b]
                acc += 0.25 * pa * pb
        return acc / TWO_PI

    return piecewise_simpson(integrand, _circle_breaks(model, (a, b)), 0.0, TWO_PI)


def _spread_bounds(spread: str, center: float):
    if spread == "full_circle":
        return center - math.pi, center + math.pi
    if spread == "unit_interval":
        return center - 0.5, center + 0.5
    raise ValueError(f"unknown spread {spread!r}")


def _mean_over_spread(fn, model: DetectionModel, spread: str, center: float) -> float:
    lo, hi = _spread_bounds(spread, center)
    breaks = []
    if model.kind is ModelKind.SLIT:
        breaks = [center - 0.5 * model.delta, center + 0.5 * model.delta]
    elif 8 * model.delta < hi - center:
        breaks = [center - 8 * model.delta, center + 8 * model.delta]
    return piecewise_simpson(lambda x: fn(model.acceptance(x - center)), breaks, lo, hi) / (hi - lo)


def quadrature_mean_eta(model: DetectionModel, spread: str, a: float = 0.0, b: float = 0.0,
                        station: str = "A") -> dict:
    """Oracle for the ensemble efficiency at ``t = τ``.

    The hidden angles at ``τ`` are independent and distributed per ``spread``.
    Returns the mean of the per-pulse ratio (``mean``), the ratio of
    expected coincidences to expected singles (``pooled``, what pooled event
    counts estimate) and the single-exponential average (``single``).
    """
    gate_own, gate_other = (a, b) if station == "A" else (b, a)
    e_own = _mean_over_spread(lambda g: g, model, spread, gate_own)
    e_other = _mean_over_spread(lambda g: g, model, spread, gate_other)
    e_ratio = _mean_over_spread(lambda g: g / (1 + g), model, spread, gate_own)
    e_inv = _mean_over_spread(lambda g: 1 / (1 + g), model, spread, gate_own)
    single = _mean_over_spread(
        lambda g: np.exp(np.log(np.maximum(g, 1e-300)) / DELTA_RATIO ** 2), model, spread, gate_own) \
        if model.kind is ModelKind.GAUSSIAN else float("nan")
    return {"mean": e_ratio + e_other * e_inv, "pooled": (e_own + e_other) / (1 + e_own),
            "single": single}


# --------------------------------------------------------------------------
# CHSH
# --------------------------------------------------------------------------


def correlation(counts) -> tuple[float, float]:
    """``E = (N++ + N-- - N+- - N-+) / N`` and its binomial error."""
    c = np.asarray(counts, dtype=np.float64)
    n = c.sum()
    if not n > 0:
        raise InsufficientCountsError("no coincidences")
    e = (c[0] + c[3] - c[1] - c[2]) / n
    return float(e), math.sqrt(max(1.0 - e * e, 0.0) / n)


def chsh_from_counts(counts) -> tuple[float, float]:
    """S from a 4 (settings) x 4 (ports ``++ +- -+ --``) count table.

    Settings are ordered (a, b), (a, b'), (a', b), (a', b') with
    a = 0, a' = π/4, b = π/8, b' = 3π/8.
    """
    c = np.asarray(counts, dtype=np.float64)
    if c.shape != (4, 4):
        raise ValueError(f"expected a 4x4 count table, got shape {c.shape}")
    s = 0.0
    var = 0.0
    for i, sign in enumerate(CHSH_SIGNS):
        if not c[i].sum() > 0:
            raise InsufficientCountsError(f"setting #{i} has no coincidences")
        e, err = correlation(c[i])
        s += sign * e
        var += err * err
    return s, math.sqrt(var)


def chsh_probability_table(delta: float) -> np.ndarray:
    """Exact slit coincidence probabilities at the CHSH settings (no sampling)."""
    from .hvcore import CHSH_SETTINGS, coincidence_probability_slit

    ports = (("+", "+"), ("+", "-"), ("-", "+"), ("-", "-"))
    return np.array([[coincidence_probability_slit(a, b, p, delta) for p in ports]
                     for a, b in CHSH_SETTINGS])


def grid_search_fit(t, eta, eta_err, base_params, gamma_tau_values, delta_values,
                    station: str = "A") -> list:
    """Chi-square ranking of (Γτ, Δ) candidates against a measured efficiency curve.

    Each candidate reruns the ensemble on ``base_params`` (times in the same
    units as ``t``) and compares the pooled efficiency bin by bin.  Returns
    ``(chi2, gamma_tau, delta)`` tuples, best first.
    """
    from dataclasses import replace

    from .ensemble import ensemble_efficiency

    t = np.asarray(t, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    err = np.asarray(eta_err, dtype=np.float64)
    rows = []
    for gt in gamma_tau_values:
        drive = replace(base_params.drive, gamma_peak=gt / base_params.tau)
        for d in delta_values:
            model = DetectionModel(base_params.model.kind, d)
            curve = ensemble_efficiency(replace(base_params, drive=drive, model=model), station=station)
            pred = np.interp(t, curve.bin_centers, curve.eta_pooled)
            ok = np.isfinite(eta) & (err > 0)
            chi2 = float(np.sum(((eta[ok] - pred[ok]) / err[ok]) ** 2))
            rows.append((chi2, float(gt), float(d)))
    rows.sort()
    return rows
