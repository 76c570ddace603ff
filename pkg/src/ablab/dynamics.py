"""Delayed-reaction dynamics of the emitted hidden angle.

The source angle obeys ``dα/dt = -Γ(t - τ) [α(t - τ) - a(t - τ/2)]``.  It is
marched with forward Euler on a grid of step ``h = τ/N``, so both delays
land on grid nodes (``N`` must be even).  The first ``N + 1`` samples, on
``[0, τ]``, are the random history emitted before any reaction arrives.
"""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .hvcore import TWO_PI, ParameterError, wrap
from .kernels import euler_delay

DIVERGENCE_BOUND = 1e3
INV_E = math.exp(-1.0)
CRITICAL_TOL = 1e-9


@dataclass(frozen=True)
class DriveSchedule:
    """Trapezoidal pump pulse; ``Γ(t) = gamma_peak * envelope(t)``.

    ``pulse_duration`` is the full width including both ramps (``None`` keeps
    the pump on forever).  ``period`` is the pulse repetition time 1/R_p.
    """

    gamma_peak: float
    t_on: float = 0.0
    pulse_duration: Optional[float] = None
    rise_fall: float = 0.0
    period: Optional[float] = None

    def __post_init__(self) -> None:
        if not math.isfinite(self.gamma_peak) or self.gamma_peak < 0:
            raise ParameterError(f"gamma_peak must be finite and >= 0, got {self.gamma_peak}")
        if self.rise_fall < 0:
            raise ParameterError("rise_fall must be >= 0")
        if self.pulse_duration is not None:
            if self.pulse_duration <= 0:
                raise ParameterError("pulse_duration must be positive")
            if 2 * self.rise_fall > self.pulse_duration:
                raise ParameterError("ramps longer than the pulse")
        if self.period is not None and self.period <= 0:
            raise ParameterError("period must be positive")

    @classmethod
    def constant(cls, gamma: float, t_on: float = 0.0) -> "DriveSchedule":
        return cls(gamma_peak=gamma, t_on=t_on)

    def envelope(self, t):
        t = np.asarray(t, dtype=np.float64) - self.t_on
        if self.rise_fall > 0:
            up = np.clip(t / self.rise_fall, 0.0, 1.0)
        else:
            up = (t >= 0).astype(np.float64)
        if self.pulse_duration is None:
            return up
        t_end = self.pulse_duration
        if self.rise_fall > 0:
            down = np.clip((t_end - t) / self.rise_fall, 0.0, 1.0)
        else:
            down = (t < t_end).astype(np.float64)
        return np.minimum(up, down)

    def gamma(self, t):
        return self.gamma_peak * self.envelope(t)

    @property
    def gap(self) -> Optional[float]:
        """Dark time between the end of one pulse and the start of the next."""
        if self.period is None:
            return None
        width = self.pulse_duration if self.pulse_duration is not None else self.period
        return max(self.period - width, 0.0)


@dataclass(frozen=True)
class SettingSchedule:
    """Piecewise-constant analyzer angles.

    ``a_values[i]`` holds on ``[a_times[i], a_times[i+1])``; the first value
    also covers every earlier time.
    """

    a_times: tuple = (0.0,)
    a_values: tuple = (0.0,)
    b_times: tuple = (0.0,)
    b_values: tuple = (0.0,)

    def __post_init__(self) -> None:
        for times, values in ((self.a_times, self.a_values), (self.b_times, self.b_values)):
            if len(times) != len(values) or not values:
                raise ParameterError("schedule times and values differ in length")
            if any(t1 < t0 for t0, t1 in zip(times, times[1:])):
                raise ParameterError("schedule times must be sorted")

    @classmethod
    def constant(cls, a: float, b: float) -> "SettingSchedule":
        return cls((0.0,), (float(a),), (0.0,), (float(b),))

    @staticmethod
    def _eval(times, values, t):
        idx = np.searchsorted(np.asarray(times), np.asarray(t, dtype=np.float64), side="right") - 1
        return np.asarray(values, dtype=np.float64)[np.clip(idx, 0, len(values) - 1)]

    def a(self, t):
        return self._eval(self.a_times, self.a_values, t)

    def b(self, t):
        return self._eval(self.b_times, self.b_values, t)

    def target(self, variable: str):
        if variable == "alpha":
            return self.a
        if variable == "beta":
            return self.b
        raise ParameterError(f"variable must be 'alpha' or 'beta', got {variable!r}")


class RegimeClass(str, enum.Enum):
    MONOTONIC = "monotonic"
    CRITICAL = "critical"
    DAMPED_OSCILLATORY = "damped_oscillatory"
    DIVERGENT = "divergent"


@dataclass(frozen=True)
class Regime:
    cls: RegimeClass
    gamma_tau: float
    approximate: bool = False


@dataclass(frozen=True, eq=False)
class Trajectory:
    tau: float
    n_substeps: int
    samples: np.ndarray
    target: np.ndarray
    gamma_t: np.ndarray
    divergence_flag: bool
    history_seed: Optional[int] = None
    t_on: float = 0.0
    variable: str = "alpha"

    def __post_init__(self) -> None:
        for name in ("samples", "target", "gamma_t"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def grid_step(self) -> float:
        return self.tau / self.n_substeps

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.samples.size) * self.grid_step

    @property
    def mismatch(self) -> np.ndarray:
        return wrap(self.samples - self.target)

    @property
    def evolution_onset(self) -> float:
        """First instant at which the delayed feedback carries non-random values."""
        return max(2.0 * self.tau, self.t_on + self.tau)


def validate_grid(tau: float, n_substeps: int) -> None:
    if not (math.isfinite(tau) and tau > 0):
        raise ParameterError(f"tau must be positive, got {tau}")
    if int(n_substeps) != n_substeps or n_substeps < 2:
        raise ParameterError(f"n_substeps must be an integer >= 2, got {n_substeps}")
    if n_substeps % 2:
        raise ParameterError(f"n_substeps must be even so tau/2 lands on the grid, got {n_substeps}")


def random_history(n_substeps: int, rng: np.random.Generator, center: float = 0.0, size=None):
    """Uniform angles on the circle, represented on the branch nearest ``center``.

    The draws are uniform in [0, 2π); only the 2π representative changes, so
    the distribution on the circle is untouched while the delayed mismatch
    ``α(t - τ) - a`` is symmetric about zero.
    """
    shape = (n_substeps + 1,) if size is None else (size, n_substeps + 1)
    u = rng.uniform(0.0, TWO_PI, size=shape)
    return center + wrap(u - center)


def lagged_inputs(tau: float, n_substeps: int, drive: DriveSchedule, target_fn, n_steps: int):
    """Delayed drive and target read by the Euler steps ``k = N .. N + n_steps - 1``."""
    h = tau / n_substeps
    s = np.arange(n_steps)
    gamma_lag = drive.gamma(s * h)  # Γ(t_k - τ), t_k = (N + s) h
    target_lag = target_fn((n_substeps // 2 + s) * h)  # a(t_k - τ/2)
    return gamma_lag, target_lag


def n_grid_steps(tau: float, n_substeps: int, duration: float) -> int:
    if duration < tau * (1 - 1e-12):
        raise ParameterError(f"duration {duration} shorter than tau {tau}")
    total = int(round(duration / (tau / n_substeps)))
    return max(total - n_substeps, 0)


def integrate_batch(tau: float, n_substeps: int, drive: DriveSchedule, target_fn,
                    histories: np.ndarray, duration: float) -> np.ndarray:
    """Integrate many histories sharing drive and target; returns ``(pulses, grid)``."""
    validate_grid(tau, n_substeps)
    histories = np.atleast_2d(np.asarray(histories, dtype=np.float64))
    n_steps = n_grid_steps(tau, n_substeps, duration)
    gamma_lag, target_lag = lagged_inputs(tau, n_substeps, drive, target_fn, n_steps)
    return euler_delay(histories, gamma_lag, target_lag, n_substeps, tau / n_substeps)


def integrate(tau: float, n_substeps: int, drive: DriveSchedule, settings: SettingSchedule,
              history: Sequence[float], duration: float, variable: str = "alpha",
              history_seed: Optional[int] = None) -> Trajectory:
    validate_grid(tau, n_substeps)
    history = np.asarray(history, dtype=np.float64)
    if history.ndim != 1 or history.size != n_substeps + 1:
        raise ParameterError(
            f"history must hold exactly n_substeps + 1 = {n_substeps + 1} samples, got {history.size}")
    target_fn = settings.target(variable)
    samples = integrate_batch(tau, n_substeps, drive, target_fn, history[None, :], duration)[0]
    t = np.arange(samples.size) * (tau / n_substeps)
    target = target_fn(t)
    with np.errstate(invalid="ignore"):
        diverged = bool(np.any(~(np.abs(samples - target) <= DIVERGENCE_BOUND)))
    return Trajectory(tau=tau, n_substeps=int(n_substeps), samples=samples, target=target,
                      gamma_t=drive.gamma(t), divergence_flag=diverged,
                      history_seed=history_seed, t_on=drive.t_on, variable=variable)


def classify_regime(gamma_tau: float, approximate: bool = False) -> Regime:
    if not math.isfinite(gamma_tau) or gamma_tau < 0:
        raise ParameterError(f"gamma*tau must be >= 0, got {gamma_tau}")
    if abs(gamma_tau - INV_E) <= CRITICAL_TOL:
        cls = RegimeClass.CRITICAL
    elif gamma_tau < INV_E:
        cls = RegimeClass.MONOTONIC
    elif gamma_tau < math.pi / 2:
        cls = RegimeClass.DAMPED_OSCILLATORY
    else:
        cls = RegimeClass.DIVERGENT
    return Regime(cls, float(gamma_tau), approximate)


def classify_drive(drive: DriveSchedule, tau: float) -> Regime:
    """Regime from the peak drive; flagged approximate unless the drive is a plain step."""
    varying = drive.pulse_duration is not None or drive.rise_fall > 0
    return classify_regime(drive.gamma_peak * tau, approximate=varying)


def crossing_times(traj: Trajectory, target: Optional[float] = None) -> np.ndarray:
    """Times after ``τ`` where the wrapped mismatch changes sign (linear interpolation)."""
    start = traj.n_substeps
    x = traj.samples[start:]
    ref = traj.target[start:] if target is None else np.full(x.size, float(target))
    d = wrap(x - ref)
    d0, d1 = d[:-1], d[1:]
    # ignore jumps across the ±π branch cut
    hit = (np.sign(d0) * np.sign(d1) < 0) & (np.abs(d1 - d0) < math.pi)
    idx = np.nonzero(hit)[0]
    frac = d0[idx] / (d0[idx] - d1[idx])
    return (start + idx + frac) * traj.grid_step


def settle_time(traj: Trajectory, fraction: float) -> Optional[float]:
    """Time to close ``fraction`` of the initial mismatch ``|α(τ) - a|`` and hold it for ``τ``.

    Measured from :attr:`Trajectory.evolution_onset`, the moment the source
    starts reacting to non-random delayed values.
    """
    if not 0.0 < fraction < 1.0:
        raise ParameterError(f"fraction must be in (0, 1), got {fraction}")
    n = traj.n_substeps
    mis = np.abs(traj.mismatch)
    ref = mis[n]
    if not ref > 0:
        return None
    ok = mis[n:] <= (1.0 - fraction) * ref
    # ok must hold on every node of [t, t + τ]
    bad = np.concatenate(([0], np.cumsum(~ok)))
    width = n + 1
    if ok.size < width:
        return None
    window_bad = bad[width:] - bad[:-width]
    good = np.nonzero(window_bad == 0)[0]
    if good.size == 0:
        return None
    t = (n + good[0]) * traj.grid_step
    return t - traj.evolution_onset


def window_maxima(traj: Trajectory, width: float = None) -> np.ndarray:
    """max |α - a| on consecutive windows ``[kW, (k+1)W]`` (default ``W = τ``)."""
    step = traj.n_substeps if width is None else max(int(round(width / traj.grid_step)), 1)
    mis = np.abs(traj.samples - traj.target)
    k = (mis.size - 1) // step
    return np.array([mis[i * step:(i + 1) * step + 1].max() for i in range(k)])


def envelope_peaks(traj: Trajectory) -> tuple[np.ndarray, np.ndarray]:
    """Local maxima of ``|α - a|`` after ``τ``: (times, heights)."""
    n = traj.n_substeps
    mis = np.abs(traj.samples[n:] - traj.target[n:])
    inner = (mis[1:-1] > mis[:-2]) & (mis[1:-1] >= mis[2:])
    idx = np.nonzero(inner)[0] + 1
    return (n + idx) * traj.grid_step, mis[idx]


def write_trajectory_csv(path, alpha: Trajectory, beta: Optional[Trajectory] = None) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# tau={alpha.tau!r} n_substeps={alpha.n_substeps} seed={alpha.history_seed}"
                 f" divergent={int(alpha.divergence_flag or (beta is not None and beta.divergence_flag))}\n")
        w = csv.writer(fh)
        cols = ["t", "alpha"] + (["beta"] if beta is not None else []) + ["gamma_t"]
        w.writerow(cols)
        for k, t in enumerate(alpha.times):
            row = [repr(float(t)), repr(float(alpha.samples[k]))]
            if beta is not None:
                row.append(repr(float(beta.samples[k])))
            row.append(repr(float(alpha.gamma_t[k])))
            w.writerow(row)


def read_trajectory_csv(path) -> dict:
    with open(path) as fh:
        header = fh.readline().lstrip("#").split()
        meta = dict(item.split("=", 1) for item in header)
        rows = list(csv.reader(fh))
    cols = rows[0]
    data = np.array(rows[1:], dtype=np.float64)
    out = {"meta": meta}
    for i, c in enumerate(cols):
        out[c] = data[:, i] if data.size else np.empty(0)
    return out


def characteristic_root(gamma_tau: float, branch: int = 0) -> complex:
    """Root ``z`` of ``z = -Γτ e^{-z}``; solutions go as ``exp(z t / τ)``."""
    from scipy.special import lambertw

    return complex(lambertw(-gamma_tau, branch))
