"""Pulse ensembles: averaged efficiency curves and simulated photon streams.

Every pump pulse starts a fresh pair of trajectories (α for station A, β
for station B).  The probability level averages the per-pulse efficiency
over pulses; the event level samples photon pairs along the same
trajectories and writes time-tagged runs for the analysis pipeline.
"""
from __future__ import annotations

import csv
import enum
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .dynamics import (DIVERGENCE_BOUND, DriveSchedule, RegimeClass, SettingSchedule,
                       classify_drive, integrate_batch, random_history, validate_grid)
from .hvcore import DetectionModel, ParameterError, detect_pairs, sample_pairs, wrap
from .timetag import SPEED_OF_LIGHT, Channel, RunFile, RunHeader, merge_events

EMISSION_WARN = 0.1
SATURATION_BAND = 0.05


class InitialSpread(str, enum.Enum):
    """Distribution of α(τ), β(τ): the whole circle, or ``target ± 1/2``."""

    FULL_CIRCLE = "full_circle"
    UNIT_INTERVAL = "unit_interval"


@dataclass(frozen=True)
class PulseEnsembleParams:
    n_pulses: int
    tau: float
    n_substeps: int
    model: DetectionModel
    drive: DriveSchedule
    settings: SettingSchedule
    master_seed: int
    duration: float
    memory_tau_d: Optional[float] = None
    initial_spread: InitialSpread = InitialSpread.FULL_CIRCLE
    chunk_size: int = 64
    stride: int = 1

    def __post_init__(self) -> None:
        validate_grid(self.tau, self.n_substeps)
        object.__setattr__(self, "initial_spread", InitialSpread(self.initial_spread))
        if int(self.n_pulses) != self.n_pulses or self.n_pulses < 1:
            raise ParameterError(f"n_pulses must be >= 1, got {self.n_pulses}")
        if self.duration < self.tau:
            raise ParameterError("duration must cover at least one tau")
        if self.memory_tau_d is not None:
            if not self.memory_tau_d > 0:
                raise ParameterError("memory_tau_d must be positive")
            if self.drive.period is None:
                raise ParameterError("memory carryover needs the pulse period in the drive")
        if self.chunk_size < 1 or self.stride < 1:
            raise ParameterError("chunk_size and stride must be >= 1")

    @property
    def grid_step(self) -> float:
        return self.tau / self.n_substeps


@dataclass(frozen=True, eq=False)
class EfficiencyCurve:
    """Per-bin ensemble efficiency.

    ``eta_mean`` averages the per-pulse ratio; ``eta_pooled`` is the ratio
    of the averaged numerator and denominator, which is what pooled event
    counts estimate.
    """

    bin_centers: np.ndarray
    eta_mean: np.ndarray
    eta_stderr: np.ndarray
    n_contributing: np.ndarray
    eta_pooled: np.ndarray
    divergent_fraction: float = 0.0
    station: str = "A"

    def __len__(self) -> int:
        return self.bin_centers.size

    def at(self, t: float) -> int:
        """Index of the bin nearest ``t``."""
        return int(np.argmin(np.abs(self.bin_centers - t)))


@dataclass(frozen=True, eq=False)
class PulseEfficiency:
    times: np.ndarray
    eta_a: np.ndarray
    eta_b: np.ndarray
    divergent: bool


# --------------------------------------------------------------------------
# trajectories
# --------------------------------------------------------------------------


def memory_carryover(prev_final, gap: float, tau_d: float, rng: np.random.Generator):
    """Initial ``(α(τ), β(τ))`` for the next pulse, or ``None`` for a fresh random start.

    The previous final values survive the dark gap with probability
    ``exp(-gap / τ_d)``.
    """
    if not tau_d > 0:
        raise ParameterError("tau_d must be positive")
    if gap < 0:
        raise ParameterError("gap must be >= 0")
    if rng.random() < math.exp(-gap / tau_d):
        return tuple(float(x) for x in prev_final)
    return None


def _centers(params: PulseEnsembleParams) -> tuple[float, float]:
    return float(params.settings.a(params.tau)), float(params.settings.b(params.tau))


def _fresh_histories(params: PulseEnsembleParams, k: int):
    rng = np.random.default_rng([params.master_seed, k])
    ca, cb = _centers(params)
    ha = random_history(params.n_substeps, rng, ca)
    hb = random_history(params.n_substeps, rng, cb)
    if params.initial_spread is InitialSpread.UNIT_INTERVAL:
        ha[-1] = ca + rng.uniform(-0.5, 0.5)
        hb[-1] = cb + rng.uniform(-0.5, 0.5)
    return ha, hb


def _integrate_pair(params: PulseEnsembleParams, ha, hb):
    xa = integrate_batch(params.tau, params.n_substeps, params.drive, params.settings.a, ha,
                         params.duration)
    xb = integrate_batch(params.tau, params.n_substeps, params.drive, params.settings.b, hb,
                         params.duration)
    return xa, xb


def pulse_trajectories(params: PulseEnsembleParams, start: int, stop: int):
    """α and β grids for pulses ``start..stop-1`` without memory; shape ``(P, grid)``."""
    hs = [_fresh_histories(params, k) for k in range(start, stop)]
    ha = np.stack([h[0] for h in hs])
    hb = np.stack([h[1] for h in hs])
    return _integrate_pair(params, ha, hb)


def _iter_memory_trajectories(params: PulseEnsembleParams, stop: int):
    """Sequential pulses with carryover; yields ``(k, α grid, β grid)``."""
    gap = params.drive.gap
    ca, cb = _centers(params)
    prev = None
    for k in range(stop):
        ha, hb = _fresh_histories(params, k)
        if prev is not None:
            rng = np.random.default_rng([params.master_seed, k, 2])
            carried = memory_carryover(prev, gap, params.memory_tau_d, rng)
            if carried is not None:
                ha[-1] = ca + wrap(carried[0] - ca)
                hb[-1] = cb + wrap(carried[1] - cb)
        xa, xb = _integrate_pair(params, ha[None, :], hb[None, :])
        prev = (xa[0, -1], xb[0, -1])
        yield k, xa, xb


def _grid_times(params: PulseEnsembleParams, n_grid: int) -> np.ndarray:
    return np.arange(n_grid) * params.grid_step


def _gates(params: PulseEnsembleParams, xa, xb):
    t = _grid_times(params, xa.shape[1])
    with np.errstate(invalid="ignore", over="ignore"):
        ga = params.model.acceptance(xa - params.settings.a(t))
        gb = params.model.acceptance(xb - params.settings.b(t))
    return ga, gb


def _divergent(params: PulseEnsembleParams, xa, xb) -> np.ndarray:
    t = _grid_times(params, xa.shape[1])
    with np.errstate(invalid="ignore"):
        da = ~(np.abs(xa - params.settings.a(t)) <= DIVERGENCE_BOUND)
        db = ~(np.abs(xb - params.settings.b(t)) <= DIVERGENCE_BOUND)
    return (da | db).any(axis=1)


def pointwise_efficiency(mismatch_a, mismatch_b, model: DetectionModel):
    """``(η_A, η_B)`` for angle mismatches ``α - a`` and ``β - b``.

    The numerator counts coincidences from both pair types; each station's
    singles carry its own gate, so ``η_A = (g_a + g_b) / (1 + g_a)``.
    """
    ga = model.acceptance(mismatch_a)
    gb = model.acceptance(mismatch_b)
    return (ga + gb) / (1 + ga), (ga + gb) / (1 + gb)


def pulse_efficiency(params: PulseEnsembleParams, pulse_index: int) -> PulseEfficiency:
    """Per-grid-point efficiencies ``(η_A, η_B)`` of one pulse."""
    if not 0 <= pulse_index < params.n_pulses:
        raise ParameterError(f"pulse_index must be in [0, {params.n_pulses}), got {pulse_index}")
    if params.memory_tau_d is None:
        xa, xb = pulse_trajectories(params, pulse_index, pulse_index + 1)
    else:
        for _, xa, xb in _iter_memory_trajectories(params, pulse_index + 1):
            pass
    ga, gb = _gates(params, xa, xb)
    num = ga + gb
    return PulseEfficiency(_grid_times(params, xa.shape[1]), (num / (1 + ga))[0],
                           (num / (1 + gb))[0], bool(_divergent(params, xa, xb)[0]))


# --------------------------------------------------------------------------
# probability-level ensemble
# --------------------------------------------------------------------------


def _chunk_sums(params: PulseEnsembleParams, xa, xb, station: str):
    ga, gb = _gates(params, xa, xb)
    s = slice(None, None, params.stride)
    ga, gb = ga[:, s], gb[:, s]
    num = ga + gb
    den = 1 + (ga if station == "A" else gb)
    eta = num / den
    ok = np.isfinite(eta)
    eta0 = np.where(ok, eta, 0.0)
    return (eta0.sum(0), (eta0 * eta0).sum(0), ok.sum(0), np.where(ok, num, 0).sum(0),
            np.where(ok, den, 0).sum(0), int(_divergent(params, xa, xb).sum()))


def ensemble_efficiency(params: PulseEnsembleParams, station: str = "A",
                        workers: int = 1) -> EfficiencyCurve:
    """Average of the per-pulse efficiency over ``n_pulses``.

    Pulses are processed in fixed chunks whose partial sums are combined in
    chunk order, so the result does not depend on ``workers``.
    """
    if station not in ("A", "B"):
        raise ParameterError(f"station must be 'A' or 'B', got {station!r}")
    n = params.n_pulses
    if params.memory_tau_d is None:
        bounds = [(i, min(i + params.chunk_size, n)) for i in range(0, n, params.chunk_size)]

        def job(b):
            return _chunk_sums(params, *pulse_trajectories(params, *b), station)

        if workers > 1 and len(bounds) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                parts = list(pool.map(job, bounds))
        else:
            parts = [job(b) for b in bounds]
    else:
        parts = [_chunk_sums(params, xa, xb, station)
                 for _, xa, xb in _iter_memory_trajectories(params, n)]

    s1 = parts[0][0].copy()
    s2, cnt, num, den = (parts[0][i].copy() for i in (1, 2, 3, 4))
    n_div = parts[0][5]
    for p in parts[1:]:
        s1 += p[0]
        s2 += p[1]
        cnt += p[2]
        num += p[3]
        den += p[4]
        n_div += p[5]
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = s1 / cnt
        var = np.maximum(s2 - cnt * mean * mean, 0.0) / np.maximum(cnt - 1, 1)
        stderr = np.sqrt(var / cnt)
        pooled = num / den
    grid = parts[0][0].size
    t = np.arange(grid) * params.grid_step * params.stride
    return EfficiencyCurve(t, mean, stderr, cnt.astype(np.int64), pooled, n_div / n, station)


def write_curve_csv(path, curve: EfficiencyCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "eta_mean", "eta_stderr", "n", "eta_pooled"])
        for i in range(len(curve)):
            w.writerow([repr(float(curve.bin_centers[i])), repr(float(curve.eta_mean[i])),
                        repr(float(curve.eta_stderr[i])), int(curve.n_contributing[i]),
                        repr(float(curve.eta_pooled[i]))])


def read_curve_csv(path) -> EfficiencyCurve:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return EfficiencyCurve(data[:, 0], data[:, 1], data[:, 2], data[:, 3].astype(np.int64),
                           data[:, 4])


# --------------------------------------------------------------------------
# event level
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PhotonStreamParams:
    """Event sampler settings; times in seconds, ``tau_res`` is the tick length."""

    ensemble: PulseEnsembleParams
    emission_prob_per_bin: float
    tau_res: float

    def __post_init__(self) -> None:
        p = self.emission_prob_per_bin
        if not 0.0 <= p <= 1.0:
            raise ParameterError(f"emission probability must be in [0, 1], got {p}")
        if p > EMISSION_WARN:
            warnings.warn(f"emission probability {p} per bin: double emissions are not negligible",
                          RuntimeWarning, stacklevel=3)
        if not self.tau_res > 0:
            raise ParameterError("tau_res must be positive")
        if self.tau_res > self.ensemble.duration:
            raise ParameterError("tau_res longer than the pulse")

    @property
    def period(self) -> float:
        d = self.ensemble.drive
        return d.period if d.period is not None else self.ensemble.duration

    @property
    def period_ticks(self) -> int:
        return max(int(round(self.period / self.tau_res)), 1)

    @property
    def bins_per_pulse(self) -> int:
        return min(int(math.floor(self.ensemble.duration / self.tau_res + 1e-9)), self.period_ticks)

    def header(self, setting_a: float, setting_b: float) -> RunHeader:
        e = self.ensemble
        return RunHeader(setting_a=setting_a, setting_b=setting_b, tau_res=self.tau_res,
                         rp=1.0 / self.period,
                         tau_pulse=e.drive.pulse_duration or e.duration,
                         L=e.tau * SPEED_OF_LIGHT, duration=e.n_pulses * self.period,
                         seed=e.master_seed)


def _sample_events(params: PhotonStreamParams, k: int, xa, xb):
    """Events of pulse ``k`` given its trajectories (1-D grids)."""
    e = params.ensemble
    rng = np.random.default_rng([e.master_seed, k, 1])
    n_bins = params.bins_per_pulse
    centers = (np.arange(n_bins) + 0.5) * params.tau_res
    # the pump envelope sets the pair rate; Γ only scales the reaction
    prob = params.emission_prob_per_bin * e.drive.envelope(centers)
    emitted = np.nonzero(rng.random(n_bins) < prob)[0]
    m = emitted.size
    t = centers[emitted]
    idx = np.minimum(np.rint(t / e.grid_step).astype(np.int64), xa.size - 1)
    ptype, _, sub = sample_pairs(m, rng, values=np.empty(m))
    values = np.where(ptype == 0, xa[idx], xb[idx])
    out_a, out_b = detect_pairs(ptype, values, sub, e.settings.a(t), e.settings.b(t), e.model, rng)
    base = k * params.period_ticks
    ticks, chans = [np.array([base], dtype=np.int64)], [np.array([Channel.PULSE], dtype=np.uint8)]
    for out, plus, minus in ((out_a, Channel.A_PLUS, Channel.A_MINUS),
                             (out_b, Channel.B_PLUS, Channel.B_MINUS)):
        hit = out != 0
        ticks.append(base + emitted[hit])
        chans.append(np.where(out[hit] == 1, plus, minus).astype(np.uint8))
    return ticks, chans


def generate_photon_stream(params: PhotonStreamParams, workers: int = 1) -> RunFile:
    """Time-tagged run: a pulse marker per pulse and the A/B detections.

    Pairs are emitted per τ_res bin at a rate following the pump envelope;
    the hidden value follows the pulse's trajectory at the bin centre.
    Settings in the header are those at τ.
    """
    e = params.ensemble
    ticks: list = []
    chans: list = []
    if e.memory_tau_d is None:
        bounds = [(i, min(i + e.chunk_size, e.n_pulses)) for i in range(0, e.n_pulses, e.chunk_size)]

        def job(b):
            xa, xb = pulse_trajectories(e, *b)
            tt, cc = [], []
            for j, k in enumerate(range(*b)):
                t1, c1 = _sample_events(params, k, xa[j], xb[j])
                tt += t1
                cc += c1
            return tt, cc

        if workers > 1 and len(bounds) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                parts = list(pool.map(job, bounds))
        else:
            parts = [job(b) for b in bounds]
        for tt, cc in parts:
            ticks += tt
            chans += cc
    else:
        for k, xa, xb in _iter_memory_trajectories(e, e.n_pulses):
            t1, c1 = _sample_events(params, k, xa[0], xb[0])
            ticks += t1
            chans += c1
    t_all, c_all = merge_events(ticks, chans)
    ca, cb = _centers(e)
    return RunFile(params.header(ca, cb), t_all, c_all)


# --------------------------------------------------------------------------
# sweeps
# --------------------------------------------------------------------------


def curve_peaks(curve: EfficiencyCurve, t_min: float = 0.0, prominence: Optional[float] = None):
    """Peak times of ``eta_mean`` after ``t_min``; prominence defaults to 3 stderr."""
    from scipy.signal import find_peaks

    m = curve.bin_centers >= t_min
    y = curve.eta_mean[m]
    if prominence is None:
        err = curve.eta_stderr[m]
        prominence = max(3.0 * float(np.nanmedian(err)) if err.size else 0.0, 1e-3)
    idx, _ = find_peaks(y, prominence=prominence)
    return curve.bin_centers[m][idx]


def saturation_time(curve: EfficiencyCurve, t_on: float = 0.0, tau: float = 0.0,
                    band: float = SATURATION_BAND) -> Optional[float]:
    """Time after ``t_on`` at which ``eta_mean`` first comes within ``band`` of its plateau.

    Only ``t >= t_on + tau`` is searched: earlier values are the random
    history.  The plateau is the mean over the last tenth of the curve.  A
    curve that never leaves the band is flat and has no saturation time.
    """
    m = curve.bin_centers >= t_on + tau
    t, y = curve.bin_centers[m], curve.eta_mean[m]
    if t.size < 10:
        return None
    plateau = float(np.mean(y[-max(t.size // 10, 1):]))
    near = np.abs(y - plateau) <= band * abs(plateau)
    if near.all():
        return None
    first = np.nonzero(near)[0]
    return float(t[first[0]] - t_on) if first.size else None


@dataclass(frozen=True)
class SweepRow:
    tau: float
    gamma: float
    saturation_time: Optional[float]
    peak_spacing: Optional[float]
    oscillation_period: Optional[float]
    regime: str


def rescale(base: PulseEnsembleParams, tau: float, hold: str = "gamma_tau") -> PulseEnsembleParams:
    """Copy of ``base`` at delay ``tau`` with every time stretched by ``tau / base.tau``.

    ``hold="gamma_tau"`` keeps Γτ (Γ scales inversely); ``hold="gamma"`` keeps Γ.
    """
    if hold not in ("gamma_tau", "gamma"):
        raise ParameterError(f"hold must be 'gamma_tau' or 'gamma', got {hold!r}")
    r = tau / base.tau
    d = base.drive

    def sc(x):
        return None if x is None else x * r

    drive = DriveSchedule(gamma_peak=d.gamma_peak / r if hold == "gamma_tau" else d.gamma_peak,
                          t_on=d.t_on * r, pulse_duration=sc(d.pulse_duration),
                          rise_fall=d.rise_fall * r, period=sc(d.period))
    s = base.settings
    settings = SettingSchedule(tuple(x * r for x in s.a_times), s.a_values,
                               tuple(x * r for x in s.b_times), s.b_values)
    return replace(base, tau=tau, drive=drive, settings=settings, duration=base.duration * r)


def distance_sweep(base: PulseEnsembleParams, tau_values: Sequence[float],
                   hold: str = "gamma_tau", workers: int = 1) -> list[SweepRow]:
    """Saturation time and oscillation period of ⟨η⟩(t) as the delay changes.

    The period is twice the spacing of ⟨η⟩ peaks: the efficiency peaks each
    time the angle swings through the setting, twice per oscillation.
    """
    if len(tau_values) < 2:
        raise ParameterError("a sweep needs at least two tau values")
    rows = []
    for tau in tau_values:
        p = rescale(base, float(tau), hold)
        curve = ensemble_efficiency(p, workers=workers)
        regime = classify_drive(p.drive, p.tau)
        sat = None if p.drive.gamma_peak == 0 else saturation_time(curve, p.drive.t_on, p.tau)
        spacing = period = None
        if regime.cls is RegimeClass.DAMPED_OSCILLATORY:
            peaks = curve_peaks(curve, t_min=p.tau)
            if peaks.size >= 2:
                spacing = float(np.mean(np.diff(peaks)))
                period = 2.0 * spacing
        rows.append(SweepRow(p.tau, p.drive.gamma_peak, sat, spacing, period, regime.cls.value))
    return rows


def write_sweep_csv(path, rows: Sequence[SweepRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tau", "gamma", "saturation_time", "peak_spacing", "oscillation_period", "regime"])
        for r in rows:
            w.writerow([repr(r.tau), repr(r.gamma),
                        "" if r.saturation_time is None else repr(r.saturation_time),
                        "" if r.peak_spacing is None else repr(r.peak_spacing),
                        "" if r.oscillation_period is None else repr(r.oscillation_period),
                        r.regime])
