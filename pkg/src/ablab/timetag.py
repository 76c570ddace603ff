"""Time-tagged run files and the time-resolved efficiency / CHSH pipeline.

Run-file layout (UTF-8 text)::

    # format_version=1
    # tau_res_s=1.25e-08
    # rp_hz=60000.0
    # tau_pulse_s=3.5e-08
    # L_m=0.08
    # setting_a_rad=0.0
    # setting_b_rad=0.39269908169872414
    # source=SIMULATED
    # seed=7
    # duration_s=0.001
    P,0
    A+,12
    B-,12

Events are ``channel,timestamp_ticks`` with ticks of ``tau_res_s``;
timestamps never decrease.
"""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .analytics import InsufficientCountsError, chsh_from_counts, correlation
from .hvcore import CHSH_SETTINGS, CHSH_SIGNS
from .kernels import greedy_match

SPEED_OF_LIGHT = 299_792_458.0
FORMAT_VERSION = 1
LOW_COUNT_THRESHOLD = 10


class FormatError(ValueError):
    """A run file violates the format."""


class Channel(enum.IntEnum):
    A_PLUS = 0
    A_MINUS = 1
    B_PLUS = 2
    B_MINUS = 3
    PULSE = 4


CHANNEL_TAGS = {Channel.A_PLUS: "A+", Channel.A_MINUS: "A-", Channel.B_PLUS: "B+",
                Channel.B_MINUS: "B-", Channel.PULSE: "P"}
TAG_TO_CHANNEL = {v: int(k) for k, v in CHANNEL_TAGS.items()}
HEADER_KEYS = ("format_version", "tau_res_s", "rp_hz", "tau_pulse_s", "L_m", "setting_a_rad",
               "setting_b_rad", "source", "seed", "duration_s")


@dataclass(frozen=True)
class RunHeader:
    setting_a: float
    setting_b: float
    tau_res: float
    rp: float
    tau_pulse: float
    L: float
    duration: float
    source: str = "SIMULATED"
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        for name in ("tau_res", "rp", "tau_pulse", "L", "duration"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise FormatError(f"{name} must be positive, got {v}")
        if self.source not in ("SIMULATED", "EXTERNAL"):
            raise FormatError(f"source must be SIMULATED or EXTERNAL, got {self.source!r}")

    @property
    def tau(self) -> float:
        return self.L / SPEED_OF_LIGHT

    @property
    def period(self) -> float:
        return 1.0 / self.rp

    @property
    def period_ticks(self) -> int:
        return max(int(round(self.period / self.tau_res)), 1)


@dataclass(frozen=True, eq=False)
class RunFile:
    header: RunHeader
    ticks: np.ndarray
    channels: np.ndarray

    def __post_init__(self) -> None:
        ticks = np.asarray(self.ticks, dtype=np.int64)
        channels = np.asarray(self.channels, dtype=np.uint8)
        if ticks.shape != channels.shape or ticks.ndim != 1:
            raise FormatError("ticks and channels must be 1-D arrays of equal length")
        object.__setattr__(self, "ticks", ticks)
        object.__setattr__(self, "channels", channels)

    def select(self, *chans: int) -> np.ndarray:
        return np.isin(self.channels, np.asarray(chans, dtype=np.uint8))

    @property
    def markers(self) -> np.ndarray:
        return self.ticks[self.channels == Channel.PULSE]

    def station(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """Ticks of a station's detections and a mask of the ``+`` port."""
        plus, minus = (Channel.A_PLUS, Channel.A_MINUS) if name == "A" else (Channel.B_PLUS, Channel.B_MINUS)
        m = self.select(plus, minus)
        return self.ticks[m], self.channels[m] == plus


def merge_events(ticks_list: Iterable[np.ndarray], channel_list: Iterable[np.ndarray]):
    ticks = np.concatenate([np.asarray(t, dtype=np.int64) for t in ticks_list])
    chans = np.concatenate([np.asarray(c, dtype=np.uint8) for c in channel_list])
    order = np.lexsort((chans, ticks))
    return ticks[order], chans[order]


def _fmt_float(v: float) -> str:
    return repr(float(v))


def write_run(path, run: RunFile) -> None:
    if run.ticks.size and np.any(np.diff(run.ticks) < 0):
        raise FormatError("events must be sorted by timestamp")
    h = run.header
    head = {
        "format_version": str(FORMAT_VERSION),
        "tau_res_s": _fmt_float(h.tau_res),
        "rp_hz": _fmt_float(h.rp),
        "tau_pulse_s": _fmt_float(h.tau_pulse),
        "L_m": _fmt_float(h.L),
        "setting_a_rad": _fmt_float(h.setting_a),
        "setting_b_rad": _fmt_float(h.setting_b),
        "source": h.source,
        "seed": "none" if h.seed is None else str(int(h.seed)),
        "duration_s": _fmt_float(h.duration),
    }
    tags = np.array([CHANNEL_TAGS[Channel(c)] for c in range(5)], dtype=object)
    lines = [f"# {k}={head[k]}" for k in HEADER_KEYS]
    if run.ticks.size:
        body = np.char.add(np.char.add(tags[run.channels].astype(str), ","), run.ticks.astype(str))
        lines.extend(body.tolist())
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_run(path) -> RunFile:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    head: dict[str, str] = {}
    n_head = 0
    for n_head, line in enumerate(lines):
        if not line.startswith("#"):
            break
        body = line[1:].strip()
        if "=" not in body:
            raise FormatError(f"line {n_head + 1}: malformed header line {line!r}")
        k, v = body.split("=", 1)
        k = k.strip()
        if k not in HEADER_KEYS:
            raise FormatError(f"line {n_head + 1}: unknown header key {k!r}")
        if k in head:
            raise FormatError(f"line {n_head + 1}: duplicate header key {k!r}")
        head[k] = v.strip()
    else:
        n_head = len(lines)
    missing = [k for k in HEADER_KEYS if k not in head]
    if missing:
        raise FormatError(f"missing header keys: {', '.join(missing)}")
    if head["format_version"] != str(FORMAT_VERSION):
        raise FormatError(f"unsupported format_version {head['format_version']!r}")
    try:
        header = RunHeader(
            setting_a=float(head["setting_a_rad"]), setting_b=float(head["setting_b_rad"]),
            tau_res=float(head["tau_res_s"]), rp=float(head["rp_hz"]),
            tau_pulse=float(head["tau_pulse_s"]), L=float(head["L_m"]),
            duration=float(head["duration_s"]), source=head["source"],
            seed=None if head["seed"] == "none" else int(head["seed"]))
    except ValueError as exc:
        raise FormatError(f"malformed header: {exc}") from None

    body = lines[n_head:]
    n = len(body)
    chans = np.empty(n, dtype=np.uint8)
    ticks = np.empty(n, dtype=np.int64)
    for i, line in enumerate(body):
        tag, sep, tick = line.partition(",")
        code = TAG_TO_CHANNEL.get(tag)
        if code is None or not sep:
            raise FormatError(f"line {n_head + i + 1}: unknown channel tag in {line!r}")
        try:
            ticks[i] = int(tick)
        except ValueError:
            raise FormatError(f"line {n_head + i + 1}: bad timestamp in {line!r}") from None
        chans[i] = code
    if n > 1:
        back = np.nonzero(np.diff(ticks) < 0)[0]
        if back.size:
            raise FormatError(f"line {n_head + back[0] + 2}: timestamp goes backwards")
    return RunFile(header, ticks, chans)


# --------------------------------------------------------------------------
# coincidences and binning
# --------------------------------------------------------------------------


def match_coincidences(stream_a, stream_b, window: int) -> tuple[np.ndarray, np.ndarray]:
    """One-to-one matching of two sorted tick streams within ``±window`` ticks.

    Closest pairs are taken first, ties go to the earliest timestamp.
    """
    ta = np.asarray(stream_a, dtype=np.int64)
    tb = np.asarray(stream_b, dtype=np.int64)
    for name, t in (("A", ta), ("B", tb)):
        if t.size > 1 and np.any(np.diff(t) < 0):
            raise ValueError(f"stream {name} is not sorted")
    return greedy_match(ta, tb, window)


@dataclass(frozen=True, eq=False)
class PulseBinning:
    bin_index: np.ndarray   # -1 for orphans
    offset: np.ndarray      # ticks after the preceding marker
    orphan: np.ndarray

    def histogram(self, n_bins: int, weights=None) -> np.ndarray:
        keep = (~self.orphan) & (self.bin_index < n_bins)
        w = None if weights is None else np.asarray(weights)[keep]
        return np.bincount(self.bin_index[keep], weights=w, minlength=n_bins)[:n_bins]


def bin_relative_to_pulses(events, pulse_markers, bin_width: int,
                           max_offset: Optional[int] = None) -> PulseBinning:
    """Assign each event to its preceding pulse marker and bin the offset.

    Events before the first marker, or more than ``max_offset`` ticks after
    their marker (default: the median marker spacing), are orphans.
    """
    events = np.asarray(events, dtype=np.int64)
    markers = np.asarray(pulse_markers, dtype=np.int64)
    if markers.size == 0:
        raise ValueError("no pulse markers")
    if bin_width < 1:
        raise ValueError("bin_width must be >= 1")
    if markers.size > 1 and np.any(np.diff(markers) < 0):
        raise ValueError("pulse markers are not sorted")
    if max_offset is None:
        max_offset = int(np.median(np.diff(markers))) if markers.size > 1 else np.iinfo(np.int64).max
    idx = np.searchsorted(markers, events, side="right") - 1
    orphan = idx < 0
    offset = np.where(orphan, 0, events - markers[np.clip(idx, 0, None)])
    orphan |= offset >= max_offset
    bins = np.where(orphan, -1, offset // int(bin_width))
    return PulseBinning(bins.astype(np.int64), offset, orphan)


@dataclass(frozen=True, eq=False)
class RunCounts:
    """Per-bin counts of one run; ``ports`` columns are ``++ +- -+ --``."""

    singles_a: np.ndarray
    singles_b: np.ndarray
    ports: np.ndarray
    accidental_ports: Optional[np.ndarray] = None

    @property
    def coincidences(self) -> np.ndarray:
        return self.ports.sum(axis=1)

    def singles(self, station: str) -> np.ndarray:
        return self.singles_a if station == "A" else self.singles_b


def _port_index(plus_a, plus_b):
    return np.where(plus_a, 0, 2) + np.where(plus_b, 0, 1)


def _binned_ports(ticks_key, plus_a, plus_b, markers, bin_width, n_bins, max_offset):
    binning = bin_relative_to_pulses(ticks_key, markers, bin_width, max_offset)
    keep = (~binning.orphan) & (binning.bin_index < n_bins)
    flat = binning.bin_index[keep] * 4 + _port_index(plus_a, plus_b)[keep]
    return np.bincount(flat, minlength=4 * n_bins)[:4 * n_bins].reshape(n_bins, 4)


def default_n_bins(run: RunFile, bin_width: int) -> int:
    return int(math.ceil(run.header.period_ticks / bin_width))


def run_counts(run: RunFile, window: int = 0, bin_width: int = 1, n_bins: Optional[int] = None,
               station: str = "B", offset_windows: int = 0) -> RunCounts:
    """Bin singles and coincidences of one run by offset from the pulse markers.

    Coincidences are keyed on the ``station`` detection time.  With
    ``offset_windows = K > 0`` the accidental background is estimated by
    matching A against B shifted by ``k`` pulse periods, ``k = 1..K``.
    """
    if n_bins is None:
        n_bins = default_n_bins(run, bin_width)
    markers = run.markers
    period = run.header.period_ticks
    ta, pa = run.station("A")
    tb, pb = run.station("B")
    sa = bin_relative_to_pulses(ta, markers, bin_width, period).histogram(n_bins)
    sb = bin_relative_to_pulses(tb, markers, bin_width, period).histogram(n_bins)

    def matched_ports(shift):
        ia, ib = match_coincidences(ta, tb - shift, window)
        key = (ta[ia] if station == "A" else tb[ib] - shift)
        order = np.argsort(key, kind="stable")
        return _binned_ports(key[order], pa[ia][order], pb[ib][order], markers, bin_width,
                             n_bins, period)

    ports = matched_ports(0)
    acc = None
    if offset_windows > 0:
        acc = np.mean([matched_ports(k * period) for k in range(1, offset_windows + 1)], axis=0)
    return RunCounts(sa.astype(np.int64), sb.astype(np.int64), ports.astype(np.int64), acc)


def accidental_correction(counts, accidentals) -> tuple[np.ndarray, np.ndarray]:
    """Subtract an accidental estimate; negative results clamp to zero (flagged)."""
    raw = np.asarray(counts, dtype=np.float64) - np.asarray(accidentals, dtype=np.float64)
    clamped = raw < 0
    return np.where(clamped, 0.0, raw), clamped


# --------------------------------------------------------------------------
# time series
# --------------------------------------------------------------------------


@dataclass(eq=False)
class TimeSeries:
    bin_center: np.ndarray          # seconds after the pulse marker, minus t0
    singles: np.ndarray
    coincidences: np.ndarray
    eta: np.ndarray
    eta_err: np.ndarray
    s_chsh: Optional[np.ndarray] = None
    s_chsh_err: Optional[np.ndarray] = None
    flags: list = field(default_factory=list)
    station: str = "B"

    def __len__(self) -> int:
        return self.bin_center.size


def _bin_centers(header: RunHeader, bin_width: int, n_bins: int, t0: float) -> np.ndarray:
    return (np.arange(n_bins) + 0.5) * bin_width * header.tau_res - t0


def _check_compatible(runs: Sequence[RunFile]) -> None:
    if not runs:
        raise ValueError("at least one run is required")
    h0 = runs[0].header
    for r in runs[1:]:
        if not (math.isclose(r.header.tau_res, h0.tau_res) and math.isclose(r.header.rp, h0.rp)):
            raise ValueError("runs differ in tau_res or repetition rate")


def pooled_counts(runs: Sequence[RunFile], window: int = 0, bin_width: int = 1,
                  station: str = "B", offset_windows: int = 0, n_bins: Optional[int] = None):
    _check_compatible(runs)
    if n_bins is None:
        n_bins = default_n_bins(runs[0], bin_width)
    per_run = [run_counts(r, window, bin_width, n_bins, station, offset_windows) for r in runs]
    return per_run, n_bins


def _corrected_ports(rc: RunCounts):
    if rc.accidental_ports is None:
        return rc.ports.astype(np.float64), np.zeros(rc.ports.shape[0], dtype=bool)
    fixed, clamped = accidental_correction(rc.ports, rc.accidental_ports)
    return fixed, clamped.any(axis=1)


def efficiency_timeseries(runs: Sequence[RunFile], station: str = "B", window: int = 0,
                          bin_width: int = 1, offset_windows: int = 0, t0: float = 0.0,
                          n_bins: Optional[int] = None) -> TimeSeries:
    """Pool every run per bin and estimate ``η = coincidences / singles`` at ``station``."""
    per_run, n_bins = pooled_counts(runs, window, bin_width, station, offset_windows, n_bins)
    singles = np.sum([rc.singles(station) for rc in per_run], axis=0).astype(np.float64)
    coinc = np.zeros(n_bins)
    clamped = np.zeros(n_bins, dtype=bool)
    for rc in per_run:
        ports, cl = _corrected_ports(rc)
        coinc += ports.sum(axis=1)
        clamped |= cl
    keep = singles > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        eta = np.where(keep, coinc / np.where(keep, singles, 1.0), np.nan)
        eta_c = np.clip(eta, 0.0, 1.0)
        err = np.sqrt(eta_c * (1 - eta_c) / np.where(keep, singles, 1.0))
    flags = []
    for i in np.nonzero(keep)[0]:
        f = []
        if clamped[i]:
            f.append("clamped")
        if offset_windows > 0:
            f.append("acc_corrected")
        flags.append("|".join(f))
    centers = _bin_centers(runs[0].header, bin_width, n_bins, t0)
    return TimeSeries(centers[keep], singles[keep], coinc[keep], eta[keep], err[keep],
                      flags=flags, station=station)


def _setting_slot(header: RunHeader, tol: float = 1e-6) -> Optional[int]:
    for i, (a, b) in enumerate(CHSH_SETTINGS):
        if abs(header.setting_a - a) < tol and abs(header.setting_b - b) < tol:
            return i
    return None


def group_chsh_runs(runs: Sequence[RunFile]) -> list[list[RunFile]]:
    slots: list[list[RunFile]] = [[] for _ in CHSH_SETTINGS]
    for r in runs:
        i = _setting_slot(r.header)
        if i is not None:
            slots[i].append(r)
    names = ("(a, b)", "(a, b')", "(a', b)", "(a', b')")
    for i, s in enumerate(slots):
        if not s:
            a, b = CHSH_SETTINGS[i]
            raise ValueError(f"missing CHSH setting {names[i]} = ({a:.6g}, {b:.6g}) rad")
    return slots


def chsh_timeseries(runs: Sequence[RunFile], window: int = 0, bin_width: int = 1,
                    offset_windows: int = 0, t0: float = 0.0, station: str = "B",
                    n_bins: Optional[int] = None,
                    min_counts: int = LOW_COUNT_THRESHOLD) -> TimeSeries:
    """Per-bin S from runs covering the four CHSH settings.

    Sparse bins are kept and flagged ``low_count``; a setting with no
    coincidence in a bin gives ``nan`` for that bin.
    """
    slots = group_chsh_runs(runs)
    _check_compatible(runs)
    if n_bins is None:
        n_bins = default_n_bins(runs[0], bin_width)
    table = np.zeros((n_bins, 4, 4))
    singles = np.zeros(n_bins)
    clamped = np.zeros(n_bins, dtype=bool)
    for i, group in enumerate(slots):
        for r in group:
            rc = run_counts(r, window, bin_width, n_bins, station, offset_windows)
            ports, cl = _corrected_ports(rc)
            table[:, i, :] += ports
            singles += rc.singles(station)
            clamped |= cl
    s = np.full(n_bins, np.nan)
    s_err = np.full(n_bins, np.nan)
    flags = []
    for k in range(n_bins):
        f = []
        try:
            s[k], s_err[k] = chsh_from_counts(table[k])
        except InsufficientCountsError:
            f.append("empty_setting")
        if table[k].sum() < min_counts:
            f.append("low_count")
        if clamped[k]:
            f.append("clamped")
        flags.append("|".join(f))
    coinc = table.sum(axis=(1, 2))
    with np.errstate(invalid="ignore", divide="ignore"):
        eta = np.where(singles > 0, coinc / np.maximum(singles, 1), np.nan)
        eta_c = np.clip(eta, 0, 1)
        err = np.sqrt(eta_c * (1 - eta_c) / np.maximum(singles, 1))
    centers = _bin_centers(runs[0].header, bin_width, n_bins, t0)
    return TimeSeries(centers, singles, coinc, eta, err, s, s_err, flags, station)


def write_timeseries_csv(path, ts: TimeSeries) -> None:
    cols = ["bin_center_ns", "eta", "eta_err", "singles", "coincidences", "s_chsh", "s_chsh_err",
            "flags"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for i in range(len(ts)):
            s = "" if ts.s_chsh is None else repr(float(ts.s_chsh[i]))
            se = "" if ts.s_chsh_err is None else repr(float(ts.s_chsh_err[i]))
            w.writerow([repr(float(ts.bin_center[i] * 1e9)), repr(float(ts.eta[i])),
                        repr(float(ts.eta_err[i])), int(ts.singles[i]), repr(float(ts.coincidences[i])),
                        s, se, ts.flags[i] if i < len(ts.flags) else ""])


def read_timeseries_csv(path) -> TimeSeries:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))

    def col(name):
        return np.array([float(r[name]) if r[name] != "" else np.nan for r in rows])

    has_s = bool(rows) and rows[0]["s_chsh"] != ""
    return TimeSeries(col("bin_center_ns") * 1e-9, col("singles"), col("coincidences"), col("eta"),
                      col("eta_err"), col("s_chsh") if has_s else None,
                      col("s_chsh_err") if has_s else None, [r["flags"] for r in rows])


def inject_background(run: RunFile, rate_a: float, rate_b: float, rng: np.random.Generator) -> RunFile:
    """Add uncorrelated Poisson detections (``rate_*`` per tick) with random ports."""
    span = int(run.ticks.max()) + 1 if run.ticks.size else 0
    extra_t, extra_c = [], []
    for rate, plus, minus in ((rate_a, Channel.A_PLUS, Channel.A_MINUS),
                              (rate_b, Channel.B_PLUS, Channel.B_MINUS)):
        n = rng.poisson(rate * span)
        extra_t.append(rng.integers(0, max(span, 1), size=n))
        extra_c.append(np.where(rng.random(n) < 0.5, plus, minus).astype(np.uint8))
    ticks, chans = merge_events([run.ticks, *extra_t], [run.channels, *extra_c])
    return RunFile(run.header, ticks, chans)


# --------------------------------------------------------------------------
# experiment plan
# --------------------------------------------------------------------------


class Status(str, enum.Enum):
    PASS = "pass"
    WARN = "warn"
    VIOLATION = "violation"
    UNCHECKED = "unchecked"


@dataclass(frozen=True)
class ExperimentPlan:
    tau_res: float
    tau: float
    tau_rf: Optional[float] = None
    tau_pulse: Optional[float] = None
    rp_inverse: Optional[float] = None
    tau_d_assumed: Optional[float] = None

    def __post_init__(self) -> None:
        for name in ("tau_res", "tau", "tau_rf", "tau_pulse", "rp_inverse", "tau_d_assumed"):
            v = getattr(self, name)
            if v is not None and not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive, got {v}")


@dataclass(frozen=True)
class Finding:
    relation: str
    status: Status
    ratio: Optional[float]
    purpose: str

    def __str__(self) -> str:
        r = "n/a" if self.ratio is None else f"{self.ratio:.3g}"
        return f"{self.status.value:9s} {self.relation:22s} ratio={r:8s} {self.purpose}"


MUCH_LESS_PASS = 10.0
MUCH_LESS_WARN = 3.0


def _much_less(small, large, relation, purpose) -> Finding:
    if small is None or large is None:
        return Finding(relation, Status.UNCHECKED, None, purpose)
    ratio = large / small
    if ratio >= MUCH_LESS_PASS:
        st = Status.PASS
    elif ratio >= MUCH_LESS_WARN:
        st = Status.WARN
    else:
        st = Status.VIOLATION
    return Finding(relation, st, ratio, purpose)


def plan_check(plan: ExperimentPlan) -> list[Finding]:
    out = [Finding("tau_res < tau", Status.PASS if plan.tau_res < plan.tau else Status.VIOLATION,
                   plan.tau / plan.tau_res, "resolve the variations of the efficiency")]
    out.append(_much_less(plan.tau_rf, plan.tau, "tau_rf << tau", "square pump pulse"))
    out.append(_much_less(plan.tau, plan.tau_pulse, "tau << tau_pulse", "time for the angle to evolve"))
    out.append(_much_less(plan.tau_pulse, plan.rp_inverse, "tau_pulse << 1/R_p", "well separated pulses"))
    out.append(_much_less(plan.tau_d_assumed, plan.rp_inverse, "tau_d << 1/R_p",
                          "decay to the random state between pulses"))
    return out


def plan_ok(findings: Sequence[Finding]) -> bool:
    return not any(f.status is Status.VIOLATION for f in findings)
