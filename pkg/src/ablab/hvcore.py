"""Single-instant hidden-variable detection model.

Every emitted pair carries a hidden angle ``lam`` and is either an
alpha-pair (gated at station A, Malus law at B) or a beta-pair (the mirror
image).  A ``PLUS``/``MINUS`` substate picks the favoured analyzer port.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi
SQRT2 = math.sqrt(2.0)

# Settings of the textbook CHSH combination, in the order used by
# ``analytics.chsh_from_counts``: (a, b), (a, b'), (a', b), (a', b').
CHSH_A = (0.0, math.pi / 4)
CHSH_B = (math.pi / 8, 3 * math.pi / 8)
CHSH_SETTINGS = (
    (CHSH_A[0], CHSH_B[0]),
    (CHSH_A[0], CHSH_B[1]),
    (CHSH_A[1], CHSH_B[0]),
    (CHSH_A[1], CHSH_B[1]),
)
CHSH_SIGNS = (1.0, -1.0, 1.0, 1.0)


class ParameterError(ValueError):
    """A model or run parameter is outside its valid range."""


class PairType(enum.IntEnum):
    ALPHA = 0
    BETA = 1


class Substate(enum.IntEnum):
    PLUS = 0
    MINUS = 1


class Station(enum.IntEnum):
    A = 0
    B = 1


class Outcome(enum.IntEnum):
    NONE = 0
    PLUS = 1
    MINUS = 2


class ModelKind(str, enum.Enum):
    SLIT = "slit"
    GAUSSIAN = "gaussian"


@dataclass(frozen=True)
class DetectionModel:
    kind: ModelKind
    delta: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ModelKind(self.kind))
        d = float(self.delta)
        if not math.isfinite(d) or d <= 0:
            raise ParameterError(f"model width must be positive, got {self.delta}")
        if self.kind is ModelKind.SLIT and d > TWO_PI + 1e-12:
            raise ParameterError(f"slit width must not exceed 2*pi, got {d}")
        object.__setattr__(self, "delta", d)

    def acceptance(self, mismatch):
        """Gate acceptance for a (not yet wrapped) angle mismatch."""
        w = wrap(mismatch)
        if self.kind is ModelKind.SLIT:
            return (np.abs(w) <= 0.5 * self.delta).astype(np.float64)
        return np.exp(-(w * w) / (self.delta * self.delta))


@dataclass(frozen=True)
class HiddenPair:
    pair_type: PairType
    value: float
    substate: Substate


@dataclass(frozen=True)
class PortProbabilities:
    p_plus: float
    p_minus: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.p_plus <= 1.0 and 0.0 <= self.p_minus <= 1.0):
            raise ParameterError(f"port probabilities out of range: {self}")
        if self.p_plus + self.p_minus > 1.0 + 1e-12:
            raise ParameterError(f"port probabilities sum above one: {self}")


def wrap(angle):
    """Map angles onto (-pi, pi]."""
    return math.pi - np.mod(math.pi - np.asarray(angle, dtype=np.float64), TWO_PI)


def port_probabilities(pair_type, value, substate, station, setting, model: DetectionModel):
    """Vectorised detection probabilities; returns ``(p_plus, p_minus)`` arrays.

    All of ``pair_type``, ``value``, ``substate`` and ``setting`` broadcast.
    """
    pair_type = np.asarray(pair_type)
    substate = np.asarray(substate)
    value = np.asarray(value, dtype=np.float64)
    setting = np.asarray(setting, dtype=np.float64)
    diff = value - setting
    gate = model.acceptance(diff)
    c2 = np.cos(diff) ** 2
    s2 = 1.0 - c2
    gated_here = (pair_type == PairType.ALPHA) == (int(station) == Station.A)
    plus_sub = substate == Substate.PLUS
    p_plus = np.where(gated_here, np.where(plus_sub, gate, 0.0), np.where(plus_sub, c2, s2))
    p_minus = np.where(gated_here, np.where(plus_sub, 0.0, gate), np.where(plus_sub, s2, c2))
    return p_plus, p_minus


def detection_probabilities(pair: HiddenPair, station: Station, setting: float,
                            model: DetectionModel) -> PortProbabilities:
    p, m = port_probabilities(pair.pair_type, pair.value, pair.substate, station, setting, model)
    return PortProbabilities(float(np.clip(p, 0.0, 1.0)), float(np.clip(m, 0.0, 1.0)))


def sample_outcome(probs: PortProbabilities, uniform_draw: float) -> Outcome:
    if uniform_draw < probs.p_plus:
        return Outcome.PLUS
    if uniform_draw < probs.p_plus + probs.p_minus:
        return Outcome.MINUS
    return Outcome.NONE


def sample_outcomes(p_plus, p_minus, draws):
    """Array form of :func:`sample_outcome` (codes from :class:`Outcome`)."""
    draws = np.asarray(draws)
    out = np.zeros(draws.shape, dtype=np.int8)
    out[draws < p_plus + p_minus] = Outcome.MINUS
    out[draws < p_plus] = Outcome.PLUS
    return out


def coincidence_probability_slit(a: float, b: float, ports: tuple[str, str], delta: float) -> float:
    """Closed-form coincidence probability for the slit gate, hidden angle uniform."""
    if not 0 < delta <= TWO_PI + 1e-12:
        raise ParameterError(f"slit width must be in (0, 2*pi], got {delta}")
    pa, pb = ports
    if pa not in "+-" or pb not in "+-" or len(pa) != 1 or len(pb) != 1:
        raise ParameterError(f"ports must be '+' or '-', got {ports}")
    trig = math.cos(a - b) ** 2 if pa == pb else math.sin(a - b) ** 2
    return (math.sin(delta) * trig + 0.5 * (delta - math.sin(delta))) / (4 * math.pi)


def chsh_closed_form(delta: float) -> float:
    if delta == 0:
        return 2 * SQRT2
    return 2 * SQRT2 * math.sin(delta) / delta


def efficiency_static(p: float) -> float:
    if not 0.0 <= p <= 1.0:
        raise ParameterError(f"gate probability must be in [0, 1], got {p}")
    return 2 * p / (1 + p)


def sample_pairs(n: int, rng: np.random.Generator, values=None):
    """Draw ``n`` pairs from the random-state source.

    Returns ``(pair_type, value, substate)`` arrays.  ``values`` overrides
    the uniform hidden angles (used when the source follows a trajectory).
    """
    pair_type = rng.integers(0, 2, size=n).astype(np.int8)
    substate = rng.integers(0, 2, size=n).astype(np.int8)
    if values is None:
        values = rng.uniform(0.0, TWO_PI, size=n)
    return pair_type, np.asarray(values, dtype=np.float64), substate


def detect_pairs(pair_type, value, substate, a, b, model: DetectionModel, rng: np.random.Generator):
    """Independent detection at both stations; returns outcome codes for A and B."""
    pa_p, pa_m = port_probabilities(pair_type, value, substate, Station.A, a, model)
    pb_p, pb_m = port_probabilities(pair_type, value, substate, Station.B, b, model)
    n = np.shape(value)[0]
    out_a = sample_outcomes(pa_p, pa_m, rng.random(n))
    out_b = sample_outcomes(pb_p, pb_m, rng.random(n))
    return out_a, out_b


def port_counts(out_a, out_b) -> np.ndarray:
    """Coincidence counts ordered ``[++, +-, -+, --]``."""
    both = (out_a != Outcome.NONE) & (out_b != Outcome.NONE)
    a_plus = out_a == Outcome.PLUS
    b_plus = out_b == Outcome.PLUS
    return np.array([
        np.count_nonzero(both & a_plus & b_plus),
        np.count_nonzero(both & a_plus & ~b_plus),
        np.count_nonzero(both & ~a_plus & b_plus),
        np.count_nonzero(both & ~a_plus & ~b_plus),
    ], dtype=np.int64)


def simulate_static_counts(n_pairs: int, a: float, b: float, model: DetectionModel,
                           rng: np.random.Generator, chunk: int = 1 << 20) -> np.ndarray:
    """Random-state source at fixed settings; port-pair coincidence counts."""
    counts = np.zeros(4, dtype=np.int64)
    left = int(n_pairs)
    while left > 0:
        m = min(left, chunk)
        t, v, s = sample_pairs(m, rng)
        oa, ob = detect_pairs(t, v, s, a, b, model, rng)
        counts += port_counts(oa, ob)
        left -= m
    return counts
