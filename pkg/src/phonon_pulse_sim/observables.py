"""Populations, phonon moments, and second-order correlation analysis.

Correlation functions of the mechanical mode come in two flavours: the
standard one built on ``b`` (order 1) and the generalized pair version
built on ``b**2`` (order 2).  Equal-time values are evaluated pointwise
on a density-matrix series; delayed values require propagating the
reduced operator ``B rho B^dagger`` and are normalized by moments of the
original propagation.  Points where the normalizing moment falls below
``DENOMINATOR_FLOOR`` are reported as NaN markers rather than huge
spurious ratios, and extremum searches skip them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import IntegratorConfig, MasterResult, QuantumState, evolve_master
from .exceptions import (
    InvalidParameterError,
    NoExtremumError,
    UndefinedCorrelationError,
)
from .fockspace import annihilation_op, tensor
from .model import HilbertConfig

__all__ = [
    "DENOMINATOR_FLOOR",
    "TimeSeries",
    "CorrelationResult",
    "PairStatistics",
    "population",
    "mean_phonon",
    "g2_value",
    "g2_equal_time",
    "locate_extremum",
    "g2_delayed",
    "correlation_verdict",
    "analyze_correlation",
    "pair_emission_statistics",
]

# Below this value a correlation denominator counts as vanishing.
DENOMINATOR_FLOOR = 1e-12

_VERDICTS = ("bunched-pairs", "antibunched-pairs", "inconclusive")


@dataclass(frozen=True)
class TimeSeries:
    """Sampled scalar signal.

    ``values`` may contain NaN entries, which mark points where the
    quantity is undefined (vanishing denominator); infinities are
    rejected.  ``times`` must be strictly increasing.
    """

    times: np.ndarray
    values: np.ndarray
    label: str = ""

    def __post_init__(self):
        ts = np.asarray(self.times, dtype=float)
        vs = np.asarray(self.values, dtype=float)
        if ts.ndim != 1 or vs.ndim != 1 or ts.size != vs.size:
            raise InvalidParameterError("times and values must be 1-D and equally long")
        if ts.size == 0:
            raise InvalidParameterError("time series must hold at least one sample")
        if not np.all(np.isfinite(ts)):
            raise InvalidParameterError("sample times must be finite")
        if ts.size > 1 and not np.all(np.diff(ts) > 0):
            raise InvalidParameterError("sample times must be strictly increasing")
        if np.any(np.isinf(vs)):
            raise InvalidParameterError("values must not be infinite")
        object.__setattr__(self, "times", ts)
        object.__setattr__(self, "values", vs)

    @property
    def defined_mask(self):
        """Boolean mask of samples carrying a defined (non-NaN) value."""
        return np.isfinite(self.values)


@dataclass(frozen=True)
class CorrelationResult:
    """Equal-time scan, located extremum, and delayed scan for one order."""

    order: int
    equal_time: TimeSeries
    t_star: float
    delayed: TimeSeries
    verdict: str

    def __post_init__(self):
        if self.order not in (1, 2):
            raise InvalidParameterError("correlation order must be 1 or 2")
        if self.verdict not in _VERDICTS:
            raise InvalidParameterError(f"verdict must be one of {_VERDICTS}")
        if self.delayed.times[0] != 0.0:
            raise InvalidParameterError("delayed series must start at tau = 0")


@dataclass(frozen=True)
class PairStatistics:
    """Clustered jump statistics over a trajectory ensemble.

    Delay and interval arrays are sorted ascending, so the summary does
    not depend on the order in which trajectories are supplied.
    """

    n_trajectories: int
    n_pairs: int
    n_unpaired: int
    pair_window: float
    intra_pair_delays: np.ndarray = field(repr=False)
    inter_pair_intervals: np.ndarray = field(repr=False)

    @property
    def mean_pairs_per_trajectory(self):
        if self.n_trajectories == 0:
            return 0.0
        return self.n_pairs / self.n_trajectories


def _state_arrays(state):
    """Normalize a QuantumState or bare array to (kind, complex array)."""
    if isinstance(state, QuantumState):
        return state.kind, state.data
    arr = np.asarray(state, dtype=complex)
    if arr.ndim == 1:
        return "pure", arr
    if arr.ndim == 2 and arr.shape[0] == arr.shape[1]:
        return "density", arr
    raise InvalidParameterError("state must be a vector or a square matrix")


def population(state, basis_state, raw=False):
    """Overlap population of ``state`` with a reference basis vector.

    Returns ``<phi|rho|phi>`` for a density matrix or ``|<phi|psi>|**2``
    for a pure state.  The value is clamped to [0, 1] for reporting;
    ``raw=True`` returns it unclamped.
    """
    kind, data = _state_arrays(state)
    phi = np.asarray(basis_state, dtype=complex)
    if phi.ndim != 1 or phi.shape[0] != data.shape[0]:
        raise InvalidParameterError(
            f"basis state has dim {phi.shape}, state has dim {data.shape[0]}"
        )
    if kind == "pure":
        value = abs(np.vdot(phi, data)) ** 2
    else:
        value = float(np.real(np.vdot(phi, data @ phi)))
    if raw:
        return value
    return min(1.0, max(0.0, value))


def _mech_populations(state, hc):
    """Diagonal of the mechanical marginal as a real vector.

    ``hc=None`` reads ``state`` as living on the mechanical space alone.
    """
    kind, data = _state_arrays(state)
    if kind == "pure":
        weights = np.abs(data) ** 2
    else:
        weights = np.real(np.diagonal(data)).copy()
    if hc is None:
        return weights
    if data.shape[0] != hc.dim:
        raise InvalidParameterError(
            f"state dim {data.shape[0]} does not match hilbert dim {hc.dim}"
        )
    return weights.reshape(hc.n_a, hc.n_b).sum(axis=0)


def _falling_moment(p_mech, k):
    """Normally ordered moment <b^dag^k b^k> from number populations."""
    m = np.arange(p_mech.size)
    w = np.ones(p_mech.size)
    for j in range(k):
        w = w * np.maximum(m - j, 0)
    return float(w @ p_mech)


def mean_phonon(state, hc=None):
    """Mean phonon number of a state.

    ``hc=None`` treats ``state`` as a mechanical-mode state; otherwise
    the mechanical marginal of the composite state is used.
    """
    value = _falling_moment(_mech_populations(state, hc), 1)
    return max(value, 0.0) if -1e-8 <= value < 0 else value


def g2_value(state, order, hc=None):
    """Equal-time correlation of one state; NaN when the denominator vanishes.

    Order 1 is ``<b+ b+ b b> / <b+ b>**2``, order 2 replaces ``b`` with
    ``b**2``.
    """
    if order not in (1, 2):
        raise InvalidParameterError("correlation order must be 1 or 2")
    p = _mech_populations(state, hc)
    numerator = _falling_moment(p, 2 * order)
    denominator = _falling_moment(p, order) ** 2
    if denominator < DENOMINATOR_FLOOR:
        return math.nan
    value = numerator / denominator
    return max(value, 0.0) if -1e-8 <= value < 0 else value


def g2_equal_time(rho_series, order):
    """Pointwise equal-time correlation over a density-matrix series.

    ``rho_series`` is a :class:`~phonon_pulse_sim.dynamics.MasterResult`
    (or anything exposing ``times``, ``states`` and ``hilbert``).
    Samples with denominator below ``DENOMINATOR_FLOOR`` become NaN
    markers.
    """
    times = np.asarray(rho_series.times, dtype=float)
    states = rho_series.states
    hc = rho_series.hilbert
    values = np.array([g2_value(states[k], order, hc) for k in range(times.size)])
    return TimeSeries(times=times, values=values, label=f"g{order}(2) equal-time")


def locate_extremum(series, kind, window):
    """Time of the extremum of ``series`` inside ``window``.

    The grid extremum is refined by a quadratic through it and its two
    grid neighbours when both are defined; otherwise the grid time is
    returned.  Ties break toward the earliest time.  NaN samples are
    skipped entirely.
    """
    if kind not in ("max", "min"):
        raise InvalidParameterError("kind must be 'max' or 'min'")
    t_lo, t_hi = (float(window[0]), float(window[1]))
    if not t_lo < t_hi:
        raise InvalidParameterError("window must satisfy t_lo < t_hi")
    times = series.times
    if t_lo < times[0] or t_hi > times[-1]:
        raise InvalidParameterError("window must lie within the series support")
    in_window = (times >= t_lo) & (times <= t_hi)
    valid = in_window & series.defined_mask
    n_valid = int(np.count_nonzero(valid))
    if n_valid == 0:
        raise NoExtremumError("all samples in the window are undefined")
    if n_valid < 3:
        raise NoExtremumError(f"only {n_valid} defined samples in the window, need 3")

    vals = np.where(valid, series.values, -np.inf if kind == "max" else np.inf)
    best = int(np.argmax(vals)) if kind == "max" else int(np.argmin(vals))

    # Quadratic refinement needs defined neighbours on the original grid.
    if best == 0 or best == times.size - 1:
        return float(times[best])
    if not (valid[best - 1] and valid[best + 1]):
        return float(times[best])
    t0, t1, t2 = times[best - 1], times[best], times[best + 1]
    v0, v1, v2 = series.values[best - 1], series.values[best], series.values[best + 1]
    d1 = (v1 - v0) / (t1 - t0)
    d2 = (v2 - v1) / (t2 - t1)
    curv = (d2 - d1) / (t2 - t0)
    scale = max(abs(v0), abs(v1), abs(v2), 1.0) / (t2 - t0) ** 2
    if abs(curv) < 1e-12 * scale:
        return float(t1)
    if (kind == "max" and curv >= 0) or (kind == "min" and curv <= 0):
        return float(t1)
    t_vertex = 0.5 * (t0 + t1) - d1 / (2.0 * curv)
    if not (t0 <= t_vertex <= t2):
        return float(t1)
    return float(t_vertex)


def _pair_operator(hc, order):
    b = tensor(np.eye(hc.n_a), annihilation_op(hc.n_b))
    return b if order == 1 else b @ b


def g2_delayed(params, train, hc, cfg, t_star, order, tau_grid, rho0=None):
    """Delayed correlation g_N(t_star, t_star + tau) on a tau grid.

    The state is propagated from ``cfg.t_start`` (initial state ``rho0``,
    vacuum when omitted) to ``t_star``; the reduced operator
    ``B rho B^dagger`` then evolves unnormalized under the same generator.
    Each point is normalized by ``<B+B>(t_star) * <B+B>(t_star+tau)``
    taken from the original propagation.  Points whose normalization
    falls below ``DENOMINATOR_FLOOR`` are NaN markers.
    """
    if order not in (1, 2):
        raise InvalidParameterError("correlation order must be 1 or 2")
    tau = np.asarray(tau_grid, dtype=float)
    if tau.ndim != 1 or tau.size == 0:
        raise InvalidParameterError("tau_grid must be a non-empty 1-D list")
    if tau[0] != 0.0:
        raise InvalidParameterError("tau_grid must start at 0")
    if tau.size > 1 and not np.all(np.diff(tau) > 0):
        raise InvalidParameterError("tau_grid must be strictly increasing")
    t_star = float(t_star)
    if not t_star > cfg.t_start:
        raise InvalidParameterError(
            f"t_star={t_star} must lie after the integration start {cfg.t_start}"
        )

    times_fwd = np.unique(np.concatenate(([cfg.t_start, t_star], t_star + tau)))
    forward = evolve_master(rho0, params, train, hc, replace(cfg, sample_times=times_fwd))
    rho_star = forward.states[int(np.searchsorted(times_fwd, t_star))]

    b_pow = _pair_operator(hc, order)
    bdag_b = b_pow.conj().T @ b_pow
    moment = np.array(
        [float(np.real(np.trace(bdag_b @ forward.states[k]))) for k in range(times_fwd.size)]
    )
    den_star = moment[int(np.searchsorted(times_fwd, t_star))]
    if den_star < DENOMINATOR_FLOOR:
        raise UndefinedCorrelationError(
            f"<B+B>({t_star}) = {den_star:.3e} is below the defined-correlation floor"
        )
    den_tau = moment[np.searchsorted(times_fwd, t_star + tau)]

    rho_reduced = b_pow @ rho_star @ b_pow.conj().T
    if tau.size > 1:
        reduced = evolve_master(
            rho_reduced,
            params,
            train,
            hc,
            replace(cfg, sample_times=t_star + tau, check_invariants=False),
        )
        reduced_states = reduced.states
    else:
        reduced_states = rho_reduced[None, :, :]
    raw = np.array(
        [float(np.real(np.trace(bdag_b @ reduced_states[k]))) for k in range(tau.size)]
    )

    denom = den_star * den_tau
    values = np.full(tau.size, np.nan)
    defined = denom >= DENOMINATOR_FLOOR
    values[defined] = raw[defined] / denom[defined]
    small = defined & (values < 0) & (values >= -1e-8)
    values[small] = 0.0
    return TimeSeries(times=tau, values=values, label=f"g{order}(2) delayed")


def correlation_verdict(delayed):
    """Classify a delayed scan against its tau = 0 value.

    A value above 1 that dominates every later defined sample reads as
    bunching; a value below 1 dominated by every later defined sample
    reads as antibunching; anything else is inconclusive.
    """
    v0 = delayed.values[0]
    later = delayed.values[1:][np.isfinite(delayed.values[1:])]
    if not np.isfinite(v0) or later.size == 0:
        return "inconclusive"
    if v0 > 1.0 and np.all(v0 > later):
        return "bunched-pairs"
    if v0 < 1.0 and np.all(v0 < later):
        return "antibunched-pairs"
    return "inconclusive"


def analyze_correlation(
    params, train, hc, cfg, order, window, tau_grid, rho0=None, series=None
):
    """Full correlation analysis for one order.

    Scans the equal-time correlation over ``cfg.sample_times`` (or a
    precomputed ``series``), locates its extremum inside ``window``
    (maximum for order 1, minimum for order 2), evaluates the delayed
    correlation on ``tau_grid`` from that point, and attaches a verdict.
    """
    if series is None:
        series = evolve_master(rho0, params, train, hc, cfg)
    equal = g2_equal_time(series, order)
    kind = "max" if order == 1 else "min"
    t_star = locate_extremum(equal, kind, window)
    delayed = g2_delayed(params, train, hc, cfg, t_star, order, tau_grid, rho0=rho0)
    return CorrelationResult(
        order=order,
        equal_time=equal,
        t_star=t_star,
        delayed=delayed,
        verdict=correlation_verdict(delayed),
    )


def pair_emission_statistics(records, pair_window):
    """Cluster mechanical decay jumps into emission pairs.

    Consecutive ``mech_down`` jumps closer than ``pair_window`` form a
    pair; the scan is greedy from the earliest jump onward.  Intra-pair
    delays and the intervals between consecutive pair onsets (within one
    trajectory) are returned sorted, so the summary is invariant under
    trajectory reordering.
    """
    if not pair_window > 0:
        raise InvalidParameterError("pair_window must be positive")
    n_pairs = 0
    n_unpaired = 0
    delays = []
    intervals = []
    n_records = 0
    for record in records:
        n_records += 1
        down = sorted(t for t, label in record.jumps if label == "mech_down")
        anchors = []
        i = 0
        while i < len(down):
            if i + 1 < len(down) and down[i + 1] - down[i] < pair_window:
                delays.append(down[i + 1] - down[i])
                anchors.append(down[i])
                n_pairs += 1
                i += 2
            else:
                n_unpaired += 1
                i += 1
        intervals.extend(np.diff(anchors))
    return PairStatistics(
        n_trajectories=n_records,
        n_pairs=n_pairs,
        n_unpaired=n_unpaired,
        pair_window=float(pair_window),
        intra_pair_delays=np.sort(np.asarray(delays, dtype=float)),
        inter_pair_intervals=np.sort(np.asarray(intervals, dtype=float)),
    )
