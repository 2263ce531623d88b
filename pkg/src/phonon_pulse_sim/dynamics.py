"""Time evolution engines: Schrodinger, Lindblad, and Monte Carlo unraveling.

All results are reported in the drive-carrier rotating frame on the composite
truncated space.  The dissipative engines integrate internally in the
interaction picture of the drive-free Hamiltonian (its exact truncated
eigenbasis), which removes every fast phase that is not physically driven;
this is a pure change of variables and is undone before states are returned
or observables are evaluated.  Jump thresholds follow the standard
norm-squared unraveling with the jump time located by bisection on the
integrator's dense output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import RK45, solve_ivp
from scipy.linalg import block_diag

from .exceptions import (
    IntegrityError,
    InvalidParameterError,
    StiffnessError,
)
from .model import (
    HilbertConfig,
    composite_operators,
    drive_coefficient,
    dressed_basis,
    static_hamiltonian,
)

__all__ = [
    "IntegratorConfig",
    "QuantumState",
    "JumpChannel",
    "SchrodingerResult",
    "MasterResult",
    "TrajectoryRecord",
    "EnsembleResult",
    "jump_channels",
    "lindblad_rhs",
    "evolve_schrodinger",
    "evolve_master",
    "mcwf_trajectory",
    "ensemble_average",
    "standard_observables",
]

_METHODS = ("RK45", "RK23", "DOP853")


@dataclass(frozen=True)
class IntegratorConfig:
    """Adaptive integration settings plus the reporting grid.

    ``max_step`` caps steps outside pulse windows (default set by the
    dissipative timescales); ``max_step_pulse`` caps steps while any drive
    envelope exceeds ``1e-8`` of its peak, defaulting to the stricter of
    ``sigma/10`` and a twentieth of the fastest drive-phase period.
    """

    sample_times: np.ndarray
    rel_tol: float = 1e-8
    abs_tol: float = 1e-10
    max_step: float | None = None
    max_step_pulse: float | None = None
    method: str = "RK45"
    check_invariants: bool = True

    def __post_init__(self):
        ts = np.asarray(self.sample_times, dtype=float)
        if ts.ndim != 1 or ts.size < 2:
            raise InvalidParameterError("sample_times must hold at least two times")
        if not np.all(np.diff(ts) > 0):
            raise InvalidParameterError("sample_times must be strictly increasing")
        if not np.all(np.isfinite(ts)):
            raise InvalidParameterError("sample_times must be finite")
        object.__setattr__(self, "sample_times", ts)
        if not (0 < self.rel_tol < 1) or not (0 < self.abs_tol < 1):
            raise InvalidParameterError("tolerances must lie in (0, 1)")
        for name in ("max_step", "max_step_pulse"):
            val = getattr(self, name)
            if val is not None and not (float(val) > 0):
                raise InvalidParameterError(f"{name} must be positive when given")
        if self.method not in _METHODS:
            raise InvalidParameterError(f"method must be one of {_METHODS}, got {self.method!r}")

    @property
    def t_start(self):
        return float(self.sample_times[0])

    @property
    def t_end(self):
        return float(self.sample_times[-1])


@dataclass(frozen=True)
class QuantumState:
    """Pure state vector or density matrix on the composite space."""

    kind: str
    data: np.ndarray

    @classmethod
    def pure(cls, vec):
        return cls("pure", np.asarray(vec, dtype=complex))

    @classmethod
    def density(cls, mat):
        return cls("density", np.asarray(mat, dtype=complex))

    @property
    def dim(self):
        return self.data.shape[0]

    def validate(self, norm_tol=1e-6, herm_tol=1e-8, pos_tol=1e-6):
        if self.kind == "pure":
            if self.data.ndim != 1:
                raise IntegrityError("pure state must be a vector", "shape", math.nan)
            norm = float(np.linalg.norm(self.data))
            if abs(norm - 1.0) > norm_tol:
                raise IntegrityError(f"state norm {norm} off unity", "norm", math.nan)
        elif self.kind == "density":
            if self.data.ndim != 2 or self.data.shape[0] != self.data.shape[1]:
                raise IntegrityError("density matrix must be square", "shape", math.nan)
            tr = complex(np.trace(self.data))
            if abs(tr - 1.0) > norm_tol:
                raise IntegrityError(f"trace {tr} off unity", "trace", math.nan)
            if float(np.max(np.abs(self.data - self.data.conj().T))) > herm_tol:
                raise IntegrityError("density matrix not Hermitian", "hermiticity", math.nan)
            low = float(np.min(np.linalg.eigvalsh(0.5 * (self.data + self.data.conj().T))))
            if low < -pos_tol:
                raise IntegrityError(f"negative eigenvalue {low}", "positivity", math.nan)
        else:
            raise InvalidParameterError(f"unknown state kind {self.kind!r}")
        return self


@dataclass(frozen=True)
class JumpChannel:
    """One Lindblad channel: ``sqrt(rate) * operator`` enters the equation."""

    label: str
    rate: float
    operator: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class SchrodingerResult:
    times: np.ndarray
    states: np.ndarray  # (n_samples, dim)


@dataclass(frozen=True)
class MasterResult:
    times: np.ndarray
    states: np.ndarray  # (n_samples, dim, dim)
    hilbert: HilbertConfig


@dataclass(frozen=True)
class TrajectoryRecord:
    seed: int
    sample_times: np.ndarray
    observables: dict
    jumps: tuple  # ((time, channel label), ...)


@dataclass(frozen=True)
class EnsembleResult:
    times: np.ndarray
    means: dict
    stderrs: dict
    n_traj: int
    records: tuple


def jump_channels(params, hc, ops=None):
    """Dissipation channels of the dressed-state master equation.

    Mechanical decay and excitation act on ``b - beta a^dag a`` (the
    mechanical mode around its photon-dependent equilibrium), the cavity
    decays through ``a``, and a thermal photon-number dephasing channel with
    rate ``4 gamma_m theta_b beta^2`` acts on ``a^dag a``.  Channels with
    zero rate are dropped.
    """
    ops = composite_operators(hc) if ops is None else ops
    beta = params.beta
    shifted_b = ops.b - beta * ops.n_cav
    channels = []
    down_rate = params.gamma_m * (params.n_th + 1.0)
    if down_rate > 0:
        channels.append(JumpChannel("mech_down", down_rate, shifted_b))
    up_rate = params.gamma_m * params.n_th
    if up_rate > 0:
        channels.append(JumpChannel("mech_up", up_rate, ops.b.conj().T - beta * ops.n_cav))
    if params.kappa > 0:
        channels.append(JumpChannel("cavity_decay", params.kappa, ops.a))
    deph_rate = 4.0 * params.gamma_m * params.theta_b * beta * beta
    if deph_rate > 0:
        channels.append(JumpChannel("dephasing", deph_rate, ops.n_cav))
    return tuple(channels)


def lindblad_rhs(rho, t, params, train, hc):
    """Right-hand side of the master equation in the rotating frame.

    Reference implementation built directly from the Hamiltonian and the
    channel list; the production integrator evolves the same equation in a
    rotated basis, and tests hold the two routes together.
    """
    rho = np.asarray(rho, dtype=complex)
    ops = composite_operators(hc)
    h = static_hamiltonian(params, hc, ops)
    c = drive_coefficient(params, train, t) if train is not None else 0.0
    h = h + c * ops.a.conj().T + np.conj(c) * ops.a
    out = 1j * (rho @ h - h @ rho)
    for ch in jump_channels(params, hc, ops):
        l_op = math.sqrt(ch.rate) * ch.operator
        ld = l_op.conj().T
        ldl = ld @ l_op
        out += l_op @ rho @ ld - 0.5 * (ldl @ rho + rho @ ldl)
    return out


def _default_pulse_cap(params, train):
    fastest = max(abs(params.delta_1), abs(params.delta_2), params.omega_m)
    cap = 2.0 * math.pi / (20.0 * fastest)
    if train is not None:
        cap = min(cap, train.sigma / 10.0)
    return cap


def _default_idle_cap(params):
    slow = max(params.kappa, params.gamma_m)
    if slow <= 0:
        return 1e4 / params.omega_m
    return min(0.1 / slow, 1e4 / params.omega_m)


_ACTIVE_FLOOR_SIGMAS = math.sqrt(2.0 * math.log(1e8))


def _drive_windows(train, t0, t1):
    """Merged intervals where any pulse envelope exceeds 1e-8 of its peak."""
    if train is None or train.omega_0 == 0.0:
        return []
    half = train.sigma * min(train.window_sigmas, _ACTIVE_FLOOR_SIGMAS)
    raw = []
    for peak0 in (train.t1, train.t2):
        k_lo = max(0, math.ceil((t0 - peak0 - half) / train.period))
        k_hi = math.floor((t1 - peak0 + half) / train.period)
        for k in range(k_lo, k_hi + 1):
            peak = peak0 + k * train.period
            lo, hi = max(t0, peak - half), min(t1, peak + half)
            if lo < hi:
                raw.append((lo, hi))
    raw.sort()
    merged = []
    for lo, hi in raw:
        if merged and lo <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(hi, merged[-1][1]))
        else:
            merged.append((lo, hi))
    return merged


def _segments(params, train, cfg):
    """Split the integration span into (start, end, max_step) pieces."""
    t0, t1 = cfg.t_start, cfg.t_end
    cap_pulse = cfg.max_step_pulse if cfg.max_step_pulse is not None else _default_pulse_cap(params, train)
    cap_idle = cfg.max_step if cfg.max_step is not None else _default_idle_cap(params)
    cap_idle = max(cap_idle, cap_pulse)
    segs = []
    cursor = t0
    for lo, hi in _drive_windows(train, t0, t1):
        if lo > cursor:
            segs.append((cursor, lo, cap_idle))
        segs.append((lo, hi, cap_pulse))
        cursor = hi
    if cursor < t1:
        segs.append((cursor, t1, cap_idle))
    return segs


class DressedFrame:
    """Exact eigenbasis of the drive-free Hamiltonian as a working frame.

    The drive-free part is block diagonal in the cavity number, so each
    sector is diagonalized separately.  With ``u(t) = exp(i lam t)``, a
    rotating-frame operator ``X`` acts in this frame as the phase-dressed
    matrix ``u X_bar u*`` where ``X_bar = V^dag X V``; that conjugation is
    exact for the truncated matrices, so evolving here is identical to
    evolving in the rotating frame.
    """

    def __init__(self, params, hc):
        self.params = params
        self.hilbert = hc
        ops = composite_operators(hc)
        self.ops = ops
        n_a, n_b = hc.n_a, hc.n_b
        h_s = static_hamiltonian(params, hc, ops)
        lam = np.empty(hc.dim)
        v_blocks = []
        for n in range(n_a):
            sl = slice(n * n_b, (n + 1) * n_b)
            w, v = np.linalg.eigh(h_s[sl, sl])
            lam[sl] = w
            v_blocks.append(v)
        self.lam = lam
        self.v_blocks = v_blocks
        self.v_full = block_diag(*v_blocks).astype(complex)
        # cavity lowering maps sector n+1 into n with weight sqrt(n+1)
        self.a_up_blocks = [
            math.sqrt(n + 1) * (v_blocks[n].conj().T @ v_blocks[n + 1]) for n in range(n_a - 1)
        ]
        self.abar = np.zeros((hc.dim, hc.dim), dtype=complex)
        for n, a_blk in enumerate(self.a_up_blocks):
            self.abar[n * n_b : (n + 1) * n_b, (n + 1) * n_b : (n + 2) * n_b] = a_blk
        self.channels = jump_channels(params, hc, ops)
        self.l_scaled = [math.sqrt(ch.rate) * ch.operator for ch in self.channels]
        vh = self.v_full.conj().T
        self.lbar = [vh @ l_op @ self.v_full for l_op in self.l_scaled]
        if self.lbar:
            self.sbar = sum(lb.conj().T @ lb for lb in self.lbar)
        else:
            self.sbar = np.zeros((hc.dim, hc.dim), dtype=complex)
        self.gbar_blocks = [
            0.5 * self.sbar[n * n_b : (n + 1) * n_b, n * n_b : (n + 1) * n_b] for n in range(n_a)
        ]

    # frame transforms -------------------------------------------------
    def phases(self, t):
        return np.exp(1j * self.lam * t)

    def vector_to_frame(self, psi, t):
        return self.phases(t) * (self.v_full.conj().T @ psi)

    def vector_from_frame(self, phi, t):
        return self.v_full @ (np.conj(self.phases(t)) * phi)

    def density_to_frame(self, rho, t):
        u = self.phases(t)
        inner = self.v_full.conj().T @ rho @ self.v_full
        return (u[:, None] * inner) * np.conj(u)[None, :]

    def density_from_frame(self, sigma, t):
        u = self.phases(t)
        inner = (np.conj(u)[:, None] * sigma) * u[None, :]
        return self.v_full @ inner @ self.v_full.conj().T

    @staticmethod
    def _phase_dress(mat, u):
        return (u[:, None] * mat) * np.conj(u)[None, :]

    # right-hand sides --------------------------------------------------
    def drift_batch(self, t, phi_cols, train):
        """Non-Hermitian drift for state columns in the working frame."""
        n_b = self.hilbert.n_b
        u = self.phases(t)
        w = np.conj(u)[:, None] * phi_cols
        out = np.empty_like(w)
        for n, g_blk in enumerate(self.gbar_blocks):
            out[n * n_b : (n + 1) * n_b] = -(g_blk @ w[n * n_b : (n + 1) * n_b])
        c = drive_coefficient(self.params, train, t) if train is not None else 0.0
        if c != 0.0:
            mic = -1j * c
            micc = -1j * np.conj(c)
            for n, a_blk in enumerate(self.a_up_blocks):
                rows_n = slice(n * n_b, (n + 1) * n_b)
                rows_n1 = slice((n + 1) * n_b, (n + 2) * n_b)
                out[rows_n] += micc * (a_blk @ w[rows_n1])
                out[rows_n1] += mic * (a_blk.conj().T @ w[rows_n])
        return u[:, None] * out

    def master_rhs(self, t, sigma, train):
        u = self.phases(t)
        a_t = self._phase_dress(self.abar, u)
        c = drive_coefficient(self.params, train, t) if train is not None else 0.0
        h_t = c * a_t.conj().T + np.conj(c) * a_t
        out = 1j * (sigma @ h_t - h_t @ sigma)
        for lb in self.lbar:
            l_t = self._phase_dress(lb, u)
            out += l_t @ sigma @ l_t.conj().T
        if self.lbar:
            s_t = self._phase_dress(self.sbar, u)
            out -= 0.5 * (s_t @ sigma + sigma @ s_t)
        return out

    # observables --------------------------------------------------------
    def prepare_observables(self, observables):
        prepared = []
        vh = self.v_full.conj().T
        for name, op in observables.items():
            op = np.asarray(op, dtype=complex)
            if op.ndim == 1:
                prepared.append((name, "vec", vh @ op))
            elif op.ndim == 2:
                prepared.append((name, "mat", vh @ op @ self.v_full))
            else:
                raise InvalidParameterError(f"observable {name!r} must be a vector or matrix")
        return prepared

    def eval_observables(self, prepared, t, phi_cols, out, sample_idx, col_idx=None):
        """Normalized expectation values per column, written into ``out``."""
        x = np.conj(self.phases(t))[:, None] * phi_cols
        norms = np.sum(np.abs(x) ** 2, axis=0)
        norms = np.where(norms > 0, norms, 1.0)
        for name, kind, payload in prepared:
            if kind == "vec":
                vals = np.abs(payload.conj() @ x) ** 2 / norms
            else:
                vals = np.real(np.einsum("ib,ij,jb->b", np.conj(x), payload, x)) / norms
            if col_idx is None:
                out[name][sample_idx, :] = vals
            else:
                out[name][sample_idx, col_idx] = vals


def standard_observables(params, hc, m_max=3):
    """Dressed-state projectors (as vectors) plus the bare phonon number."""
    basis = dressed_basis(params, hc, n_max=min(2, hc.n_a), m_max=m_max)
    obs = {}
    for n in range(min(2, hc.n_a)):
        for m in range(m_max):
            obs[f"P_{n}{m}"] = basis.state(n, m)
    obs["mean_phonon"] = composite_operators(hc).n_mech
    return obs


def _as_vector(state, dim):
    if isinstance(state, QuantumState):
        if state.kind != "pure":
            raise InvalidParameterError("expected a pure state")
        vec = state.data
    else:
        vec = np.asarray(state, dtype=complex)
    if vec.shape != (dim,):
        raise InvalidParameterError(f"state must have shape ({dim},), got {vec.shape}")
    norm = float(np.linalg.norm(vec))
    if abs(norm - 1.0) > 1e-6:
        raise IntegrityError(f"initial state norm {norm} is off unity", "norm", math.nan)
    return vec


def _as_density(state, dim):
    if isinstance(state, QuantumState):
        if state.kind == "pure":
            vec = _as_vector(state, dim)
            return np.outer(vec, vec.conj())
        mat = state.data
    else:
        mat = np.asarray(state, dtype=complex)
        if mat.ndim == 1:
            vec = _as_vector(mat, dim)
            return np.outer(vec, vec.conj())
    if mat.shape != (dim, dim):
        raise InvalidParameterError(f"density matrix must be ({dim},{dim}), got {mat.shape}")
    return mat


def _vacuum_vector(dim):
    vec = np.zeros(dim, dtype=complex)
    vec[0] = 1.0
    return vec


def evolve_schrodinger(psi0, h_of_t, cfg):
    """Integrate ``i dpsi/dt = H(t) psi`` for a generic Hamiltonian provider.

    Parameters
    ----------
    psi0 : array or QuantumState
        Normalized initial vector at ``cfg.sample_times[0]``.
    h_of_t : callable
        Maps a time to a Hermitian complex matrix.
    cfg : IntegratorConfig

    Returns
    -------
    SchrodingerResult
        Sampled state vectors; norms stay within 1e-6 of unity or an
        ``IntegrityError`` is raised.
    """
    h0 = np.asarray(h_of_t(cfg.t_start), dtype=complex)
    dim = h0.shape[0]
    scale = max(1.0, float(np.max(np.abs(h0))))
    if float(np.max(np.abs(h0 - h0.conj().T))) > 1e-10 * scale:
        raise InvalidParameterError("h_of_t must return Hermitian matrices")
    psi = _as_vector(psi0, dim)

    def rhs(t, y):
        return -1j * (h_of_t(t) @ y)

    max_step = cfg.max_step if cfg.max_step is not None else np.inf
    sol = solve_ivp(
        rhs,
        (cfg.t_start, cfg.t_end),
        psi,
        method=cfg.method,
        t_eval=cfg.sample_times,
        rtol=cfg.rel_tol,
        atol=cfg.abs_tol,
        max_step=max_step,
    )
    if not sol.success:
        raise StiffnessError(
            f"integration stalled: {sol.message}", sol.t[-1] if sol.t.size else cfg.t_start
        )
    states = sol.y.T.copy()
    if cfg.check_invariants:
        norms = np.linalg.norm(states, axis=1)
        bad = np.where(np.abs(norms - 1.0) > 1e-6)[0]
        if bad.size:
            k = int(bad[0])
            raise IntegrityError(
                f"norm drifted to {norms[k]:.9f} at t={sol.t[k]:.6g}", "norm", sol.t[k]
            )
    return SchrodingerResult(times=sol.t.copy(), states=states)


def evolve_master(rho0, params, train, hc, cfg):
    """Integrate the dissipative master equation on the composite space.

    Parameters
    ----------
    rho0 : array, QuantumState, or None
        Initial density matrix (``None`` means the composite vacuum).
        Vectors are promoted to projectors.
    params : PhysicalParams
    train : PulseTrain or None
        ``None`` (or zero amplitude) evolves without drives.
    hc : HilbertConfig
    cfg : IntegratorConfig
        ``cfg.check_invariants=False`` skips trace/hermiticity/positivity
        checks, which is needed when propagating unnormalized operators.

    Returns
    -------
    MasterResult
        Density matrices at the sample times, rotating frame.
    """
    frame = DressedFrame(params, hc)
    dim = hc.dim
    rho = _as_density(rho0, dim) if rho0 is not None else np.outer(
        _vacuum_vector(dim), _vacuum_vector(dim)
    )
    sigma = frame.density_to_frame(rho, cfg.t_start)
    y = sigma.ravel()

    def rhs(t, yflat):
        return frame.master_rhs(t, yflat.reshape(dim, dim), train).ravel()

    samples = cfg.sample_times
    out = np.empty((samples.size, dim, dim), dtype=complex)
    out[0] = rho
    next_idx = 1
    for a, b, cap in _segments(params, train, cfg):
        pts = samples[(samples > a) & (samples <= b)]
        t_eval = pts if pts.size and pts[-1] == b else np.append(pts, b)
        sol = solve_ivp(
            rhs,
            (a, b),
            y,
            method=cfg.method,
            t_eval=t_eval,
            rtol=cfg.rel_tol,
            atol=cfg.abs_tol,
            max_step=cap,
        )
        if not sol.success:
            raise StiffnessError(
                f"integration stalled: {sol.message}", sol.t[-1] if sol.t.size else a
            )
        for k in range(pts.size):
            out[next_idx + k] = frame.density_from_frame(sol.y[:, k].reshape(dim, dim), pts[k])
        next_idx += pts.size
        y = sol.y[:, -1]

    if cfg.check_invariants:
        _check_density_samples(out, samples)
    return MasterResult(times=samples.copy(), states=out, hilbert=hc)


def _check_density_samples(states, times):
    for k in range(states.shape[0]):
        rho = states[k]
        t = float(times[k])
        tr = float(np.real(np.trace(rho)))
        if abs(tr - 1.0) > 1e-6:
            raise IntegrityError(f"trace {tr:.9f} at t={t:.6g}", "trace", t)
        herm = float(np.max(np.abs(rho - rho.conj().T)))
        if herm > 1e-8:
            raise IntegrityError(f"hermiticity deviation {herm:.3e} at t={t:.6g}", "hermiticity", t)
        low = float(np.min(np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))))
        if low < -1e-6:
            raise IntegrityError(f"eigenvalue {low:.3e} at t={t:.6g}", "positivity", t)


# ---------------------------------------------------------------------------
# Monte Carlo wave function engine
# ---------------------------------------------------------------------------


def _trajectory_rng(seed):
    # negative seeds map to their unsigned 64-bit representation
    entropy = int(seed) & 0xFFFFFFFFFFFFFFFF
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def _column_interpolant(sol, col_mask):
    """Dense-output evaluator restricted to selected flat components.

    Mirrors the interpolation polynomial of the solver's dense output on a
    row subset; a regression test pins it against the full evaluator.
    """
    q_rows = sol.Q[col_mask]
    n_pow = sol.Q.shape[1]

    def evaluate(t):
        x = (t - sol.t_old) / sol.h
        p = np.cumprod(np.full(n_pow, x))
        return sol.y_old[col_mask] + sol.h * (q_rows @ p)

    return evaluate


def _bisect_threshold(norm2_of_t, t_lo, t_hi, target):
    """Locate the monotone crossing ``norm2(t) = target`` by bisection."""
    lo, hi = t_lo, t_hi
    while (hi - lo) > 1e-10 * max(1.0, abs(hi)):
        mid = 0.5 * (lo + hi)
        if norm2_of_t(mid) > target:
            lo = mid
        else:
            hi = mid
    return hi


class _McwfEngine:
    """Shared-step batch of Monte Carlo trajectories.

    All trajectories advance in lockstep through one adaptive integrator
    (error control covers every column); each keeps its own jump threshold,
    random stream, and record.  A trajectory whose norm crosses its
    threshold mid-step is bisected on the dense output, jumped, and then
    re-integrated alone up to the shared step end before rejoining.
    """

    def __init__(self, frame, train, cfg, psi0, seeds, observables):
        self.frame = frame
        self.train = train
        self.cfg = cfg
        self.seeds = [int(s) for s in seeds]
        self.n_traj = len(self.seeds)
        self.rngs = [_trajectory_rng(s) for s in self.seeds]
        self.dim = frame.hilbert.dim
        self.prepared = frame.prepare_observables(observables)
        self.samples = cfg.sample_times
        self.values = {
            name: np.empty((self.samples.size, self.n_traj)) for name, _, _ in self.prepared
        }
        self.jumps = [[] for _ in range(self.n_traj)]
        self.thresholds = np.array([rng.uniform() for rng in self.rngs])
        phi0 = frame.vector_to_frame(psi0, cfg.t_start)
        self.y0 = np.repeat(phi0[:, None], self.n_traj, axis=1)
        self.has_channels = bool(frame.lbar)

    def rhs_flat(self, t, yflat):
        cols = yflat.reshape(self.dim, self.n_traj)
        return self.frame.drift_batch(t, cols, self.train).ravel()

    def _rhs_single(self, t, y):
        return self.frame.drift_batch(t, y[:, None], self.train).ravel()

    def run(self):
        cfg = self.cfg
        self.frame.eval_observables(self.prepared, cfg.t_start, self.y0, self.values, 0)
        next_sample = 1
        yflat = self.y0.ravel()
        for a, b, cap in _segments(self.frame.params, self.train, cfg):
            rk = RK45(
                self.rhs_flat,
                a,
                yflat,
                b,
                max_step=cap,
                rtol=cfg.rel_tol,
                atol=cfg.abs_tol,
            )
            while rk.status == "running":
                prev_norms = np.sum(np.abs(rk.y.reshape(self.dim, self.n_traj)) ** 2, axis=0)
                rk.step()
                if rk.status == "failed":
                    raise StiffnessError("adaptive step underflow", rk.t)
                t_new = rk.t
                norms = np.sum(np.abs(rk.y.reshape(self.dim, self.n_traj)) ** 2, axis=0)
                if self.has_channels:
                    grew = norms > prev_norms + 1e-6
                else:
                    grew = np.abs(np.sqrt(norms) - 1.0) > 1e-6
                if np.any(grew):
                    raise IntegrityError(
                        f"trajectory norm violated monotonicity at t={t_new:.6g}",
                        "norm",
                        t_new,
                    )
                crossed = np.where(norms < self.thresholds)[0]
                sol = rk.dense_output() if crossed.size else None
                catchup = {}
                for i in crossed:
                    catchup[int(i)] = self._jump_and_catch_up(int(i), sol, rk.t_old, t_new, cap)
                # samples inside (t_old, t_new]: dense output, with jumped
                # columns overridden by their own catch-up history
                while next_sample < self.samples.size and self.samples[next_sample] <= t_new:
                    ts = self.samples[next_sample]
                    if sol is None:
                        sol = rk.dense_output()
                    cols_s = sol(ts).reshape(self.dim, self.n_traj)
                    self.frame.eval_observables(self.prepared, ts, cols_s, self.values, next_sample)
                    for i, (hist, _) in catchup.items():
                        for t_h, phi_h in hist:
                            if t_h == ts:
                                self.frame.eval_observables(
                                    self.prepared, ts, phi_h[:, None], self.values, next_sample, [i]
                                )
                    next_sample += 1
                if catchup:
                    y_mut = rk.y.reshape(self.dim, self.n_traj)
                    for i, (_, phi_end) in catchup.items():
                        y_mut[:, i] = phi_end
                    # FSAL slot must match the mutated state
                    rk.f = rk.fun(rk.t, rk.y)
            yflat = rk.y
        return self._finalize()

    def _jump_and_catch_up(self, i, sol, t_lo, t_hi, cap):
        """Bisect the threshold crossing of column ``i`` and jump it.

        Returns the sampled history inside ``(t*, t_hi]`` and the column
        state at ``t_hi``.
        """
        col_mask = np.arange(self.dim) * self.n_traj + i
        column = _column_interpolant(sol, col_mask)

        def norm2(t):
            return float(np.sum(np.abs(column(t)) ** 2))

        history = []
        t_star = _bisect_threshold(norm2, t_lo, t_hi, self.thresholds[i])
        t_cursor, phi = self._apply_jump(i, t_star, column(t_star))
        # re-integrate alone (the jump broke lockstep), watching for further
        # crossings before the shared step end
        while t_cursor < t_hi:
            rk = RK45(
                self._rhs_single,
                t_cursor,
                phi,
                t_hi,
                max_step=cap,
                rtol=self.cfg.rel_tol,
                atol=self.cfg.abs_tol,
            )
            jumped = False
            while rk.status == "running":
                rk.step()
                if rk.status == "failed":
                    raise StiffnessError("adaptive step underflow in catch-up", rk.t)
                inner = None
                t_star2 = None
                if float(np.sum(np.abs(rk.y) ** 2)) < self.thresholds[i]:
                    inner = rk.dense_output()
                    t_star2 = _bisect_threshold(
                        lambda tt: float(np.sum(np.abs(inner(tt)) ** 2)),
                        rk.t_old,
                        rk.t,
                        self.thresholds[i],
                    )
                step_end = t_star2 if t_star2 is not None else rk.t
                hist_mask = (self.samples > rk.t_old) & (self.samples <= step_end)
                if np.any(hist_mask):
                    if inner is None:
                        inner = rk.dense_output()
                    for ts in self.samples[hist_mask]:
                        history.append((float(ts), inner(float(ts))))
                if t_star2 is not None:
                    t_cursor, phi = self._apply_jump(i, t_star2, inner(t_star2))
                    jumped = True
                    break
            if not jumped:
                phi = rk.y
                t_cursor = t_hi
        return history, phi

    def _apply_jump(self, i, t_star, phi):
        """Project column ``i`` through a jump channel at ``t_star``."""
        psi = self.frame.vector_from_frame(phi, t_star)
        weights = np.array([np.linalg.norm(l_op @ psi) ** 2 for l_op in self.frame.l_scaled])
        total = float(weights.sum())
        if total <= 0.0:
            raise IntegrityError(
                f"jump triggered with no available channel at t={t_star:.6g}", "jump", t_star
            )
        rng = self.rngs[i]
        pick = int(np.searchsorted(np.cumsum(weights) / total, rng.uniform(), side="right"))
        pick = min(pick, len(weights) - 1)
        psi_new = self.frame.l_scaled[pick] @ psi
        psi_new = psi_new / np.linalg.norm(psi_new)
        self.jumps[i].append((float(t_star), self.frame.channels[pick].label))
        self.thresholds[i] = rng.uniform()
        return t_star, self.frame.vector_to_frame(psi_new, t_star)

    def _finalize(self):
        records = []
        for i, seed in enumerate(self.seeds):
            obs = {name: self.values[name][:, i].copy() for name in self.values}
            records.append(
                TrajectoryRecord(
                    seed=seed,
                    sample_times=self.samples.copy(),
                    observables=obs,
                    jumps=tuple(self.jumps[i]),
                )
            )
        return records


def mcwf_trajectory(psi0, params, train, hc, cfg, seed, observables=None):
    """Single Monte Carlo wave-function trajectory.

    Deterministic for fixed ``(seed, cfg, params)``: the threshold sequence,
    channel choices, jump times, and sampled observables all reproduce
    exactly.

    Returns
    -------
    TrajectoryRecord
        Sampled normalized observables plus the (time, channel) jump log.
    """
    frame = DressedFrame(params, hc)
    psi = _as_vector(psi0 if psi0 is not None else _vacuum_vector(hc.dim), hc.dim)
    obs = standard_observables(params, hc) if observables is None else observables
    engine = _McwfEngine(frame, train, cfg, psi, [seed], obs)
    return engine.run()[0]


def ensemble_average(params, train, hc, cfg, n_traj, base_seed, observables=None, psi0=None):
    """Monte Carlo ensemble, averaged observable by observable.

    Trajectory ``i`` uses seed ``base_seed + i`` through a counter-based
    stream, so each member reproduces exactly the single trajectory run with
    that seed, and the merged mean cannot depend on any completion order.
    All trajectories share one adaptive integration (error control covers
    every column), which is what makes large ensembles affordable on one
    core; the member records are still individually valid trajectories.

    Returns
    -------
    EnsembleResult
        Means, standard errors of the mean (ddof=1), and per-trajectory
        records in seed order.
    """
    if int(n_traj) != n_traj or n_traj < 1:
        raise InvalidParameterError(f"n_traj must be a positive integer, got {n_traj!r}")
    frame = DressedFrame(params, hc)
    psi = _as_vector(psi0 if psi0 is not None else _vacuum_vector(hc.dim), hc.dim)
    obs = standard_observables(params, hc) if observables is None else observables
    seeds = [int(base_seed) + i for i in range(int(n_traj))]
    engine = _McwfEngine(frame, train, cfg, psi, seeds, obs)
    records = engine.run()
    means = {}
    stderrs = {}
    n_traj = int(n_traj)
    for name, block in engine.values.items():
        means[name] = block.mean(axis=1)
        if n_traj > 1:
            stderrs[name] = block.std(axis=1, ddof=1) / math.sqrt(n_traj)
        else:
            stderrs[name] = np.zeros(block.shape[0])
    return EnsembleResult(
        times=cfg.sample_times.copy(),
        means=means,
        stderrs=stderrs,
        n_traj=n_traj,
        records=tuple(records),
    )
