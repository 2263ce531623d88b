"""Truncated Fock-space primitives for the optomechanical simulator.

All operators are dense complex ``numpy`` arrays over the number basis
``|0>, ..., |dim-1>``.  Composite cavity+mechanics objects order the cavity
index first: ``tensor(A, B)`` acts on the flattened index ``n*dim_b + m``
with ``n`` the cavity excitation and ``m`` the mechanical one.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import eval_genlaguerre, gammaln

from .exceptions import InvalidParameterError, TruncationInsufficientError

__all__ = [
    "annihilation_op",
    "number_op",
    "displacement_op",
    "a_coefficient",
    "displaced_number_state",
    "find_g_n",
    "tensor",
]


def _check_dim(dim):
    if int(dim) != dim or dim < 1:
        raise InvalidParameterError(f"dimension must be a positive integer, got {dim!r}")
    return int(dim)


def annihilation_op(dim):
    """Bosonic annihilation operator on a ``dim``-dimensional number basis.

    Parameters
    ----------
    dim : int
        Basis size.  ``annihilation_op(dim).conj().T`` is the matching
        creation operator.

    Returns
    -------
    numpy.ndarray
        Complex ``(dim, dim)`` matrix with ``sqrt(n)`` on the first
        superdiagonal.
    """
    dim = _check_dim(dim)
    a = np.zeros((dim, dim), dtype=complex)
    ns = np.arange(1, dim)
    a[ns - 1, ns] = np.sqrt(ns)
    return a


def number_op(dim):
    """Number operator ``diag(0, 1, ..., dim-1)`` as a complex matrix."""
    dim = _check_dim(dim)
    return np.diag(np.arange(dim, dtype=float)).astype(complex)


def displacement_op(beta, dim):
    """Displacement operator ``exp(beta*(b^dag - b))`` for real ``beta``.

    Built from the eigendecomposition of the Hermitian generator
    ``i(b^dag - b)``, which keeps the result exactly unitary in the
    truncated space.

    Parameters
    ----------
    beta : float
        Real displacement amplitude.
    dim : int
        Basis size.

    Returns
    -------
    numpy.ndarray
        Complex unitary ``(dim, dim)`` matrix.
    """
    dim = _check_dim(dim)
    beta = float(beta)
    if not math.isfinite(beta):
        raise InvalidParameterError(f"displacement amplitude must be finite, got {beta!r}")
    b = annihilation_op(dim)
    gen = 1j * (b.conj().T - b)
    w, u = np.linalg.eigh(gen)
    return (u * np.exp(-1j * beta * w)) @ u.conj().T


def a_coefficient(n, m, q, beta):
    """Pulse-coupling matrix element ``sqrt(n) <m| D(-beta) |q>``.

    Closed form in terms of associated Laguerre polynomials, evaluated with
    ``scipy``'s stable recurrence.  The two index orderings need separate
    branches because the polynomial degree must be the smaller index.

    Parameters
    ----------
    n : int
        Cavity excitation of the upper level; ``n = 0`` returns 0.
    m, q : int
        Mechanical indices of the bra and ket sides.
    beta : float
        Single-photon displacement ``g / omega_m``.

    Returns
    -------
    float
        Real coupling coefficient.
    """
    for name, val in (("n", n), ("m", m), ("q", q)):
        if int(val) != val or val < 0:
            raise InvalidParameterError(f"index {name} must be a nonnegative integer, got {val!r}")
    beta = float(beta)
    if not math.isfinite(beta):
        raise InvalidParameterError(f"beta must be finite, got {beta!r}")
    n, m, q = int(n), int(m), int(q)
    if n == 0:
        return 0.0
    x = beta * beta
    if m < q:
        log_ratio = 0.5 * (gammaln(m + 1) - gammaln(q + 1))
        poly = eval_genlaguerre(m, q - m, x)
        power = beta ** (q - m)
    else:
        log_ratio = 0.5 * (gammaln(q + 1) - gammaln(m + 1))
        poly = eval_genlaguerre(q, m - q, x)
        power = (-beta) ** (m - q)
    return math.sqrt(n) * math.exp(log_ratio - 0.5 * x) * power * poly


def displaced_number_state(n_photons, m, beta, dim, max_deficit=1e-6):
    """Number-basis coefficients of ``D(n_photons*beta)|m>`` in ``dim`` levels.

    The state is computed in an internally padded space so that the weight
    spilling past ``dim`` can be measured against the untruncated state; the
    returned head is NOT renormalized.

    Parameters
    ----------
    n_photons : int
        Cavity excitation selecting the displacement ``n_photons * beta``.
    m : int
        Mechanical number state being displaced.
    beta : float
        Single-photon displacement.
    dim : int
        Size of the target truncated space.
    max_deficit : float
        Largest tolerated norm-squared loss outside the first ``dim`` levels.

    Returns
    -------
    numpy.ndarray
        Complex vector of length ``dim`` with norm within ``max_deficit``
        of 1.

    Raises
    ------
    TruncationInsufficientError
        If the discarded tail carries more than ``max_deficit`` weight.
    """
    dim = _check_dim(dim)
    if int(n_photons) != n_photons or n_photons < 0:
        raise InvalidParameterError(f"n_photons must be a nonnegative integer, got {n_photons!r}")
    if int(m) != m or m < 0:
        raise InvalidParameterError(f"m must be a nonnegative integer, got {m!r}")
    if m >= dim:
        raise InvalidParameterError(f"m={m} does not fit in dim={dim}")
    alpha = float(n_photons) * float(beta)
    if not math.isfinite(alpha):
        raise InvalidParameterError("displacement must be finite")
    # Pad past the displaced distribution (mean ~ m + alpha^2) by several
    # standard deviations so the tail estimate is trustworthy.
    spread = math.sqrt((2 * m + 1) * alpha * alpha + m + 1)
    pad = int(math.ceil(alpha * alpha + 8.0 * spread + 16.0))
    full = displacement_op(alpha, dim + pad)[:, m]
    head = full[:dim].copy()
    deficit = float(np.sum(np.abs(full[dim:]) ** 2))
    if deficit > max_deficit:
        raise TruncationInsufficientError(
            f"displaced state D({alpha:.4g})|{m}> loses {deficit:.3e} norm "
            f"outside dim={dim} (allowed {max_deficit:.1e})",
            deficit,
        )
    return head


def find_g_n(n_target, omega_m=1.0):
    """Coupling ``g_N`` that closes the N-phonon transition.

    Solves for the smallest positive root of ``L_N(beta^2) = 0`` (the
    ``A_NN`` coupling zero) on a coarse grid followed by bisection, then
    scales by ``omega_m``.

    Parameters
    ----------
    n_target : int
        Even phonon-pair number ``N >= 2``.
    omega_m : float
        Mechanical frequency used to dimension the result.

    Returns
    -------
    float
        Coupling ``g_N = beta_N * omega_m`` with ``|L_N(beta_N^2)| < 1e-12``.
    """
    if int(n_target) != n_target or n_target < 2 or n_target % 2 != 0:
        raise InvalidParameterError(f"n_target must be an even integer >= 2, got {n_target!r}")
    omega_m = float(omega_m)
    if not (math.isfinite(omega_m) and omega_m > 0):
        raise InvalidParameterError(f"omega_m must be positive, got {omega_m!r}")
    n_target = int(n_target)

    def f(beta):
        return float(eval_genlaguerre(n_target, 0, beta * beta))

    step = 0.01
    lo = step
    f_lo = f(lo)
    hi = lo
    for k in range(2, 100001):
        hi = k * step
        f_hi = f(hi)
        if f_lo == 0.0:
            return lo * omega_m
        if f_lo * f_hi < 0.0:
            break
        lo, f_lo = hi, f_hi
    else:  # pragma: no cover - L_N always has positive roots
        raise InvalidParameterError(f"no sign change found for N={n_target}")

    for _ in range(200):
        mid = 0.5 * (lo + hi)
        f_mid = f(mid)
        if abs(f_mid) < 1e-12 or (hi - lo) < 1e-15:
            return mid * omega_m
        if f_lo * f_mid < 0.0:
            hi = mid
        else:
            lo, f_lo = mid, f_mid
    return 0.5 * (lo + hi) * omega_m


def tensor(a, b):
    """Kronecker product with the cavity factor on the left.

    ``tensor(A, B)[n*dim_b + m, n'*dim_b + m'] = A[n, n'] * B[m, m']``.
    """
    return np.kron(np.asarray(a), np.asarray(b))
