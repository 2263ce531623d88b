"""Correlation analysis: operator-algebra oracles and clustering rules."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phonon_pulse_sim.dynamics import (
    IntegratorConfig,
    MasterResult,
    QuantumState,
    TrajectoryRecord,
    evolve_master,
)
from phonon_pulse_sim.exceptions import (
    InvalidParameterError,
    NoExtremumError,
    UndefinedCorrelationError,
)
from phonon_pulse_sim.fockspace import annihilation_op, displacement_op, find_g_n, tensor
from phonon_pulse_sim.model import HilbertConfig, PhysicalParams, PulseTrain, dressed_basis
from phonon_pulse_sim.observables import (
    CorrelationResult,
    TimeSeries,
    analyze_correlation,
    correlation_verdict,
    g2_delayed,
    g2_equal_time,
    g2_value,
    locate_extremum,
    mean_phonon,
    pair_emission_statistics,
    population,
)

G2 = find_g_n(2)


def composite_fock(n, m, hc):
    vec = np.zeros(hc.dim, dtype=complex)
    vec[n * hc.n_b + m] = 1.0
    return vec


def mech_density(populations):
    return np.diag(np.asarray(populations, dtype=complex))


def random_density(dim, seed):
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    rho = m @ m.conj().T
    return rho / np.trace(rho)


def record_with_jumps(jumps, seed=0):
    return TrajectoryRecord(
        seed=seed,
        sample_times=np.array([0.0, 1.0]),
        observables={},
        jumps=tuple(jumps),
    )


class TestTimeSeries:
    def test_length_mismatch_rejected(self):
        with pytest.raises(InvalidParameterError):
            TimeSeries(times=[0.0, 1.0], values=[1.0])

    def test_non_increasing_times_rejected(self):
        with pytest.raises(InvalidParameterError):
            TimeSeries(times=[0.0, 1.0, 1.0], values=[1.0, 2.0, 3.0])

    def test_infinite_values_rejected(self):
        with pytest.raises(InvalidParameterError):
            TimeSeries(times=[0.0, 1.0], values=[1.0, math.inf])

    def test_nan_marks_undefined_points(self):
        ts = TimeSeries(times=[0.0, 1.0, 2.0], values=[1.0, math.nan, 3.0])
        assert list(ts.defined_mask) == [True, False, True]


class TestPopulation:
    def test_projector_on_itself(self):
        hc = HilbertConfig(n_a=2, n_b=4)
        phi = composite_fock(0, 0, hc)
        rho = np.outer(phi, phi.conj())
        assert population(rho, phi) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal_cavity_sectors(self):
        hc = HilbertConfig(n_a=2, n_b=15)
        params = PhysicalParams.resonance_preset(g=G2)
        basis = dressed_basis(params, hc, m_max=2)
        vac = composite_fock(0, 0, hc)
        rho = np.outer(vac, vac.conj())
        assert population(rho, basis.state(1, 0)) == pytest.approx(0.0, abs=1e-12)

    def test_superposition_weight(self):
        hc = HilbertConfig(n_a=2, n_b=4)
        psi = (composite_fock(0, 0, hc) + composite_fock(0, 2, hc)) / math.sqrt(2)
        assert population(psi, composite_fock(0, 2, hc)) == pytest.approx(0.5, abs=1e-12)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(InvalidParameterError):
            population(np.eye(4) / 4, np.array([1.0, 0.0]))

    def test_clamping_keeps_raw_value(self):
        hc = HilbertConfig(n_a=2, n_b=2)
        phi = composite_fock(0, 0, hc)
        rho = (1.0 + 5e-9) * np.outer(phi, phi.conj())
        assert population(rho, phi) == 1.0
        assert population(rho, phi, raw=True) == pytest.approx(1.0 + 5e-9, abs=1e-15)

    def test_small_negative_overlap_clamped_to_zero(self):
        hc = HilbertConfig(n_a=2, n_b=2)
        phi0 = composite_fock(0, 0, hc)
        phi1 = composite_fock(0, 1, hc)
        rho = np.outer(phi0, phi0.conj()) - 5e-9 * np.outer(phi1, phi1.conj())
        assert population(rho, phi1) == 0.0
        assert population(rho, phi1, raw=True) == pytest.approx(-5e-9, abs=1e-15)

    @given(st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_pure_state_population_within_unit_interval(self, seed):
        rng = np.random.default_rng(seed)
        psi = rng.normal(size=6) + 1j * rng.normal(size=6)
        psi /= np.linalg.norm(psi)
        phi = np.zeros(6, dtype=complex)
        phi[rng.integers(6)] = 1.0
        value = population(psi, phi)
        assert 0.0 <= value <= 1.0


class TestMeanPhonon:
    def test_composite_fock_state(self):
        hc = HilbertConfig(n_a=2, n_b=6)
        assert mean_phonon(composite_fock(0, 2, hc), hc) == pytest.approx(2.0, abs=1e-12)

    def test_vacuum(self):
        hc = HilbertConfig(n_a=2, n_b=6)
        assert mean_phonon(composite_fock(0, 0, hc), hc) == 0.0

    def test_displaced_vacuum_gives_beta_squared(self):
        hc = HilbertConfig(n_a=2, n_b=15)
        params = PhysicalParams.resonance_preset(g=G2)
        basis = dressed_basis(params, hc, m_max=2)
        expected = 2.0 - math.sqrt(2.0)
        assert mean_phonon(basis.state(1, 0), hc) == pytest.approx(expected, abs=1e-8)

    def test_bare_mechanical_state_without_hilbert(self):
        psi = np.zeros(5, dtype=complex)
        psi[3] = 1.0
        assert mean_phonon(psi) == pytest.approx(3.0, abs=1e-12)

    def test_density_input(self):
        rho = mech_density([0.25, 0.5, 0.25])
        assert mean_phonon(rho) == pytest.approx(1.0, abs=1e-12)


class TestG2Value:
    def test_fock_two_standard(self):
        rho = mech_density([0.0, 0.0, 1.0])
        assert g2_value(rho, 1) == pytest.approx(0.5, abs=1e-12)

    def test_fock_two_generalized_vanishes(self):
        rho = mech_density([0.0, 0.0, 1.0])
        assert g2_value(rho, 2) == 0.0

    def test_coherent_state_is_poissonian(self):
        d = displacement_op(0.5, 30)
        alpha = d[:, 0]
        assert g2_value(alpha, 1) == pytest.approx(1.0, abs=1e-6)
        assert g2_value(alpha, 2) == pytest.approx(1.0, abs=1e-6)

    def test_vacuum_is_undefined(self):
        rho = mech_density([1.0, 0.0, 0.0])
        assert math.isnan(g2_value(rho, 1))

    def test_small_negative_ratio_clamped(self):
        rho = mech_density([0.5, 0.5 + 2e-9, -1e-9])
        assert g2_value(rho, 1) == 0.0

    def test_invalid_order_rejected(self):
        with pytest.raises(InvalidParameterError):
            g2_value(mech_density([0.0, 1.0]), 3)

    @given(st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_matches_brute_force_operator_trace(self, seed):
        rho = random_density(4, seed)
        b = annihilation_op(4)
        bd = b.conj().T
        num = float(np.real(np.trace(rho @ bd @ bd @ b @ b)))
        den = float(np.real(np.trace(rho @ bd @ b))) ** 2
        assert g2_value(rho, 1) == pytest.approx(num / den, abs=1e-12)

    @given(st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=20, deadline=None)
    def test_composite_marginal_matches_operator_trace(self, seed):
        hc = HilbertConfig(n_a=2, n_b=5)
        rho = random_density(hc.dim, seed)
        b2 = tensor(np.eye(hc.n_a), annihilation_op(hc.n_b))
        b2 = b2 @ b2
        num = float(np.real(np.trace(rho @ b2.conj().T @ b2.conj().T @ b2 @ b2)))
        den = float(np.real(np.trace(rho @ b2.conj().T @ b2))) ** 2
        assert g2_value(rho, 2, hc) == pytest.approx(num / den, abs=1e-10)


class TestG2EqualTime:
    def test_pointwise_values_and_markers(self):
        hc = HilbertConfig(n_a=2, n_b=4)
        states = np.stack(
            [
                np.outer(composite_fock(0, 0, hc), composite_fock(0, 0, hc).conj()),
                np.outer(composite_fock(0, 1, hc), composite_fock(0, 1, hc).conj()),
                np.outer(composite_fock(0, 2, hc), composite_fock(0, 2, hc).conj()),
            ]
        )
        series = g2_equal_time(
            MasterResult(times=np.array([0.0, 1.0, 2.0]), states=states, hilbert=hc), 1
        )
        assert math.isnan(series.values[0])
        assert series.values[1] == 0.0
        assert series.values[2] == pytest.approx(0.5, abs=1e-12)


class TestLocateExtremum:
    def test_sine_maximum_near_half_pi(self):
        t = np.linspace(0.0, math.pi, 31)
        series = TimeSeries(times=t, values=np.sin(t))
        t_star = locate_extremum(series, "max", (0.0, math.pi))
        assert abs(t_star - math.pi / 2) < t[1] - t[0]

    def test_parabola_vertex_recovered_exactly(self):
        t = np.linspace(0.0, 5.0, 11)
        series = TimeSeries(times=t, values=-((t - 2.345) ** 2))
        assert locate_extremum(series, "max", (0.0, 5.0)) == pytest.approx(2.345, abs=1e-9)

    def test_upward_parabola_minimum(self):
        t = np.linspace(0.0, 5.0, 11)
        series = TimeSeries(times=t, values=(t - 3.21) ** 2)
        assert locate_extremum(series, "min", (0.0, 5.0)) == pytest.approx(3.21, abs=1e-9)

    def test_constant_series_breaks_tie_earliest(self):
        t = np.linspace(0.0, 5.0, 6)
        series = TimeSeries(times=t, values=np.ones(6))
        assert locate_extremum(series, "max", (1.0, 4.0)) == 1.0

    def test_all_undefined_raises(self):
        series = TimeSeries(times=[0.0, 1.0, 2.0], values=[math.nan] * 3)
        with pytest.raises(NoExtremumError):
            locate_extremum(series, "max", (0.0, 2.0))

    def test_too_few_defined_points_raises(self):
        series = TimeSeries(times=[0.0, 1.0, 2.0, 3.0], values=[math.nan, 1.0, 2.0, math.nan])
        with pytest.raises(NoExtremumError):
            locate_extremum(series, "max", (0.0, 3.0))

    def test_window_outside_support_rejected(self):
        series = TimeSeries(times=[0.0, 1.0, 2.0], values=[1.0, 2.0, 1.0])
        with pytest.raises(InvalidParameterError):
            locate_extremum(series, "max", (0.0, 3.0))

    def test_undefined_neighbour_returns_grid_point(self):
        series = TimeSeries(
            times=[0.0, 1.0, 2.0, 3.0, 4.0],
            values=[0.1, math.nan, 2.0, 1.0, 0.5],
        )
        assert locate_extremum(series, "max", (0.0, 4.0)) == 2.0

    def test_undefined_points_never_win(self):
        series = TimeSeries(
            times=[0.0, 1.0, 2.0, 3.0],
            values=[0.5, math.nan, 0.4, 0.3],
        )
        t_star = locate_extremum(series, "min", (0.0, 3.0))
        assert t_star == pytest.approx(3.0, abs=1e-12)


class TestG2Delayed:
    def decay_setup(self, gamma=0.01, n_b=6):
        params = PhysicalParams.resonance_preset(g=G2, gamma_m=gamma)
        hc = HilbertConfig(n_a=2, n_b=n_b)
        cfg = IntegratorConfig(sample_times=np.array([0.0, 100.0]))
        return params, hc, cfg

    def test_decaying_fock_pair_is_flat_one_half(self):
        # Binomial loss from |m=2> keeps g1(t*, t*+tau) = 1/2 for every tau.
        params, hc, cfg = self.decay_setup()
        rho0 = QuantumState.pure(composite_fock(0, 2, hc))
        series = g2_delayed(
            params, None, hc, cfg, t_star=30.0, order=1,
            tau_grid=[0.0, 20.0, 50.0], rho0=rho0,
        )
        assert np.allclose(series.values, 0.5, atol=1e-6)

    def test_tau_zero_matches_equal_time(self):
        params = PhysicalParams.resonance_preset(g=G2, kappa=2e-3, gamma_m=1e-3)
        train = PulseTrain(omega_0=0.03, sigma=50.0, t1=300.0, t2=200.0, period=2000.0)
        hc = HilbertConfig(n_a=3, n_b=10)
        cfg = IntegratorConfig(sample_times=np.array([0.0, 430.0]))
        rho0 = QuantumState.pure(composite_fock(0, 2, hc))
        t_star = 350.0
        check = evolve_master(
            rho0, params, train, hc,
            IntegratorConfig(sample_times=np.array([0.0, t_star])),
        )
        for order in (1, 2):
            series = g2_delayed(
                params, train, hc, cfg, t_star=t_star, order=order,
                tau_grid=[0.0, 40.0, 80.0], rho0=rho0,
            )
            expected = g2_value(check.states[-1], order, hc)
            assert series.values[0] == pytest.approx(expected, abs=1e-8)

    def test_vanishing_reference_moment_raises(self):
        params, hc, cfg = self.decay_setup()
        with pytest.raises(UndefinedCorrelationError):
            g2_delayed(params, None, hc, cfg, t_star=1.0, order=1, tau_grid=[0.0, 1.0])

    def test_decayed_tail_marks_undefined(self):
        params, hc, cfg = self.decay_setup(gamma=0.5)
        rho0 = QuantumState.pure(composite_fock(0, 1, hc))
        series = g2_delayed(
            params, None, hc, cfg, t_star=2.0, order=1,
            tau_grid=[0.0, 5.0, 60.0], rho0=rho0,
        )
        assert series.values[0] == 0.0
        assert math.isnan(series.values[-1])

    def test_tau_grid_must_start_at_zero(self):
        params, hc, cfg = self.decay_setup()
        with pytest.raises(InvalidParameterError):
            g2_delayed(params, None, hc, cfg, t_star=1.0, order=1, tau_grid=[1.0, 2.0])

    def test_t_star_before_start_rejected(self):
        params, hc, cfg = self.decay_setup()
        with pytest.raises(InvalidParameterError):
            g2_delayed(params, None, hc, cfg, t_star=0.0, order=1, tau_grid=[0.0, 1.0])


class TestCorrelationVerdict:
    def test_dominant_peak_reads_bunched(self):
        series = TimeSeries(times=[0.0, 1.0, 2.0], values=[1.5, 1.2, 0.9])
        assert correlation_verdict(series) == "bunched-pairs"

    def test_dominated_dip_reads_antibunched(self):
        series = TimeSeries(times=[0.0, 1.0, 2.0], values=[0.3, 0.5, 0.8])
        assert correlation_verdict(series) == "antibunched-pairs"

    def test_later_excess_is_inconclusive(self):
        series = TimeSeries(times=[0.0, 1.0, 2.0], values=[1.5, 1.6, 0.9])
        assert correlation_verdict(series) == "inconclusive"

    def test_undefined_origin_is_inconclusive(self):
        series = TimeSeries(times=[0.0, 1.0], values=[math.nan, 0.5])
        assert correlation_verdict(series) == "inconclusive"

    def test_undefined_tail_points_are_skipped(self):
        series = TimeSeries(times=[0.0, 1.0, 2.0, 3.0], values=[0.3, 0.5, math.nan, 0.8])
        assert correlation_verdict(series) == "antibunched-pairs"


class TestCorrelationResult:
    def make(self, **overrides):
        fields = dict(
            order=1,
            equal_time=TimeSeries(times=[0.0, 1.0], values=[0.5, 0.6]),
            t_star=1.0,
            delayed=TimeSeries(times=[0.0, 1.0], values=[0.6, 0.5]),
            verdict="inconclusive",
        )
        fields.update(overrides)
        return CorrelationResult(**fields)

    def test_unknown_verdict_rejected(self):
        with pytest.raises(InvalidParameterError):
            self.make(verdict="maybe")

    def test_delayed_must_start_at_zero(self):
        with pytest.raises(InvalidParameterError):
            self.make(delayed=TimeSeries(times=[1.0, 2.0], values=[0.6, 0.5]))

    def test_order_must_be_one_or_two(self):
        with pytest.raises(InvalidParameterError):
            self.make(order=3)


class TestAnalyzeCorrelation:
    def test_pure_decay_pipeline_end_to_end(self):
        params = PhysicalParams.resonance_preset(g=G2, gamma_m=0.01)
        hc = HilbertConfig(n_a=2, n_b=6)
        cfg = IntegratorConfig(sample_times=np.linspace(0.0, 100.0, 26))
        rho0 = QuantumState.pure(composite_fock(0, 2, hc))
        result = analyze_correlation(
            params, None, hc, cfg, order=1, window=(10.0, 90.0),
            tau_grid=[0.0, 10.0, 20.0], rho0=rho0,
        )
        assert 10.0 <= result.t_star <= 90.0
        in_window = (result.equal_time.times >= 10.0) & (result.equal_time.times <= 90.0)
        assert np.allclose(result.equal_time.values[in_window], 0.5, atol=1e-5)
        assert np.allclose(result.delayed.values, 0.5, atol=1e-5)
        assert result.verdict == "inconclusive"


class TestPairEmissionStatistics:
    GAMMA = 4e-4

    def test_close_jumps_form_one_pair(self):
        window = 5.0 / self.GAMMA
        delay = 0.1 / self.GAMMA
        rec = record_with_jumps([(1000.0, "mech_down"), (1000.0 + delay, "mech_down")])
        stats = pair_emission_statistics([rec], window)
        assert stats.n_pairs == 1
        assert stats.n_unpaired == 0
        assert stats.intra_pair_delays[0] == pytest.approx(delay, abs=1e-9)
        assert stats.inter_pair_intervals.size == 0

    def test_isolated_jump_stays_unpaired(self):
        rec = record_with_jumps([(1000.0, "mech_down")])
        stats = pair_emission_statistics([rec], 10.0)
        assert stats.n_pairs == 0
        assert stats.n_unpaired == 1

    def test_greedy_pairing_leaves_third_jump_out(self):
        rec = record_with_jumps(
            [(0.0, "mech_down"), (1.0, "mech_down"), (2.0, "mech_down")]
        )
        stats = pair_emission_statistics([rec], 5.0)
        assert stats.n_pairs == 1
        assert stats.n_unpaired == 1
        assert stats.intra_pair_delays[0] == 1.0

    def test_inter_pair_interval_between_onsets(self):
        rec = record_with_jumps(
            [
                (100.0, "mech_down"),
                (150.0, "mech_down"),
                (10100.0, "mech_down"),
                (10180.0, "mech_down"),
            ]
        )
        stats = pair_emission_statistics([rec], 500.0)
        assert stats.n_pairs == 2
        assert stats.inter_pair_intervals.tolist() == [10000.0]

    def test_other_channels_are_ignored(self):
        rec = record_with_jumps(
            [(100.0, "cavity_decay"), (200.0, "mech_down"), (201.0, "mech_down")]
        )
        stats = pair_emission_statistics([rec], 10.0)
        assert stats.n_pairs == 1
        assert stats.n_unpaired == 0

    def test_unsorted_jump_log_is_sorted_first(self):
        rec = record_with_jumps([(201.0, "mech_down"), (200.0, "mech_down")])
        stats = pair_emission_statistics([rec], 10.0)
        assert stats.n_pairs == 1
        assert stats.intra_pair_delays[0] == 1.0

    def test_empty_input_gives_empty_summary(self):
        stats = pair_emission_statistics([], 10.0)
        assert stats.n_trajectories == 0
        assert stats.n_pairs == 0
        assert stats.mean_pairs_per_trajectory == 0.0
        assert stats.intra_pair_delays.size == 0

    def test_nonpositive_window_rejected(self):
        with pytest.raises(InvalidParameterError):
            pair_emission_statistics([], 0.0)

    @given(st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=20, deadline=None)
    def test_reordering_trajectories_changes_nothing(self, seed):
        rng = np.random.default_rng(seed)
        records = []
        for k in range(6):
            times = np.sort(rng.uniform(0.0, 1e4, size=rng.integers(0, 6)))
            records.append(
                record_with_jumps([(float(t), "mech_down") for t in times], seed=k)
            )
        shuffled = [records[i] for i in rng.permutation(len(records))]
        a = pair_emission_statistics(records, 300.0)
        b = pair_emission_statistics(shuffled, 300.0)
        assert a.n_pairs == b.n_pairs
        assert a.n_unpaired == b.n_unpaired
        assert np.array_equal(a.intra_pair_delays, b.intra_pair_delays)
        assert np.array_equal(a.inter_pair_intervals, b.inter_pair_intervals)
