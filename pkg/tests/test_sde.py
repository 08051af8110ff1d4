"""Driving-process simulation and Ito-drift finite differences."""

import io

import numpy as np
import pytest

from msle.errors import ConfigError
from msle.kernels import MassProfile, assemble, massive_green
from msle.loewner import (
    FLAG_HULL,
    FLAG_MARK,
    FLAG_OK,
    MarkedBoundary,
    SlitMapChain,
    drift0_dipolar,
    green0,
    observables0,
)
from msle.partition import drift2, drift4
from msle.sde import (
    SimulationSpec,
    ensemble,
    ito_drift_fd,
    read_path_csv,
    simulate,
    write_path_csv,
)

SAFE_BOX = (-1.0, 1.5, 1.0, 2.5)  # clear of hulls grown to T <= 0.5


def varying_grid(nx=6, ny=6):
    return MassProfile.square_grid(
        SAFE_BOX, nx, ny, lambda z: 1.0 + 0.5 * np.sin(z.real + z.imag))


def chordal_spec(**kw):
    base = dict(kappa=4.0, T=0.5, dt=2.5e-3, seed=12345, mode="critical-chordal")
    base.update(kw)
    return SimulationSpec(**base)


def driven_chain(n_steps=40, dt=0.01, amp=0.7):
    xs = amp * np.sin(3.0 * dt * np.arange(1, n_steps + 1))
    return SlitMapChain(xs, np.full(n_steps, dt), float(xs[-1]))


class TestSpecValidation:
    def test_unknown_mode(self):
        with pytest.raises(ValueError, match="mode"):
            chordal_spec(mode="percolation")

    def test_time_grid(self):
        with pytest.raises(ValueError):
            chordal_spec(dt=0.0)
        with pytest.raises(ValueError):
            chordal_spec(T=1e-3, dt=2e-3)

    def test_drift_refresh_positive(self):
        with pytest.raises(ValueError):
            chordal_spec(drift_refresh=0)

    def test_mass_iff_massive(self):
        with pytest.raises(ValueError, match="mass"):
            chordal_spec(mode="massive-sle4")
        with pytest.raises(ValueError, match="mass"):
            chordal_spec(mass=varying_grid())

    def test_marks_required_and_ordered(self):
        with pytest.raises(ValueError, match="marks"):
            chordal_spec(mode="critical-dipolar")
        with pytest.raises(ValueError, match="marks"):
            chordal_spec(mode="critical-dipolar", a=4.0, b=2.0)
        with pytest.raises(ValueError, match="marks"):
            chordal_spec(mode="critical-dipolar", a=-1.0, b=2.0)

    def test_kappa_pinned_in_massive_modes(self):
        with pytest.raises(ValueError, match="kappa = 4"):
            chordal_spec(mode="massive-sle4", kappa=2.0, mass=varying_grid())
        with pytest.raises(ValueError, match="kappa = 2"):
            chordal_spec(mode="massive-dipolar-sle2", kappa=4.0,
                         mass=varying_grid(), a=2.0, b=4.0)

    def test_seed_is_64_bit(self):
        with pytest.raises(ValueError, match="64"):
            chordal_spec(seed=2**64)
        chordal_spec(seed=2**64 - 1)

    def test_stop_gap_default_scales_with_dt(self):
        s1 = chordal_spec(mode="critical-dipolar", kappa=2.0, a=2.0, b=4.0)
        s2 = chordal_spec(mode="critical-dipolar", kappa=2.0, a=2.0, b=4.0,
                          dt=s1.dt / 4)
        assert s1.stop_gap > 0
        assert s2.stop_gap == pytest.approx(s1.stop_gap / 2, rel=1e-12)
        s3 = chordal_spec(mode="critical-dipolar", kappa=2.0, a=2.0, b=4.0,
                          mark_stop_gap=0.05)
        assert s3.stop_gap == 0.05


class TestSimulate:
    def test_deterministic_in_seed(self):
        p1 = simulate(chordal_spec())
        p2 = simulate(chordal_spec())
        assert np.array_equal(p1.xi, p2.xi)
        assert np.array_equal(p1.drift_log, p2.drift_log)
        p3 = simulate(chordal_spec(seed=12346))
        assert not np.array_equal(p1.xi, p3.xi)

    def test_time_grid_shape(self):
        p = simulate(chordal_spec(T=0.1, dt=1e-3))
        assert p.n_steps == 100
        assert p.times[0] == 0.0 and p.xi[0] == 0.0
        assert p.times[-1] == pytest.approx(0.1, abs=1e-12)
        assert np.all(np.diff(p.times) > 0)

    def test_critical_drift_is_zero(self):
        p = simulate(chordal_spec())
        assert np.all(p.drift_log == 0.0)
        assert not p.truncated

    def test_zero_mass_equals_critical_same_seed(self):
        grid0 = MassProfile.square_grid(SAFE_BOX, 6, 6, 0.0)
        p_crit = simulate(chordal_spec())
        p_mass = simulate(chordal_spec(mode="massive-sle4", mass=grid0))
        assert np.all(p_mass.drift_log == 0.0)
        assert np.array_equal(p_mass.xi, p_crit.xi)
        assert np.array_equal(p_mass.times, p_crit.times)

    def test_massive_sle4_drift_nonpositive(self):
        p = simulate(chordal_spec(T=0.2, dt=2e-3, seed=99,
                                  mode="massive-sle4", mass=varying_grid()))
        assert np.all(p.drift_log <= 0.0)
        assert p.drift_log.min() < -0.1

    def test_drift_refresh_hold_pattern(self):
        p = simulate(chordal_spec(T=0.1, dt=2e-3, seed=7, mode="massive-sle4",
                                  mass=varying_grid(), drift_refresh=5))
        d = p.drift_log
        for k in range(p.n_steps):
            assert d[k] == d[5 * (k // 5)]
        assert len(np.unique(d)) > 2

    def test_dipolar_drift_matches_replay(self):
        spec = chordal_spec(kappa=2.0, T=0.2, dt=2e-3, seed=3,
                            mode="critical-dipolar", a=2.0, b=4.0)
        p = simulate(spec)
        assert p.drift_log[0] == pytest.approx(2.0 * (1 / 2 + 1 / 4), rel=1e-14)
        for k in (25, 80):
            marks = MarkedBoundary.evaluate(p.chain(upto=k), 2.0, 4.0)
            want = drift0_dipolar(p.chain(upto=k), marks, 2.0)
            assert p.drift_log[k] == pytest.approx(want, rel=1e-11)

    def test_massive_drift_matches_replay(self):
        grid = varying_grid()
        spec = chordal_spec(T=0.2, dt=2e-3, seed=41, mode="massive-sle4",
                            mass=grid)
        p = simulate(spec)
        for k in (0, 60):
            cache = assemble(p.chain(upto=k), grid)
            massive_green(cache)
            assert p.drift_log[k] == pytest.approx(drift4(cache), rel=1e-12)

    def test_massive_dipolar_drift_matches_replay(self):
        grid = varying_grid()
        spec = chordal_spec(kappa=2.0, T=0.2, dt=2e-3, seed=5,
                            mode="massive-dipolar-sle2", mass=grid,
                            a=2.0, b=4.0)
        p = simulate(spec)
        k = 50
        cache = assemble(p.chain(upto=k), grid)
        massive_green(cache)
        marks = MarkedBoundary.evaluate(p.chain(upto=k), 2.0, 4.0)
        assert p.drift_log[k] == pytest.approx(drift2(cache, marks), rel=1e-12)

    def test_mark_stop_truncates_with_flag(self):
        hit = 0
        for seed in range(12):
            spec = chordal_spec(kappa=2.0, T=0.3, dt=1e-3, seed=seed,
                                mode="critical-dipolar", a=0.3, b=0.5)
            p = simulate(spec)
            if p.truncated:
                hit += 1
                assert p.flags[-1] == FLAG_MARK
                assert np.all(p.flags[:-1] == FLAG_OK)
                assert p.times[-1] < 0.3
                assert len(p.times) == len(p.xi) == len(p.drift_log)
        assert hit >= 3

    def test_hull_collision_truncates_with_flag(self):
        grid = MassProfile.square_grid((-0.6, 0.15, 0.6, 0.75), 4, 4, 0.5)
        hit = 0
        for seed in range(6):
            p = simulate(chordal_spec(T=0.4, dt=2e-3, seed=seed,
                                      mode="massive-sle4", mass=grid))
            if p.truncated:
                hit += 1
                assert p.flags[-1] == FLAG_HULL
                assert p.times[-1] < 0.4
        assert hit >= 3


class TestEnsemble:
    def test_single_path_equals_simulate(self):
        spec = chordal_spec(T=0.1, dt=1e-3)
        ens = ensemble(spec, 1)
        p = simulate(spec)
        assert ens.n_paths == 1
        assert np.array_equal(ens.paths[0].xi, p.xi)

    def test_seed_splitting_is_xor(self):
        spec = chordal_spec(T=0.05, dt=1e-3, seed=1000)
        ens = ensemble(spec, 4)
        for k in range(4):
            pk = simulate(chordal_spec(T=0.05, dt=1e-3, seed=1000 ^ k))
            assert np.array_equal(ens.paths[k].xi, pk.xi)

    def test_paths_distinct_and_counted(self):
        ens = ensemble(chordal_spec(T=0.05, dt=1e-3), 8)
        assert ens.n_paths == 8
        finals = {p.xi[-1] for p in ens.paths}
        assert len(finals) == 8
        counts = ens.flag_counts()
        assert sum(counts.values()) == 8
        assert counts[FLAG_OK] == 8 - ens.n_truncated

    def test_n_paths_validated(self):
        with pytest.raises(ValueError):
            ensemble(chordal_spec(), 0)


class TestQuadraticVariation:
    def qv_stats(self, ens):
        qv = np.array([np.sum(np.diff(p.xi) ** 2) / p.times[-1]
                       for p in ens.paths])
        return qv.mean(), qv.std(ddof=1) / np.sqrt(len(qv))

    def test_critical_chordal(self):
        ens = ensemble(chordal_spec(kappa=3.3, T=0.5, dt=2.5e-3, seed=2024), 64)
        mean, stderr = self.qv_stats(ens)
        assert abs(mean - 3.3) <= 3.0 * stderr

    def test_massive_sle4(self):
        ens = ensemble(chordal_spec(T=0.25, dt=2.5e-3, seed=31337,
                                    mode="massive-sle4", mass=varying_grid(),
                                    drift_refresh=4), 64)
        mean, stderr = self.qv_stats(ens)
        assert abs(mean - 4.0) <= 3.0 * stderr


class TestItoDriftFd:
    def test_time_functional(self):
        val = ito_drift_fd(lambda c: c.total_time, driven_chain(), kappa=4.0)
        assert val == pytest.approx(1.0, abs=1e-6)

    def test_driving_functional(self):
        val = ito_drift_fd(lambda c: c.xi_current, driven_chain(), kappa=4.0)
        assert val == pytest.approx(0.0, abs=1e-8)

    def test_driving_squared_reads_kappa(self):
        val, err = ito_drift_fd(lambda c: c.xi_current ** 2, driven_chain(),
                                kappa=3.7, return_error=True)
        assert val == pytest.approx(3.7, abs=1e-5)
        assert err < 1e-6

    def test_drift_term_enters_linearly(self):
        val = ito_drift_fd(lambda c: c.xi_current, driven_chain(), kappa=2.0,
                           drift=2.5)
        assert val == pytest.approx(2.5, abs=1e-8)

    def test_phi_harmonic_at_kappa_4(self):
        z = 0.3 + 1.2j
        val, err = ito_drift_fd(lambda c: observables0(c, z).phi,
                                driven_chain(), kappa=4.0, return_error=True)
        assert abs(val) < max(5e-6, 50.0 * err)

    def test_green_hadamard(self):
        z, w = -0.4 + 0.9j, 0.6 + 1.3j
        ch = driven_chain()
        val = ito_drift_fd(lambda c: green0(c, z, w), ch, kappa=4.0)
        want = -2.0 * observables0(ch, z).theta * observables0(ch, w).theta
        assert val == pytest.approx(want, rel=2e-5)

    def test_log_conformal_radius(self):
        z = 0.2 + 1.1j
        ch = driven_chain()
        val = ito_drift_fd(lambda c: np.log(observables0(c, z).rho), ch,
                           kappa=4.0)
        assert val == pytest.approx(-observables0(ch, z).theta ** 2, rel=2e-5)

    def test_extras_forwarded(self):
        def functional(c, scale):
            return scale * c.total_time

        val = ito_drift_fd(functional, driven_chain(), extras={"scale": 3.0},
                           kappa=4.0)
        assert val == pytest.approx(3.0, abs=1e-5)


class TestPathCsv:
    def roundtrip(self, path):
        buf = io.StringIO()
        write_path_csv(path, buf)
        buf.seek(0)
        return read_path_csv(buf)

    def test_roundtrip_bitwise(self):
        spec = chordal_spec(kappa=2.0, T=0.1, dt=1e-3, seed=5,
                            mode="massive-dipolar-sle2", mass=varying_grid(),
                            a=2.0, b=4.0, drift_refresh=4)
        p = simulate(spec)
        r = self.roundtrip(p)
        assert r.kappa == p.kappa
        assert np.array_equal(r.times, p.times)
        assert np.array_equal(r.xi, p.xi)
        assert np.array_equal(r.drift_log, p.drift_log)
        assert np.array_equal(r.flags, p.flags)

    def test_missing_kappa_rejected(self):
        with pytest.raises(ConfigError, match="kappa"):
            read_path_csv(io.StringIO("t,xi,drift,flag\n0,0,0,0\n"))

    def test_bad_header_rejected(self):
        text = "# drivingpath kappa=2\nt,xi,drift\n"
        with pytest.raises(ConfigError, match="header"):
            read_path_csv(io.StringIO(text))

    def test_bad_row_rejected(self):
        text = "# drivingpath kappa=2\nt,xi,drift,flag\n0,0,0\n"
        with pytest.raises(ConfigError, match="columns"):
            read_path_csv(io.StringIO(text))

    def test_empty_rejected(self):
        with pytest.raises(ConfigError):
            read_path_csv(io.StringIO("# drivingpath kappa=2\nt,xi,drift,flag\n"))
