import json
import math

import numpy as np
import pytest

from msle import verify as V
from msle.errors import ConfigError
from msle.kernels import MassProfile, assemble, massive_green
from msle.loewner import SlitMapChain, eval_h_dg_array
from msle.partition import z4
from msle.sde import SimulationSpec, ensemble, simulate


def small_mass(nx=6, ny=6):
    return MassProfile.square_grid(
        (-1.0, 1.5, 1.0, 2.5), nx, ny,
        lambda z: 1.0 + 0.5 * np.sin(z.real + z.imag))


def small_setup(n_states=3, shape=(8, 8)):
    return V.default_generator_setup(n_states=n_states, grid_shape=shape,
                                     T=0.3, dt=5e-3)


class TestReports:
    def test_pass_rule_boundary(self):
        r = V._report("x", "d", statistic=1.0, tolerance=1.0)
        assert r.passed
        r = V._report("x", "d", statistic=-1.0000001, tolerance=1.0)
        assert not r.passed

    def test_digest_order_insensitive(self):
        a = V._digest({"a": 1, "b": (2.0, 3.0)})
        b = V._digest({"b": (2.0, 3.0), "a": 1})
        assert a == b and len(a) == 16

    def test_digest_distinguishes(self):
        assert V._digest({"a": 1}) != V._digest({"a": 2})

    def test_jsonl_roundtrip(self):
        reps = [V._report("a", "d1", 0.5, 1.0, detail={"k": [1, 2]}),
                V._report("b", "d2", 2.0, 1.0, stderr=0.1)]
        lines = V.reports_to_jsonl(reps).strip().split("\n")
        assert len(lines) == 2
        d0 = json.loads(lines[0])
        assert d0["pass"] is True and d0["detail"] == {"k": [1, 2]}
        d1 = json.loads(lines[1])
        assert d1["pass"] is False and d1["stderr"] == 0.1

    def test_csv_shape(self):
        reps = [V._report("a", "d", 0.5, 1.0)]
        rows = V.reports_to_csv(reps).strip().split("\n")
        assert rows[0] == "name,inputs,statistic,tolerance,stderr,pass,runtime"
        assert rows[1].startswith("a,d,0.5,1,,1,")

    def test_write_reports(self, tmp_path):
        reps = [V._report("a", "d", 0.0, 1.0)]
        jp, cp = tmp_path / "r.jsonl", tmp_path / "r.csv"
        V.write_reports(reps, jsonl_path=jp, csv_path=cp)
        assert json.loads(jp.read_text().strip())["name"] == "a"
        assert cp.read_text().startswith("name,")


class TestAssembler:
    def test_hull_memoized(self):
        setup = small_setup()
        asm = V.CachedAssembler(setup.grid)
        ch = setup.states[1]
        assert asm(ch) is asm(ch)

    def test_xi_shift_shares_hull(self):
        setup = small_setup()
        asm = V.CachedAssembler(setup.grid)
        ch = setup.states[1]
        base = asm(ch)
        shifted = asm(ch.with_xi(ch.xi_current + 0.1))
        assert shifted is not base
        assert shifted.gm is base.gm
        assert np.allclose(shifted.h + 0.1, base.h, rtol=0.0, atol=1e-12)

    def test_logz_memo_and_xi_invariance(self):
        setup = small_setup()
        asm = V.CachedAssembler(setup.grid)
        ch = setup.states[1]
        v = asm.logz(ch)
        assert asm.logz(ch.with_xi(ch.xi_current - 0.3)) == v

    def test_z4_recombination_exact(self):
        setup = small_setup()
        asm = V.CachedAssembler(setup.grid)
        ch = setup.states[2]
        rep = z4(asm(ch), 8)
        assert V._z4_log(asm, ch, 8) == pytest.approx(rep.z4_log, abs=1e-14)


class TestGeneratorSuite:
    def test_manifest_matches_registry(self):
        man = V.identity_manifest()
        assert set(man) == set(V.GENERATOR_IDENTITIES)
        assert len(man) == 18
        assert all(isinstance(v, str) and v for v in man.values())

    def test_unknown_identity_rejected(self):
        with pytest.raises(ConfigError):
            V.generator_suite(small_setup(), identities=("no_such",))

    def test_subset_coverage_fails(self):
        reps = V.generator_suite(small_setup(), identities=("phi_harmonic",))
        cov = [r for r in reps if r.name == "generator:coverage"][0]
        assert not cov.passed and cov.statistic == 17.0
        assert "theta_kappa2" in cov.detail["missing"]

    def test_all_identities_pass_small(self):
        reps = V.generator_suite(small_setup())
        assert [r.name for r in reps] == (
            [f"generator:{n}" for n in V.GENERATOR_IDENTITIES]
            + ["generator:coverage"])
        bad = [(r.name, r.statistic) for r in reps if not r.passed]
        assert bad == []

    def test_margins_meaningfully_small(self):
        reps = V.generator_suite(small_setup(),
                                 identities=("phi_harmonic", "gamma_m_exp_j"))
        for r in reps[:-1]:
            assert r.statistic < 0.5


class TestDetratioFlow:
    def test_constant_quarters(self):
        reps = V.detratio_flow(kind="constant", dt=2e-3, t_eval=(0.04, 0.08))
        res, ref = reps
        assert res.passed and res.statistic < 1e-2
        assert ref.passed and ref.statistic <= 0.6

    def test_sinusoidal_quarters(self):
        reps = V.detratio_flow(kind="sinusoidal", dt=2e-3, t_eval=(0.04, 0.1))
        res, ref = reps
        assert res.passed
        assert ref.statistic <= 0.6

    def test_bad_kind(self):
        with pytest.raises(ConfigError):
            V.detratio_flow(kind="triangle")


class TestReplay:
    def test_replay_matches_chain_evaluation(self):
        grid = small_mass()
        spec = SimulationSpec(kappa=4.0, T=0.2, dt=5e-3, seed=11,
                              mode="critical-chordal")
        paths = ensemble(spec, 4).paths
        snaps = V._replay_snapshots(paths, spec.dt, centers=grid.centers,
                                    probes=(2.0j,), nodes=(20, 40))
        for node in (20, 40):
            snap = snaps[node]
            for i, p in enumerate(paths):
                ch = p.chain(upto=node)
                h, dg, sw = eval_h_dg_array(ch, grid.centers)
                assert not sw.any()
                assert np.allclose(h + ch.xi_current, snap.cells[i],
                                   rtol=0.0, atol=1e-12)
                assert np.allclose(dg, snap.cell_dg[i], rtol=1e-12, atol=0.0)
                assert snap.xi[i] == p.xi[node]

    def test_truncated_path_freezes(self):
        grid = small_mass()
        spec = SimulationSpec(kappa=2.0, T=0.3, dt=5e-3, seed=5,
                              mode="massive-dipolar-sle2", mass=grid,
                              a=0.6, b=1.4, drift_refresh=2)
        paths = ensemble(spec, 12).paths
        short = [i for i, p in enumerate(paths) if p.n_steps < spec.n_steps]
        assert short, "seed must produce at least one stopped path"
        reals = (spec.a, spec.b)
        snaps = V._replay_snapshots(paths, spec.dt, probes=(2.0j,),
                                    reals=reals, stop=(0, 1, spec.stop_gap),
                                    nodes=(spec.n_steps // 2, spec.n_steps))
        early, late = (snaps[spec.n_steps // 2], snaps[spec.n_steps])
        for i in short:
            if paths[i].n_steps <= spec.n_steps // 2:
                assert late.xi[i] == early.xi[i]
                assert late.reals[i, 0] == early.reals[i, 0]

    def test_stop_keeps_marks_separated(self):
        grid = small_mass()
        spec = SimulationSpec(kappa=2.0, T=0.3, dt=5e-3, seed=5,
                              mode="massive-dipolar-sle2", mass=grid,
                              a=0.6, b=1.4, drift_refresh=2)
        paths = ensemble(spec, 12).paths
        snaps = V._replay_snapshots(paths, spec.dt, reals=(spec.a, spec.b),
                                    stop=(0, 1, spec.stop_gap),
                                    nodes=(spec.n_steps,))
        snap = snaps[spec.n_steps]
        ga = snap.reals[:, 0] - snap.xi
        gb = snap.reals[:, 1] - snap.xi
        assert np.all(ga * gb > 0.0)


class TestMartingaleMC:
    def test_phi_reproducible(self):
        spec = SimulationSpec(kappa=4.0, T=0.2, dt=5e-3, seed=77,
                              mode="critical-chordal")
        a = V.martingale_mc("phi", spec, 40, (0.1, 0.2))
        b = V.martingale_mc("phi", spec, 40, (0.1, 0.2))
        assert [r.statistic for r in a] == [r.statistic for r in b]
        assert all(r.passed for r in a)
        assert a[0].stderr is not None and a[0].tolerance == 3.0 * a[0].stderr

    def test_z4_mean_near_one(self):
        spec = SimulationSpec(kappa=4.0, T=0.2, dt=5e-3, seed=78,
                              mode="critical-chordal")
        reps = V.martingale_mc("z4", spec, 30, (0.1, 0.2),
                               params={"mass": small_mass()})
        for r in reps:
            assert r.passed
            assert r.detail["reference"] == 1.0
            assert abs(r.detail["mean"] - 1.0) < 0.2

    def test_z2tilde_with_stopping(self):
        spec = SimulationSpec(kappa=2.0, T=0.3, dt=5e-3, seed=911,
                              mode="critical-chordal")
        reps = V.martingale_mc("z2tilde", spec, 40, (0.1, 0.3),
                               params={"mass": small_mass(),
                                       "marks": (0.7, 1.6),
                                       "stop_gap": 0.45})
        assert all(r.passed for r in reps)
        assert all(r.detail["n_effective"] + r.detail["n_excluded"] == 40
                   for r in reps)

    def test_gamma_ratio_constant(self):
        grid = small_mass()
        spec = SimulationSpec(kappa=2.0, T=0.2, dt=5e-3, seed=904,
                              mode="massive-dipolar-sle2", mass=grid,
                              a=2.0, b=4.0, drift_refresh=4)
        reps = V.martingale_mc("gamma_ratio", spec, 30, (0.1, 0.2))
        assert all(r.passed for r in reps)

    def test_green_m_pair_form(self):
        grid = small_mass()
        spec = SimulationSpec(kappa=4.0, T=0.2, dt=5e-3, seed=903,
                              mode="massive-sle4", mass=grid, drift_refresh=4)
        reps = V.martingale_mc("green_m", spec, 30, (0.1, 0.2))
        assert all(r.passed for r in reps)
        cache = assemble(SlitMapChain((), ()), grid)
        massive_green(cache)
        i = V._nearest_cell(grid, 2.0j)
        j = V._nearest_cell(grid, -0.8 + 1.7j)
        expect = float(cache.phi_m[i] * cache.phi_m[j] + cache.gm[i, j])
        assert reps[0].detail["reference"] == pytest.approx(expect, rel=1e-12)

    def test_validation_errors(self):
        spec4 = SimulationSpec(kappa=4.0, T=0.2, dt=5e-3, seed=1,
                               mode="critical-chordal")
        spec2 = SimulationSpec(kappa=2.0, T=0.2, dt=5e-3, seed=1,
                               mode="critical-chordal")
        with pytest.raises(ConfigError):
            V.martingale_mc("nope", spec4, 10)
        with pytest.raises(ConfigError):
            V.martingale_mc("phi", spec2, 10, (0.1,))
        with pytest.raises(ConfigError):
            V.martingale_mc("phi_m", spec4, 10, (0.1,))
        with pytest.raises(ConfigError):
            V.martingale_mc("z4", spec4, 10, (0.1,))
        with pytest.raises(ConfigError):
            V.martingale_mc("phi", spec4, 10, (0.1234,))
        with pytest.raises(ConfigError):
            V.martingale_mc("phi", spec4, 10, (0.1,), params={"bogus": 1})


class TestLatticeVsContinuum:
    def test_massless_small(self):
        reps = V.lattice_vs_continuum(spacings=(0.5, 0.25), radius=16.0,
                                      tol_finest=0.05)
        finest, mono = reps
        assert finest.name == "lattice:massless:finest"
        assert finest.detail["target"] == 0.75
        assert len(finest.detail["relative_errors"]) == 2
        assert finest.passed and mono.passed

    def test_massive_small(self):
        bump = lambda z: math.exp(-(abs(z - (2 + 1j)) ** 2))
        reps = V.lattice_vs_continuum(
            spacings=(0.5, 0.25), radius=16.0, m2=bump,
            grid_box=(0.5, 0.05, 3.5, 2.55), grid_shape=(12, 10),
            tol_finest=0.1)
        finest, mono = reps
        assert finest.name == "lattice:massive:finest"
        assert 0.0 < finest.detail["target"] < 1.5
        assert finest.passed


class TestSplitting:
    def test_classify_sides_vertical(self):
        poly = np.array([0.0 + 0.0j, 0.0 + 1.0j, 0.0 + 2.0j])
        probes = [-1.0 + 1.0j, 1.0 + 1.0j, 0.02 + 1.0j, -2.0 + 5.0j, 2.0 + 5.0j]
        labels, amb = V.classify_sides(poly, probes, margin=0.1)
        assert labels[0] != labels[1]
        assert amb[2] and not amb[0] and not amb[1]
        # the vertical closure keeps sides consistent above the tip
        assert labels[3] == labels[0] and labels[4] == labels[1]

    def test_trace_polyline_starts_at_origin(self):
        spec = SimulationSpec(kappa=4.0, T=0.05, dt=5e-3, seed=3,
                              mode="critical-chordal")
        path = simulate(spec)
        poly = V.trace_polyline(path)
        assert poly[0] == 0.0 + 0.0j
        assert len(poly) == path.n_steps + 1
        assert np.all(poly[1:].imag > 0.0)

    def test_t0_skipped(self):
        path, grid = _tiny_splitting_run()
        reps = V.green_splitting(path, grid, times=(0.0, 0.05))
        assert len(reps) == 1
        assert reps[0].passed and "skipped" in reps[0].detail["status"]

    def test_truncated_run_reported(self):
        path, grid = _tiny_splitting_run()
        reps = V.green_splitting(path, grid, times=(0.05, 9.0))
        assert len(reps) == 1
        assert not reps[0].passed
        assert math.isnan(reps[0].statistic)

    def test_small_run_structure(self):
        path, grid = _tiny_splitting_run()
        probes = [complex(x, y) for y in (0.6, 1.2) for x in (-1.5, -0.5, 0.5, 1.5)]
        reps = V.green_splitting(path, grid, times=(0.05, 0.1), probes=probes)
        cross, same = reps
        per = cross.detail["per_time"]
        assert set(per) == {"0.05", "0.1"}
        for st in per.values():
            assert st["n_usable"] + st["n_ambiguous"] <= len(probes)
            assert st["cross_max"] >= 0.0
        assert math.isfinite(cross.statistic)
        assert same.detail["same_min_later"] > 0.0


def _tiny_splitting_run():
    grid = MassProfile.square_grid((-1.5, 1.6, 1.5, 2.6), 8, 8, 1.0)
    spec = SimulationSpec(kappa=4.0, T=0.1, dt=5e-3, seed=21,
                          mode="massive-sle4", mass=grid, drift_refresh=5)
    return simulate(spec), grid
