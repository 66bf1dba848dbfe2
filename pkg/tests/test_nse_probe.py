import math

import numpy as np
import pytest

from nsinflate.data import build_data, linf_norm
from nsinflate.nse import (AliasingError, Grid, PressureError, SimState, StabilityError, TorusSpec, load_checkpoint,
                           oracle_agreement, periodize, pressure_identities, pressure_solve, run_probe,
                           save_checkpoint, step, zero_data_probe)
from nsinflate.params import preset

SPEC = TorusSpec(1.0, 32)


@pytest.fixture(scope="module")
def grid():
    return Grid(SPEC)


def _random_fields(grid, seed=0, a_amp=0.3, kcut=4):
    rng = np.random.default_rng(seed)
    shape = grid.k2.shape
    noise = lambda n: rng.standard_normal((n,) + shape) + 1j * rng.standard_normal((n,) + shape)
    low = (grid.kmod <= kcut) & (grid.kmod > 0)
    u = grid.leray(grid.realify(noise(3) * low))
    u /= np.abs(grid.phys(u)).max()
    a = grid.realify(noise(1) * low)[0]
    a *= a_amp / np.abs(grid.phys(a)).max()
    return a, u


# -- periodization -----------------------------------------------------------------

def _resolved(M):
    ps = preset("THM1", 12, N=3, k0=3)
    return build_data(ps, "THM1", check=False), TorusSpec(2.0, M)


def test_periodized_velocity_is_divergence_free():
    data, spec = _resolved(64)
    per = periodize(data, spec)
    assert per.raw_divergence <= 1e-12
    assert Grid(spec).divergence_ratio(per.u) <= 1e-12


def test_a0_sup_matches_certificate_on_resolved_torus():
    data, spec = _resolved(64)
    per = periodize(data, spec)
    want = 2.0 ** linf_norm(data.a0)[0]
    assert per.sup_a0 == pytest.approx(want, rel=0.02)
    assert per.whole_space_sup_a0 == pytest.approx(want, rel=1e-12)


def test_grid_doubling_changes_norms_little():
    # |u|^6 carries six times the field bandwidth, so the sample sum needs M=128 to settle
    vals = []
    for M in (128, 256):
        data, spec = _resolved(M)
        per = periodize(data, spec)
        g = Grid(spec)
        u = g.phys(per.u)
        vals.append((per.sup_a0, float((np.sum(np.abs(u) ** 6) * g.dv) ** (1 / 6))))
    for x, y in zip(*vals):
        assert abs(y / x - 1) < 0.01


def test_aliasing_rejected():
    data = build_data(preset("THM1", 12, N=6, k0=6), "THM1", check=False)
    with pytest.raises(AliasingError):
        periodize(data, TorusSpec(1.0, 32))
    with pytest.raises(AliasingError):
        TorusSpec.for_data(data, 4)


def test_torus_spec_validation():
    with pytest.raises(ValueError):
        TorusSpec(1.0, 48)
    with pytest.raises(ValueError):
        TorusSpec(-1.0, 32)


# -- pressure ------------------------------------------------------------------------

def test_classical_pressure_with_zero_density(grid):
    _, u = _random_fields(grid)
    st = SimState(np.zeros_like(u[0]), u, 0.0, SPEC, 1.0, "P")
    res = pressure_solve(st)
    assert res.iterations == 1
    assert np.abs(res.grad - grid.Q(st.terms().ugu)).max() <= 1e-14 * np.abs(res.grad).max()


@pytest.mark.parametrize("mu", [1.0, 0.7])
def test_pressure_mode_identities(grid, mu):
    a, u = _random_fields(grid, seed=1)
    chk = pressure_identities(SimState(a, u, 0.0, SPEC, mu).terms())
    assert chk.pi_vs_p <= 1e-8 and chk.pi1_vs_p <= 1e-8
    assert all(n > 1 for n in chk.iterations.values())


def test_pressure_non_contraction(grid):
    a, u = _random_fields(grid, seed=2, a_amp=0.95)
    with pytest.raises(PressureError) as exc:
        pressure_solve(SimState(a, u, 0.0, SPEC))
    assert exc.value.radius >= 0.9


# -- time stepping -------------------------------------------------------------------

def test_zero_velocity_is_equilibrium(grid):
    a, _ = _random_fields(grid, seed=3)
    st = SimState(a, np.zeros((3,) + a.shape, complex), 0.0, SPEC)
    nxt = step(st, 1e-3)
    assert np.array_equal(nxt.a, a * grid.mask)
    assert not np.any(nxt.u)


def test_classical_oracle_agreement(grid):
    _, u = _random_fields(grid, seed=4)
    assert oracle_agreement(u, SPEC, 1e-3, 3) <= 1e-8


def test_second_order_in_time(grid):
    a, u = _random_fields(grid, seed=5)
    T = 0.02

    def run(n):
        st = SimState(a, u, 0.0, SPEC, 1.0, "PI")
        for _ in range(n):
            st = step(st, T / n)
        return st.u

    ref = run(64)
    e1 = np.abs(run(8) - ref).max()
    e2 = np.abs(run(16) - ref).max()
    assert 3.5 <= e1 / e2 <= 4.6


@pytest.mark.parametrize("mode", ["P", "PI", "PI1"])
def test_step_preserves_divergence_and_mean(grid, mode):
    a, u = _random_fields(grid, seed=6)
    a = a.copy()
    a[0, 0, 0] = 0.1 * SPEC.M ** 3  # nonzero mean density perturbation
    st = SimState(a, u, 0.0, SPEC, 1.0, mode)
    for _ in range(3):
        st = step(st, 2e-3)
        assert grid.divergence_ratio(st.u) <= 1e-8
    assert abs(st.a[0, 0, 0] / a[0, 0, 0] - 1) <= 1e-10


def test_modes_agree_after_steps(grid):
    a, u = _random_fields(grid, seed=7)
    out = {}
    for mode in ("P", "PI", "PI1"):
        st = SimState(a, u, 0.0, SPEC, 1.0, mode)
        for _ in range(2):
            st = step(st, 1e-3)
        out[mode] = st.u
    ref = np.abs(out["P"]).max()
    assert np.abs(out["PI"] - out["P"]).max() <= 1e-9 * ref
    assert np.abs(out["PI1"] - out["P"]).max() <= 1e-9 * ref


def test_stability_guard(grid):
    a, u = _random_fields(grid, seed=8)
    with pytest.raises(StabilityError):
        step(SimState(a, u * 1e3, 0.0, SPEC), 0.5)


def test_checkpoint_roundtrip(tmp_path, grid):
    a, u = _random_fields(grid, seed=9)
    st = SimState(a, u, 0.125, SPEC, 0.7, "PI1")
    path = tmp_path / "state.npz"
    save_checkpoint(st, path, {"note": "x"})
    back = load_checkpoint(path)
    assert np.array_equal(back.a, st.a) and np.array_equal(back.u, st.u)
    assert (back.t, back.mu, back.mode, back.spec) == (st.t, st.mu, st.mode, st.spec)


# -- probe runs -----------------------------------------------------------------------

def test_zero_data_probe():
    ps = preset("THM1", 12, N=6, k0=5)
    data = build_data(ps, "THM1", check=False)
    rep = zero_data_probe(ps, TorusSpec.for_data(data, 32), steps=2)
    assert rep.Y == 0 and rep.X == 0 and rep.U1_probe == 0 and rep.u_probe == 0


def test_probe_rejects_out_of_range_config():
    with pytest.raises(ValueError):
        run_probe(preset("THM1", 12, N=12, k0=5), M=32, steps=2)


def test_short_probe_run():
    ps = preset("THM1", 12, N=6, k0=5)
    rep = run_probe(ps, M=32, steps=8)
    assert rep.max_divergence <= 1e-8
    assert rep.max_identity_error <= 1e-8
    assert rep.U1_probe > 0 and math.isfinite(rep.Y) and math.isfinite(rep.X)
    assert len(rep.history) == 9
    assert rep.T0 == pytest.approx(ps.T0)
    assert abs(rep.mean_a_drift) <= 1e-10
