import numpy as np
import pytest

from snselab import spectral
from snselab.errors import ConfigError
from snselab.forcing import NoiseStream, low_mode_basis
from snselab.integrator import (SchemeParams, energy_identity_residual,
                                moment_probe, reference_simulate,
                                semi_implicit_step, simulate, simulate_ensemble,
                                step_residual)
from snselab.spectral import (SpectralField, advect_frozen, harmonic_field,
                              make_grid, random_field, velocity_values,
                              zero_field)

G = make_grid(16)
BASIS = low_mode_basis(G, 4, 0.5)


# -- single analytic steps -----------------------------------------------------

@pytest.mark.parametrize("mode", [(1, 0), (1, 1), (3, 4)])
@pytest.mark.parametrize("delta", [0.1, 0.01])
def test_single_mode_step_analytic(mode, delta):
    p = SchemeParams(1.0, delta, 16)
    f = harmonic_field(G, *mode, kind="cos", amplitude=1.3)
    out = semi_implicit_step(f, None, p, None)
    lam = mode[0] ** 2 + mode[1] ** 2
    want = f.coeffs / (1.0 + p.nu * delta * lam)
    denom = np.max(np.abs(want))
    assert np.max(np.abs(out.coeffs - want)) <= 1e-12 * denom


def test_zero_state_zero_noise_stays_zero():
    p = SchemeParams(1.0, 0.05, 16)
    out = semi_implicit_step(zero_field(G), np.zeros(BASIS.d), p, BASIS)
    assert out.l2_norm() == 0.0


def test_step_residual_small():
    p = SchemeParams(1.0, 0.02, 16)
    f = random_field(G, seed=4, rms=1.5)
    eta = np.ones(BASIS.d)
    noise = np.sqrt(p.delta) * (eta @ BASIS.coeff_matrix)
    out = semi_implicit_step(f, eta, p, BASIS)
    res = step_residual(G, f.coeffs, out.coeffs, noise, p)
    scale = f.l2_norm() + float(spectral.norm_l2(noise))
    assert res <= 1e-11 * scale


def test_dense_matrix_oracle_small_cutoff():
    # build the full step operator column by column and solve directly
    shells = 3
    grid = make_grid(shells)
    p = SchemeParams(1.0, 0.05, shells)
    prev = random_field(grid, seed=8, rms=1.2)
    n = grid.n_half
    u1, u2 = velocity_values(grid, prev.coeffs)

    def op(c):
        return (1.0 + p.delta * p.nu * grid.lam) * c \
            + p.delta * advect_frozen(grid, u1, u2, c)

    cols = []
    for i in range(n):
        e = np.zeros(n, dtype=np.complex128)
        e[i] = 1.0
        cols.append(op(e))
        e = np.zeros(n, dtype=np.complex128)
        e[i] = 1j
        cols.append(op(e))
    # real 2n x 2n system acting on [Re c, Im c]
    a_mat = np.zeros((2 * n, 2 * n))
    for j in range(n):
        a_mat[:n, 2 * j] = cols[2 * j].real
        a_mat[n:, 2 * j] = cols[2 * j].imag
        a_mat[:n, 2 * j + 1] = cols[2 * j + 1].real
        a_mat[n:, 2 * j + 1] = cols[2 * j + 1].imag
    rhs = np.concatenate([prev.coeffs.real, prev.coeffs.imag])
    # unknowns are interleaved as (re_0, im_0, re_1, im_1, ...)
    sol = np.linalg.solve(a_mat, rhs)
    c_sol = sol.reshape(n, 2) @ np.array([1.0, 1j])
    stepped = semi_implicit_step(prev, None, p, None)
    assert np.max(np.abs(stepped.coeffs - c_sol)) <= 1e-10 * prev.l2_norm()


def test_krylov_policy_matches_fixed_point():
    p_fp = SchemeParams(1.0, 0.02, 8, solver="fixed-point")
    p_kr = SchemeParams(1.0, 0.02, 8, solver="krylov")
    grid = make_grid(8)
    f = random_field(grid, seed=5, rms=1.5)
    a = semi_implicit_step(f, None, p_fp, None)
    b = semi_implicit_step(f, None, p_kr, None)
    assert np.max(np.abs(a.coeffs - b.coeffs)) <= 1e-9 * f.l2_norm()


# -- trajectories ----------------------------------------------------------------

def test_zero_steps_returns_projected_initial():
    p = SchemeParams(1.0, 0.01, 16)
    f = random_field(make_grid(20), seed=6)
    traj = simulate(f, 0, p, BASIS, NoiseStream(1, 0))
    assert traj.states.shape[0] == 1
    want = spectral.embed_coeffs(make_grid(20), G, f.coeffs)
    assert np.array_equal(traj.states[0], want)


def test_noise_free_energy_monotone():
    p = SchemeParams(1.0, 0.05, 16)
    f = random_field(G, seed=7, rms=2.0)
    traj = simulate(f, 50, p, None, None)
    assert np.all(np.diff(traj.energy_sq) <= 1e-12)


def test_noise_free_decay_bound():
    # |xi^n| <= |xi^0| / (1 + nu lambda_1 delta)^n
    p = SchemeParams(1.0, 0.05, 16, tol=1e-13)
    f = random_field(G, seed=7, rms=2.0)
    traj = simulate(f, 200, p, None, None)
    n = np.arange(201)
    bound = f.l2_norm() / (1.0 + p.nu * 1.0 * p.delta) ** n
    assert np.all(np.sqrt(traj.energy_sq) <= bound * (1.0 + 1e-10))


def test_replay_bit_identical():
    p = SchemeParams(1.0, 0.02, 16)
    f = random_field(G, seed=10)
    t1 = simulate(f, 40, p, BASIS, NoiseStream(123, 5))
    t2 = simulate(f, 40, p, BASIS, NoiseStream(123, 5))
    assert np.array_equal(t1.states, t2.states)
    assert np.array_equal(t1.energy_sq, t2.energy_sq)


def test_ensemble_member_matches_solo_run():
    # same tape by construction; agreement to rounding (BLAS kernels may
    # accumulate differently for different batch heights)
    p = SchemeParams(1.0, 0.02, 16)
    f = random_field(G, seed=11)
    run = simulate_ensemble(f, 25, p, BASIS, seed=77, trajectory_ids=[4, 9, 2])
    solo = simulate(f, 25, p, BASIS, NoiseStream(77, 9))
    scale = np.max(np.abs(solo.states))
    assert np.max(np.abs(run.states[:, 1] - solo.states)) <= 1e-11 * scale


def test_energy_identity_per_step():
    p = SchemeParams(1.0, 0.02, 16)
    prev = random_field(G, seed=12, rms=1.5)
    eta = np.linspace(-1, 1, BASIS.d)
    new = semi_implicit_step(prev, eta, p, BASIS)
    noise = SpectralField(G, np.sqrt(p.delta) * (eta @ BASIS.coeff_matrix))
    assert energy_identity_residual(prev, new, noise, p) <= 1e-10


# -- refined reference ---------------------------------------------------------------

def test_reference_r1_equals_simulate():
    p = SchemeParams(1.0, 0.02, 16)
    f = random_field(G, seed=13)
    a = simulate(f, 20, p, BASIS, NoiseStream(9, 1))
    b = reference_simulate(f, 20 * 0.02, p, BASIS, NoiseStream(9, 1, fine_factor=1))
    assert np.array_equal(a.states, b.states)


def test_heat_decay_oracle_fine_steps():
    # noise off, single mode: fine run approximates exp(-nu |k|^2 t)
    delta_f = 1.0 / 512
    p_f = SchemeParams(1.0, delta_f, 16)
    f = harmonic_field(G, 1, 0, "cos", amplitude=1.0)
    traj = reference_simulate(f, 1.0, p_f, None, NoiseStream(0, 0, fine_factor=16))
    final = traj.final().l2_norm()
    want = np.exp(-1.0) * f.l2_norm()
    assert abs(final - want) <= 1.0 * delta_f * f.l2_norm()


def test_coupled_error_shrinks_with_delta():
    # coarse vs fine with shared tape: halving delta shrinks the gap for
    # most sample paths
    f = random_field(G, seed=20, rms=1.0)
    horizon = 0.5
    errs = []
    for delta in (1 / 32, 1 / 64, 1 / 128):
        per_path = []
        for traj_id in range(10):
            stream = NoiseStream(31, traj_id, fine_factor=8)
            p_c = SchemeParams(1.0, delta, 16)
            p_f = SchemeParams(1.0, delta / 8, 16)
            coarse = simulate(f, round(horizon / delta), p_c, BASIS, stream)
            fine = reference_simulate(f, horizon, p_f, BASIS, stream)
            d = coarse.states[-1] - fine.states[-1]
            per_path.append(float(spectral.norm_l2(d)))
        errs.append(per_path)
    errs = np.array(errs)
    frac = np.mean((errs[1] < errs[0]) & (errs[2] < errs[1]))
    assert frac >= 0.9


# -- moment probe ----------------------------------------------------------------------

def test_moment_probe_trivial_cases():
    p = SchemeParams(1.0, 0.05, 16)
    traj = simulate(zero_field(G), 10, p, None, None)
    probe = moment_probe(traj, 0.3)
    assert np.allclose(np.exp(probe.log_values), 1.0)
    probe0 = moment_probe(simulate(random_field(G, seed=3), 10, p, None, None), 0.0)
    assert np.allclose(np.exp(probe0.log_values), 1.0)


def test_moment_probe_single_mode_closed_form():
    # sigma = 0, one mode: energies decay geometrically with known factor
    p = SchemeParams(1.0, 0.1, 16)
    f = harmonic_field(G, 1, 0, "cos")
    traj = simulate(f, 30, p, None, None)
    alpha = 0.2
    q = 1.0 / (1.0 + p.nu * p.delta) ** 2
    e0 = f.l2_norm() ** 2
    n = np.arange(31)
    energies = e0 * q ** n
    dissip = np.concatenate([[0.0], np.cumsum(energies[1:])])  # lambda = 1
    want = alpha * energies + alpha * p.nu * p.delta * dissip
    assert np.allclose(probe_vals := moment_probe(traj, alpha).log_values, want,
                       rtol=1e-9, atol=1e-12)


def test_moment_probe_admissibility_guard():
    p = SchemeParams(1.0, 0.05, 16)
    traj = simulate(zero_field(G), 5, p, BASIS, NoiseStream(1, 0))
    with pytest.raises(ConfigError):
        moment_probe(traj, alpha=10.0, basis=BASIS)


def test_lyapunov_bound_on_ensemble():
    # empirical mean of exp(alpha |xi^n|^2) under the discrete envelope
    p = SchemeParams(1.0, 0.05, 16)
    f = random_field(G, seed=2, rms=1.0)
    run = simulate_ensemble(f, 128, p, BASIS, seed=5, trajectory_ids=np.arange(128),
                            keep_states=False)
    alpha = 1.0 / (8 * BASIS.variance)
    means = np.mean(np.exp(alpha * run.energy_sq), axis=1)
    e0 = f.l2_norm() ** 2
    n = np.arange(129)
    c_const = (1.0 + p.nu * p.delta0) * BASIS.variance / p.nu
    envelope = np.exp(alpha * (2 * e0 / (1 + p.nu * p.delta) ** n + c_const)) * 3
    assert np.all(means <= envelope)
