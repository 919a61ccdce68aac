import numpy as np
import numpy.testing as npt
import pytest

import basisid as b
from basisid.systems import generate_linear, linear_model

from _oracles import (masked_ridge_rows, residual_moment, ridge_solution,
                      weighted_stats_bruteforce)


# ---------------------------------------------------------------------------
# gamma schedule and blending


def test_gamma_schedule_values():
    sched = b.GammaSchedule(exponent=0.7, burn_in=0)
    assert b.gamma_value(sched, 1) == 1.0
    npt.assert_allclose(b.gamma_value(sched, 2), 2.0 ** -0.7, rtol=1e-15)
    npt.assert_allclose(b.gamma_value(sched, 10), 10.0 ** -0.7, rtol=1e-15)


def test_gamma_schedule_burn_in_holds_at_one():
    sched = b.GammaSchedule(exponent=0.8, burn_in=5)
    for k in range(1, 7):
        assert b.gamma_value(sched, k) == 1.0
    npt.assert_allclose(b.gamma_value(sched, 7), 2.0 ** -0.8, rtol=1e-15)


def test_gamma_schedule_is_decreasing_after_burn_in():
    sched = b.GammaSchedule(exponent=0.51, burn_in=2)
    vals = [b.gamma_value(sched, k) for k in range(3, 50)]
    assert np.all(np.diff(vals) < 0)


def test_gamma_exponent_bounds():
    with pytest.raises(ValueError):
        b.GammaSchedule(exponent=0.5)   # not square-summable
    with pytest.raises(ValueError):
        b.GammaSchedule(exponent=1.01)  # not summing to infinity fast enough
    b.GammaSchedule(exponent=1.0)       # boundary is allowed


def test_blend_stats_arithmetic():
    old = b.SuffStats(phi=np.array([[2.0]]), psi=np.array([[4.0]]),
                      sigma=np.array([[8.0]]))
    new = b.SuffStats(phi=np.array([[1.0]]), psi=np.array([[1.0]]),
                      sigma=np.array([[1.0]]))
    out = b.blend_stats(old, new, 0.25)
    npt.assert_allclose(out.phi, [[1.75]])
    npt.assert_allclose(out.psi, [[3.25]])
    npt.assert_allclose(out.sigma, [[6.25]])


def test_blend_with_gamma_one_forgets_old():
    """gamma_1 = 1 makes the first EM step independent of the statistics
    initialization."""
    old = b.SuffStats(phi=np.full((2, 2), 9.0), psi=np.full((2, 3), 9.0),
                      sigma=np.full((3, 3), 9.0))
    new = b.SuffStats(phi=np.eye(2), psi=np.zeros((2, 3)), sigma=np.eye(3))
    out = b.blend_stats(old, new, 1.0)
    npt.assert_array_equal(out.phi, new.phi)
    npt.assert_array_equal(out.psi, new.psi)
    npt.assert_array_equal(out.sigma, new.sigma)


# ---------------------------------------------------------------------------
# closed-form maximization


def test_m_step_scalar_example():
    stats = b.SuffStats(phi=np.array([[1.2]]), psi=np.array([[2.0]]),
                        sigma=np.array([[4.0]]))
    Gamma, Pi = b.m_step(stats, np.zeros((1, 1)), T=100)
    npt.assert_allclose(Gamma, [[0.5]], rtol=1e-14)
    npt.assert_allclose(Pi, [[0.2]], rtol=1e-12)


def test_m_step_scalar_ridge_example():
    # P/T = 1 shifts the denominator: Gamma = 2 / (4 + 1)
    stats = b.SuffStats(phi=np.array([[1.2]]), psi=np.array([[2.0]]),
                        sigma=np.array([[4.0]]))
    Gamma, _ = b.m_step(stats, np.array([[50.0]]), T=50)
    npt.assert_allclose(Gamma, [[0.4]], rtol=1e-14)


def random_stats(rng, p, q, cond_floor=0.5):
    """Well-conditioned random statistics with the moment structure of an
    actual regression (so Pi stays PSD)."""
    n = 4 * q
    Z = rng.normal(size=(n, q))
    G = rng.normal(size=(p, q))
    E = 0.3 * rng.normal(size=(n, p))
    Y = Z @ G.T + E
    sigma = Z.T @ Z / n + cond_floor * np.eye(q)
    psi = Y.T @ Z / n
    phi = Y.T @ Y / n + cond_floor * np.eye(p)
    return b.SuffStats(phi=phi, psi=psi, sigma=sigma)


def test_m_step_unregularized_matches_least_squares(rng):
    """P = 0 reduces to plain weighted least squares (acceptance-style
    property, smaller instance count here)."""
    for _ in range(25):
        p, q = rng.integers(1, 4), rng.integers(1, 8)
        stats = random_stats(rng, p, q)
        Gamma, Pi = b.m_step(stats, np.zeros((q, q)), T=17)
        want = stats.psi @ np.linalg.inv(stats.sigma)
        rel = np.linalg.norm(Gamma - want) / max(1.0, np.linalg.norm(want))
        assert rel < 1e-12
        want_pi = residual_moment(stats.phi, stats.psi, stats.sigma, want)
        assert np.linalg.norm(Pi - want_pi) / max(1.0, np.linalg.norm(want_pi)) < 1e-10


def test_m_step_matches_explicit_ridge(rng):
    for lam in (0.0, 0.01, 0.1, 1.0, 10.0):
        stats = random_stats(rng, 3, 12)
        P = np.diag(lam * (1.0 + rng.random(12)))
        Gamma, _ = b.m_step(stats, P, T=40)
        want = ridge_solution(stats.psi, stats.sigma, np.diag(P), 40)
        rel = np.linalg.norm(Gamma - want) / max(1.0, np.linalg.norm(want))
        assert rel < 1e-8


def test_m_step_accepts_diagonal_vector(rng):
    stats = random_stats(rng, 2, 5)
    P_vec = np.arange(1.0, 6.0)
    g1, p1 = b.m_step(stats, P_vec, T=10)
    g2, p2 = b.m_step(stats, np.diag(P_vec), T=10)
    npt.assert_array_equal(g1, g2)
    npt.assert_array_equal(p1, p2)


def test_m_step_rejects_bad_precision(rng):
    stats = random_stats(rng, 2, 4)
    with pytest.raises(ValueError):
        b.m_step(stats, -np.eye(4), T=10)          # negative entries
    P = np.eye(4)
    P[0, 1] = 0.5
    with pytest.raises(ValueError):
        b.m_step(stats, P, T=10)                   # off-diagonal junk


def test_m_step_masked_matches_row_oracle(rng):
    for _ in range(10):
        p, q = 3, 7
        stats = random_stats(rng, p, q)
        mask = rng.random((p, q)) < 0.6
        fixed = np.where(mask, 0.0, rng.normal(size=(p, q)))
        P = np.diag(rng.random(q))
        Gamma, Pi = b.m_step(stats, P, T=25, mask=mask, fixed=fixed)
        want = masked_ridge_rows(stats.psi, stats.sigma, np.diag(P), 25,
                                 mask, fixed)
        npt.assert_allclose(Gamma, want, atol=1e-10)
        npt.assert_array_equal(Gamma[~mask], fixed[~mask])


def test_m_step_fully_frozen_row(rng):
    stats = random_stats(rng, 2, 4)
    mask = np.ones((2, 4), dtype=bool)
    mask[1] = False
    fixed = np.zeros((2, 4))
    fixed[1] = [1.0, 0.0, -2.0, 0.5]
    Gamma, _ = b.m_step(stats, np.zeros(4), T=10, mask=mask, fixed=fixed)
    npt.assert_array_equal(Gamma[1], fixed[1])


def test_m_step_residual_moment_is_psd(rng):
    for _ in range(10):
        stats = random_stats(rng, 3, 6)
        _, Pi = b.m_step(stats, np.zeros(6), T=30)
        w = np.linalg.eigvalsh(0.5 * (Pi + Pi.T))
        assert np.all(w >= 1e-9 - 1e-15)
        npt.assert_allclose(Pi, Pi.T, atol=1e-12)


def test_m_step_singular_sigma_raises(rng):
    """A duplicated regressor makes Sigma exactly singular; without a prior
    the factorization must fail loudly and point at regularization."""
    Z = rng.normal(size=(40, 3))
    Z = np.hstack([Z, Z[:, :1]])  # column 3 duplicates column 0
    Y = rng.normal(size=(40, 1))
    stats = b.SuffStats(phi=Y.T @ Y / 40, psi=Y.T @ Z / 40,
                        sigma=Z.T @ Z / 40)
    with pytest.raises(b.RankDeficiencyError, match="regularization"):
        b.m_step(stats, np.zeros(4), T=40)
    # ... and a flat prior rescues exactly the same statistics
    Gamma, _ = b.m_step(stats, 0.1 * np.eye(4), T=40)
    assert np.all(np.isfinite(Gamma))


def test_stronger_prior_shrinks_coefficients(rng):
    stats = random_stats(rng, 1, 6)
    norms = []
    for lam in (0.0, 1.0, 10.0, 100.0, 1000.0):
        Gamma, _ = b.m_step(stats, lam * np.eye(6), T=5)
        norms.append(np.linalg.norm(Gamma))
    assert np.all(np.diff(norms) < 0)


# ---------------------------------------------------------------------------
# sufficient statistics from a particle system


def test_iteration_stats_against_triple_loop(rng):
    """Vectorized statistics vs a dead-simple loop, autonomous case."""
    model = linear_model(a=0.9, q=0.1, c=1.0, r=0.1, init_var=0.4)
    data, _ = generate_linear(T=5, seed=2)
    _, system = b.cpf_as(model, data, np.zeros((5, 1)), N=3, seed=8)

    trajs = system.trajectories().transpose(1, 0, 2)  # (N, T, n_x)
    (phi_s, psi_s, sig_s), (phi_m, psi_m, sig_m) = weighted_stats_bruteforce(
        trajs, system.final_weights, data,
        lambda x: b.eval_features(model.basis_x, x))

    got_s = b.iteration_stats(system, model, data, equation="state")
    npt.assert_allclose(got_s.phi, phi_s, atol=1e-12)
    npt.assert_allclose(got_s.psi, psi_s, atol=1e-12)
    npt.assert_allclose(got_s.sigma, sig_s, atol=1e-12)

    got_m = b.iteration_stats(system, model, data, equation="measurement")
    npt.assert_allclose(got_m.phi, phi_m, atol=1e-12)
    npt.assert_allclose(got_m.psi, psi_m, atol=1e-12)
    npt.assert_allclose(got_m.sigma, sig_m, atol=1e-12)


def test_iteration_stats_with_inputs_against_triple_loop(rng):
    """Same cross-check with an input basis stacked into the regressor."""
    basis_x = b.BasisSpec.fourier(4, 2.0)
    basis_u = b.BasisSpec.linear(1)
    model = b.ModelParams(
        basis_x=basis_x, basis_u=basis_u,
        Gamma_f=np.array([[0.0, 0.2, 0.3, 0.0, 0.4]]),
        Gamma_g=np.array([[0.0, 1.0, 0.0, 0.0, 0.0]]),
        Q=np.array([[0.1]]), R=np.array([[0.2]]),
        init_mean=np.zeros(1), init_cov=np.eye(1))
    u = rng.normal(size=(6, 1))
    x, y = b.simulate(model, u=u, seed=0)
    data = b.Dataset(u=u, y=y)
    _, system = b.cpf_as(model, data, np.zeros((6, 1)), N=4, seed=3)

    ufeat = np.vstack([b.eval_features(basis_u, u[t]) for t in range(6)])
    trajs = system.trajectories().transpose(1, 0, 2)
    (phi_s, psi_s, sig_s), (phi_m, psi_m, sig_m) = weighted_stats_bruteforce(
        trajs, system.final_weights, data,
        lambda xv: b.eval_features(basis_x, xv), ufeat=ufeat)

    got_s = b.iteration_stats(system, model, data, equation="state")
    got_m = b.iteration_stats(system, model, data, equation="measurement")
    npt.assert_allclose(got_s.psi, psi_s, atol=1e-12)
    npt.assert_allclose(got_s.sigma, sig_s, atol=1e-12)
    npt.assert_allclose(got_m.psi, psi_m, atol=1e-12)
    npt.assert_allclose(got_m.sigma, sig_m, atol=1e-12)


def test_iteration_stats_single_particle_is_plain_average():
    model = linear_model()
    data, _ = generate_linear(T=8, seed=6)
    cond = np.linspace(-0.5, 0.5, 8).reshape(-1, 1)
    _, system = b.cpf_as(model, data, cond, N=1, seed=0)
    stats = b.iteration_stats(system, model, data, equation="state")
    z = cond[1:, 0]
    zt = cond[:-1, 0]
    npt.assert_allclose(stats.phi, [[np.sum(z * z) / 8]], atol=1e-14)
    npt.assert_allclose(stats.psi, [[np.sum(z * zt) / 8]], atol=1e-14)
    npt.assert_allclose(stats.sigma, [[np.sum(zt * zt) / 8]], atol=1e-14)


# ---------------------------------------------------------------------------
# initialization and priors


def test_initial_model_defaults():
    data, _ = generate_linear(T=200, seed=0)
    basis = b.BasisSpec.composite(
        [(b.BasisSpec.linear(1), (0,)), (b.BasisSpec.fourier(5, 2.0), (0,))],
        1)
    init = b.initial_model(data, basis)
    # identity feature starts at a gentle contraction, everything else at 0
    npt.assert_allclose(init.Gamma_f[0, 0], 0.5)
    npt.assert_array_equal(init.Gamma_f[0, 1:], np.zeros(5))
    s = float(np.var(data.y))
    npt.assert_allclose(np.diag(init.Q), [s], rtol=1e-12)
    npt.assert_allclose(np.diag(init.R), [s], rtol=1e-12)
    npt.assert_array_equal(init.init_mean, np.zeros(1))


def test_initial_model_respects_fixed_structure():
    data, _ = generate_linear(T=100, seed=1)
    basis = b.BasisSpec.composite(
        [(b.BasisSpec.linear(1), (0,)), (b.BasisSpec.fourier(3, 2.0), (0,))],
        1)
    q = basis.feature_count
    meas_mask = np.zeros((1, q), dtype=bool)
    meas_fixed = np.zeros((1, q))
    meas_fixed[0, 0] = 1.0
    struct = b.StructureSpec(state_mask=None, state_fixed=None,
                             meas_mask=meas_mask, meas_fixed=meas_fixed)
    init = b.initial_model(data, basis, structure=struct)
    npt.assert_array_equal(init.Gamma_g, meas_fixed)


def test_regressor_precision_blocks():
    basis_x = b.BasisSpec.fourier(5, 2.0)
    basis_u = b.BasisSpec.fourier(3, 1.0)
    model = b.ModelParams(
        basis_x=basis_x, basis_u=basis_u,
        Gamma_f=np.zeros((1, 8)), Gamma_g=np.zeros((1, 8)),
        Q=np.eye(1), R=np.eye(1), init_mean=np.zeros(1), init_cov=np.eye(1))
    prior = b.PriorSpec("frequency_squared", 2.0)
    P = b.regressor_precision(model, prior)
    want = np.concatenate([
        np.diag(b.build_precision(basis_x, prior)),
        np.diag(b.build_precision(basis_u, prior)),
    ])
    assert P.shape == (8,)
    npt.assert_allclose(P, want, atol=0)


# ---------------------------------------------------------------------------
# full identification loop


def identity_measurement_structure(q):
    smask = np.ones((1, q), dtype=bool)
    mmask = np.zeros((1, q), dtype=bool)
    mfixed = np.zeros((1, q))
    mfixed[0, 0] = 1.0
    return b.StructureSpec(state_mask=smask, state_fixed=np.zeros((1, q)),
                           meas_mask=mmask, meas_fixed=mfixed,
                           learn_Q=True, learn_R=False)


def test_psaem_recovers_linear_gaussian_model():
    """Scalar LGSS with known identity measurement: the transition
    coefficient should land within +-0.05 of the truth and the process
    noise within a factor of two."""
    a, q_true, c, r = 0.9, 0.1, 1.0, 0.1
    data, _ = generate_linear(T=1500, seed=0, a=a, q=q_true, c=c, r=r)
    basis = b.BasisSpec.linear(1)
    struct = identity_measurement_structure(1)
    init = b.initial_model(data, basis, structure=struct)
    init = b.ModelParams(basis_x=basis, basis_u=None,
                         Gamma_f=init.Gamma_f, Gamma_g=init.Gamma_g,
                         Q=init.Q, R=np.array([[r]]),
                         init_mean=init.init_mean, init_cov=init.init_cov)
    cfg = b.PsaemConfig(N=15, K=300, init_model=init, structure=struct,
                        seed=1, trace_period=100)
    result = b.psaem_identify(data, cfg)
    a_hat = result.model.Gamma_f[0, 0]
    q_hat = result.model.Q[0, 0]
    assert abs(a_hat - a) < 0.05
    assert q_true / 2 < q_hat < q_true * 2


def test_psaem_zero_iterations_returns_init():
    data, _ = generate_linear(T=50, seed=0)
    init = b.initial_model(data, b.BasisSpec.linear(1))
    cfg = b.PsaemConfig(N=5, K=0, init_model=init, seed=0)
    result = b.psaem_identify(data, cfg)
    npt.assert_array_equal(result.model.Gamma_f, init.Gamma_f)
    npt.assert_array_equal(result.model.Q, init.Q)
    assert result.trace == []


def test_psaem_same_seed_bitwise_identical():
    data, _ = generate_linear(T=120, seed=4)
    basis = b.BasisSpec.fourier(4, 2.5)

    def run():
        init = b.initial_model(data, basis)
        cfg = b.PsaemConfig(N=5, K=40, init_model=init, seed=123,
                            trace_period=20)
        return b.psaem_identify(data, cfg)

    r1, r2 = run(), run()
    npt.assert_array_equal(r1.model.Gamma_f, r2.model.Gamma_f)
    npt.assert_array_equal(r1.model.Gamma_g, r2.model.Gamma_g)
    npt.assert_array_equal(r1.model.Q, r2.model.Q)
    npt.assert_array_equal(r1.model.R, r2.model.R)


def test_psaem_trace_and_diagnostics_contract():
    data, _ = generate_linear(T=80, seed=2)
    init = b.initial_model(data, b.BasisSpec.linear(1))
    cfg = b.PsaemConfig(N=5, K=25, init_model=init, seed=0, trace_period=10)
    result = b.psaem_identify(data, cfg)
    ks = [k for k, _ in result.trace]
    assert ks == [10, 20, 25]  # every period plus the final iteration
    assert len(result.diagnostics) == 25
    row = result.diagnostics[0]
    for key in ("k", "gamma", "degenerate_weight_steps",
                "pi_floor_activations"):
        assert key in row
    assert result.diagnostics[0]["gamma"] == 1.0


def test_psaem_divergence_reports_iteration():
    # An explosive transition alone is not enough: particles that blow up
    # lose the weight competition against the pinned reference and die in
    # resampling.  Blinding the measurement (Gamma_g = 0) keeps the weights
    # uniform so the exploding particles survive long enough to overflow.
    data, _ = generate_linear(T=60, seed=3)
    basis = b.BasisSpec.linear(1)
    init = b.ModelParams(basis_x=basis, basis_u=None,
                         Gamma_f=np.array([[1e200]]),
                         Gamma_g=np.array([[0.0]]),
                         Q=np.eye(1), R=np.eye(1),
                         init_mean=np.zeros(1), init_cov=np.eye(1))
    cfg = b.PsaemConfig(N=5, K=10, init_model=init, seed=0)
    with pytest.raises(b.DivergenceError) as exc:
        b.psaem_identify(data, cfg)
    assert exc.value.iteration == 1
    assert exc.value.time_index is not None


def test_psaem_structured_cascade_recovery():
    """Two-block structure: a linear input-driven state feeding a second
    state through a sine nonlinearity.  With the wiring constrained by
    masks, the free coefficients should come back near truth."""
    rng = np.random.default_rng(0)
    basis_x = b.BasisSpec.composite(
        [(b.BasisSpec.linear(2), (0, 1)),
         (b.BasisSpec.fourier(3, 2.0), (0,))], 2)
    basis_u = b.BasisSpec.linear(1)
    # feature order: [x0, x1, 1, cos(pi x0/2), sin(pi x0/2), u]
    q = basis_x.feature_count + 1
    G_true = np.zeros((2, q))
    G_true[0, 0] = 0.7
    G_true[0, 5] = 0.5
    G_true[1, 1] = 0.5
    G_true[1, 4] = 0.8
    Gg = np.zeros((2, q))
    Gg[0, 0] = 1.0
    Gg[1, 1] = 1.0
    truth = b.ModelParams(basis_x=basis_x, basis_u=basis_u,
                          Gamma_f=G_true, Gamma_g=Gg,
                          Q=0.05 * np.eye(2), R=0.05 * np.eye(2),
                          init_mean=np.zeros(2), init_cov=0.1 * np.eye(2))
    u = rng.normal(size=(800, 1))
    _, y = b.simulate(truth, u=u, seed=5)
    data = b.Dataset(u=u, y=y)

    smask = G_true != 0.0
    struct = b.StructureSpec(state_mask=smask, state_fixed=np.zeros((2, q)),
                             meas_mask=np.zeros((2, q), dtype=bool),
                             meas_fixed=Gg, learn_Q=True, learn_R=False)
    init = b.initial_model(data, basis_x, basis_u, structure=struct)
    init = b.ModelParams(basis_x=basis_x, basis_u=basis_u,
                         Gamma_f=init.Gamma_f, Gamma_g=init.Gamma_g,
                         Q=init.Q, R=0.05 * np.eye(2),
                         init_mean=init.init_mean, init_cov=init.init_cov)
    cfg = b.PsaemConfig(N=10, K=200, init_model=init, structure=struct,
                        seed=2, trace_period=100)
    result = b.psaem_identify(data, cfg)
    G_hat = result.model.Gamma_f
    npt.assert_array_equal(G_hat[~smask], np.zeros(np.sum(~smask)))
    for r_, c_ in zip(*np.nonzero(smask)):
        assert abs(G_hat[r_, c_] - G_true[r_, c_]) < 0.15, (r_, c_, G_hat)
