import math

import numpy as np
import pytest

from torus_fbsde import fbsde, fields, flow, navier_stokes as ns
from torus_fbsde.fields import DivFreeField, uniform_grid
from torus_fbsde.lattice import NoiseBasisSpec

SPEC = NoiseBasisSpec(1, 3, 0.1)


def _tg(A=1.0, nu=0.1, T=0.1):
    return ns.TaylorGreenProvider(ns.TGParams(A, nu, T), 2)


def _triple(prov, G=16, T=0.1, dt=1e-3, paths=(0, 1), spec=SPEC, epsilon=None):
    fp = flow.simulate_forward(prov, spec, flow.BrownianDriver(3, dt),
                               flow.ParticleGrid.identity(G), 0.0, T, paths, epsilon)
    return fbsde.build_triple(prov, fp, spec)


def test_terminal_condition_is_exact():
    prov = _tg()
    tr = _triple(prov)
    hT = prov.terminal.evaluate(tr.path.final.reshape(-1, 2)).reshape(tr.Y[-1].shape)
    assert np.max(np.abs(tr.Y[-1] - hT)) <= 1e-12


def test_triple_shapes():
    tr = _triple(_tg(), G=8, T=0.01)
    assert tr.Y.shape == (11, 2, 8, 8, 2)
    assert tr.X.shape == (11, SPEC.n_noise, 2, 8, 8, 2)


def test_triple_requires_full_record():
    prov = _tg()
    fp = flow.simulate_forward(prov, SPEC, flow.BrownianDriver(0, 0.01),
                               flow.ParticleGrid.identity(4), 0.0, 0.1, record="final")
    with pytest.raises(ValueError):
        fbsde.build_triple(prov, fp, SPEC)


def test_residual_zero_for_constant_solution():
    c = DivFreeField.constant((0.5, 0.2), 2)
    tr = _triple(c)
    assert np.max(np.abs(tr.X)) == 0.0
    assert np.max(fbsde.bsde_residual(tr, None, c)) <= 1e-15


def test_residual_without_noise_is_quadrature_error():
    # inviscid steady Taylor-Green with no noise: characteristics plus pressure balance
    prov = _tg(0.5, 0.0, 0.25)
    spec = NoiseBasisSpec(1, 3, 0.1)
    tr = _triple(prov, T=0.25, dt=1e-3, paths=(0,), spec=spec, epsilon=0.0)
    assert np.max(fbsde.bsde_residual(tr, prov, prov.terminal)) <= 1e-4


def test_residual_noisy_taylor_green():
    prov = _tg(1.0, 0.1, 0.1)
    tr = _triple(prov, G=16, T=0.1, dt=1e-3)
    assert np.max(fbsde.bsde_residual(tr, prov, prov.terminal)) <= 5e-2


def test_martingale_sanity():
    prov = _tg(1.0, 0.1, 0.1)
    tr = _triple(prov, G=4, T=0.1, dt=5e-3, paths=range(200))
    I = fbsde.stochastic_integral(tr)                 # (P, G, G, 2)
    mean = I.mean(axis=0)
    std = I.std(axis=0, ddof=1)
    assert np.all(np.abs(mean) <= 3 * std / math.sqrt(I.shape[0]) + 1e-15)


@pytest.mark.parametrize("N,alpha", [(0, 3), (1, 3), (2, 2), (3, 4)])
def test_x_norm_identity(N, alpha):
    spec = NoiseBasisSpec(N, alpha, 0.07)
    y = fields.random_divfree(5, alpha, np.random.default_rng(N + alpha))
    lhs = fbsde.x_norm_sq(y, spec)
    rhs = 2 * 0.07 * fields.as_vector_field(y).grad_l2_sq()
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, rhs)
    assert fbsde.x_norm_sq(DivFreeField.zeros(3), spec) == 0.0


def test_sampled_x_norm_at_identity():
    y = fields.random_divfree(3, 3, np.random.default_rng(5))
    fp = flow.simulate_forward(y, SPEC, flow.BrownianDriver(0, 0.01), flow.ParticleGrid.identity(32),
                               0.0, 0.01)
    X = fbsde.compute_X(lambda s: y, fp, SPEC)
    assert fbsde.sampled_x_norm_sq(X[0])[0] == pytest.approx(fbsde.x_norm_sq(y, SPEC), rel=1e-12)


def test_energy_identities_taylor_green():
    traj = ns.exact_trajectory(ns.TGParams(1.0, 0.1, 1.0), 0.0, 1e-3, 4)
    d = fbsde.energy_identities(traj, SPEC)
    assert d.deterministic_defect <= 1e-8
    assert d.x_norm_defect <= 1e-10


def test_feynman_kac_constant_terminal():
    c = DivFreeField.constant((0.3, -0.1), 2)
    est = fbsde.feynman_kac_mean(c, None, DivFreeField.zeros(2), SPEC, flow.BrownianDriver(0, 0.01),
                                 4, 0.0, 0.1, 10)
    assert np.allclose(est.mean, [0.3, -0.1], atol=1e-15)


def test_feynman_kac_heat_semigroup():
    # only the constant noise modes: Z = theta + eps W, so E h(Z_T) = exp(-nu |k|^2 T) h
    spec = NoiseBasisSpec(0, 3, 0.1)
    h = DivFreeField.from_modes({(1, 1): (1.0, 0.5)}, 2, 3)
    G, T = 8, 0.5
    est = fbsde.feynman_kac_mean(h, None, DivFreeField.zeros(2), spec, flow.BrownianDriver(1, 0.05),
                                 G, 0.0, T, 2000)
    exact = h.evaluate(uniform_grid(G).reshape(-1, 2)).reshape(G, G, 2) * math.exp(-0.1 * 2 * T)
    assert np.all(np.abs(est.mean - exact) <= 5 * est.stderr + 1e-12)


def test_grid_to_divfree_roundtrip():
    y = fields.random_divfree(3, 3, np.random.default_rng(6), with_mean=True)
    back = fbsde.grid_to_divfree(y.to_grid(8).transpose(1, 2, 0), 3, 3)
    assert np.allclose(back.coefficient_vector(), y.coefficient_vector(), atol=1e-13)


def test_two_seeds_agree_within_monte_carlo_budget():
    prov = _tg(1.0, 0.1, 0.5)
    a, b = (fbsde.representation_formula(prov.terminal, prov, prov, SPEC,
                                         flow.BrownianDriver(seed, 5e-3), 8, 0.0, 0.5, 200)
            for seed in (1, 2))
    assert fbsde.field_errors(a.estimate, b.estimate, 8)[0] <= 2 * 5e-2


def test_node_provider_interpolates():
    f0 = DivFreeField.constant((1.0, 0.0), 2)
    f1 = DivFreeField.constant((0.0, 2.0), 2)
    prov = fbsde.NodeProvider(np.array([0.0, 1.0]), [f0, f1])
    assert np.allclose(prov(0.25).mean, [0.75, 0.5])
    assert prov(0.0) is f0 and prov(1.0) is f1


def test_divergence_rules():
    assert fbsde._divergence_reason([1.0, 0.5, 0.25, 0.1]) == ""
    assert "grew" in fbsde._divergence_reason([1.0, 1.1, 1.2, 1.3])
    assert "no contraction" in fbsde._divergence_reason([4.0, 3.0, 2.8, 4.3])
    assert fbsde._divergence_reason([1.0, float("nan")]) == "non-finite iterate"


def test_picard_constant_converges_in_one_iteration():
    c = DivFreeField.constant((0.3, -0.2), 3)
    st = fbsde.picard_solve(c, None, SPEC, 0.0, 0.25, 20, iters=4, n_t=4, substeps=2)
    assert st.status == "converged" and st.converged_at == 1
    for y in st.y:
        assert np.allclose(y.coefficient_vector(), c.coefficient_vector(), atol=1e-14)


def test_picard_is_reproducible():
    prov = ns.TaylorGreenProvider(ns.TGParams(0.5, 0.1, 0.25), 3)
    runs = [fbsde.picard_solve(prov.terminal, prov, SPEC, 0.0, 0.25, 10, iters=2, n_t=4,
                               substeps=2, seed=4).history for _ in range(2)]
    assert runs[0] == runs[1]


def test_picard_input_validation():
    c = DivFreeField.constant((0.3, -0.2), 3)
    with pytest.raises(ValueError):
        fbsde.picard_solve(c, None, SPEC, 0.25, 0.0, 10)
    with pytest.raises(ValueError):
        fbsde.picard_solve(c, None, SPEC, 0.0, 0.25, 0)
