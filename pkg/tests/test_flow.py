import math

import numpy as np
import pytest

from torus_fbsde import flow, navier_stokes as ns
from torus_fbsde.fields import DivFreeField, uniform_grid
from torus_fbsde.lattice import NoiseBasisSpec

TWO_PI = 2 * math.pi
SPEC = NoiseBasisSpec(1, 3, 0.1)


def test_wrap_range():
    x = np.array([-7.0, -1e-17, 0.0, 6.5, 13.0])
    w = flow.wrap(x)
    assert np.all((w >= 0) & (w < TWO_PI))
    assert np.allclose(np.cos(w), np.cos(x)) and np.allclose(np.sin(w), np.sin(x))


def test_driver_is_per_path():
    d = flow.BrownianDriver(7, 0.01)
    a = d.increments(3, 10, 4)
    assert np.array_equal(a, d.increments(3, 10, 4))
    assert not np.array_equal(a, d.increments(4, 10, 4))
    assert not np.array_equal(a, d.with_stream(1).increments(3, 10, 4))
    assert not np.array_equal(a, flow.BrownianDriver(8, 0.01).increments(3, 10, 4))


def test_driver_coarsening_couples_paths():
    d = flow.BrownianDriver(1, 1e-3)
    fine = d.increments(0, 20, 3)
    coarse = d.coarsened(2).increments(0, 10, 3)
    assert np.allclose(coarse, fine[0::2] + fine[1::2], atol=1e-15)


def test_driver_statistics():
    d = flow.BrownianDriver(2, 0.04)
    x = d.increments(0, 20000, 2)
    assert abs(x.mean()) <= 4 * 0.2 / math.sqrt(x.size)
    assert x.var() == pytest.approx(0.04, rel=0.03)


def test_driver_validation():
    with pytest.raises(ValueError):
        flow.BrownianDriver(0, 0.0)
    with pytest.raises(ValueError):
        flow.BrownianDriver(0, 0.1, fine=0)


def test_constant_drift_deterministic():
    c = DivFreeField.constant((0.3, -0.5), 2)
    fp = flow.simulate_forward(c, SPEC, flow.BrownianDriver(0, 0.01), flow.ParticleGrid.identity(8),
                               0.0, 1.0, epsilon=0.0, record="final")
    expect = flow.wrap(uniform_grid(8) + np.array([0.3, -0.5]))
    assert np.max(flow.torus_distance(fp.final[0], expect)) <= 1e-12


def test_constant_noise_translates_rigidly():
    spec = NoiseBasisSpec(0, 3, 0.1)
    drv = flow.BrownianDriver(4, 0.01)
    fp = flow.simulate_forward(DivFreeField.zeros(2), spec, drv, flow.ParticleGrid.identity(8),
                               0.0, 0.5, record="final")
    shift = spec.epsilon * drv.increments(0, 50, 2).sum(axis=0)
    expect = flow.wrap(uniform_grid(8) + shift)
    assert np.max(flow.torus_distance(fp.final[0], expect)) <= 1e-12


def test_euler_converges_to_characteristics():
    P = ns.TGParams(1.0, 0.1, 0.5)
    prov = ns.TaylorGreenProvider(P, 2)
    G = 16
    rk = flow.wrap(flow.rk4_characteristics(prov, uniform_grid(G), 0.0, 0.5, 1e-3))
    errs = []
    for dt in (4e-3, 2e-3, 1e-3):
        fp = flow.simulate_forward(prov, SPEC, flow.BrownianDriver(0, dt),
                                   flow.ParticleGrid.identity(G), 0.0, 0.5, epsilon=0.0,
                                   record="final")
        errs.append(np.max(flow.torus_distance(fp.final[0], rk)))
    assert errs[-1] <= 5e-4
    for a, b in zip(errs, errs[1:]):
        assert a / b == pytest.approx(2.0, rel=0.1)


def test_jacobian_of_identity_and_shear():
    Z = uniform_grid(32)
    assert np.allclose(flow.jacobian_determinant(Z), 1.0, atol=1e-13)
    shear = Z.copy()
    shear[..., 1] += 0.4 * np.sin(Z[..., 0])
    assert np.allclose(flow.jacobian_determinant(flow.wrap(shear)), 1.0, atol=1e-13)
    stretch = Z.copy()
    stretch[..., 0] += 0.1 * np.sin(Z[..., 0])
    det = flow.jacobian_determinant(flow.wrap(stretch))
    assert np.max(np.abs(det - 1)) == pytest.approx(0.1 * np.sin(TWO_PI / 32) / (TWO_PI / 32),
                                                    rel=1e-10)


def test_volume_distortion_needs_resolution():
    fp = flow.simulate_forward(DivFreeField.zeros(2), SPEC, flow.BrownianDriver(0, 0.1),
                               flow.ParticleGrid.identity(8), 0.0, 0.1)
    with pytest.raises(ValueError):
        flow.volume_distortion(fp)


def test_compose_identity_and_translation():
    G = 16
    ident = uniform_grid(G)
    xi = flow.wrap(ident + 0.3 * np.sin(ident[..., ::-1]))
    assert np.max(flow.torus_distance(flow.compose(ident, xi), xi)) <= 1e-12
    shift = flow.wrap(ident + np.array([0.2, 1.1]))
    assert np.max(flow.torus_distance(flow.compose(shift, xi),
                                      flow.wrap(xi + np.array([0.2, 1.1])))) <= 1e-12


def test_right_translation_constant_flow_exact():
    G = 16
    ident = uniform_grid(G)
    xi = flow.wrap(ident + 0.3 * np.sin(ident[..., ::-1]))
    d = flow.right_translation_check(DivFreeField.constant((0.2, 0.1), 2), NoiseBasisSpec(0, 3, 0.1),
                                     flow.BrownianDriver(0, 0.01), xi, 0.0, 0.2)
    assert d <= 1e-12


def test_paths_independent_of_batching():
    P = ns.TGParams(1.0, 0.1, 0.1)
    prov = ns.TaylorGreenProvider(P, 2)
    drv = flow.BrownianDriver(9, 0.01)
    start = flow.ParticleGrid.identity(8)
    both = flow.simulate_forward(prov, SPEC, drv, start, 0.0, 0.1, (0, 1), record="final")
    one = flow.simulate_forward(prov, SPEC, drv, start, 0.0, 0.1, (1,), record="final")
    assert np.array_equal(both.final[1], one.final[0])


def test_observer_and_recording():
    seen = []
    fp = flow.simulate_forward(DivFreeField.zeros(2), SPEC, flow.BrownianDriver(0, 0.01),
                               flow.ParticleGrid.identity(4), 0.0, 0.1, record=5,
                               observer=lambda i, s, Z, c: seen.append((i, round(s, 12))))
    assert [i for i, _ in seen] == list(range(11))
    assert np.allclose(fp.times, [0.0, 0.05, 0.1])
    assert fp.manifest()["paths"] == [0]
    assert len(fp.snapshot_rows()) == 16


def test_step_count_must_divide():
    with pytest.raises(ValueError):
        flow.step_count(0.0, 1.0, 0.3)


def test_noisy_flow_stays_nearly_volume_preserving():
    P = ns.TGParams(1.0, 0.1, 0.1)
    fp = flow.simulate_forward(ns.TaylorGreenProvider(P, 2), SPEC, flow.BrownianDriver(0, 1e-3),
                               flow.ParticleGrid.identity(32), 0.0, 0.1, (0, 1), record="final")
    assert np.all(flow.volume_distortion(fp) <= 2e-2)


def test_pairwise_distance_defect_zero_for_translation():
    Z = uniform_grid(8)
    assert flow.pairwise_distance_defect(Z, flow.wrap(Z + 0.7)) <= 1e-12


def test_deterministic_taylor_green_volume():
    P = ns.TGParams(1.0, 0.1, 0.5)
    fp = flow.simulate_forward(ns.TaylorGreenProvider(P, 2), SPEC, flow.BrownianDriver(0, 1e-3),
                               flow.ParticleGrid.identity(64), 0.0, 0.5, epsilon=0.0,
                               record="final")
    assert flow.volume_distortion(fp)[0] <= 2e-3


def test_rigid_translation_has_no_volume_distortion():
    fp = flow.simulate_forward(DivFreeField.constant((0.3, 0.1), 2), NoiseBasisSpec(0, 3, 0.1),
                               flow.BrownianDriver(1, 0.01), flow.ParticleGrid.identity(16),
                               0.0, 0.2, record="final")
    assert flow.volume_distortion(fp)[0] <= 1e-12
    assert flow.pairwise_distance_defect(uniform_grid(16), fp.final[0]) <= 1e-12


@pytest.mark.parametrize("shift,tol", [((0.0, 0.0), 1e-14), ((1.0, 0.5), 5e-3)])
def test_right_translation_identity_and_shift(shift, tol):
    prov = ns.TaylorGreenProvider(ns.TGParams(1.0, 0.1, 0.5), 2)
    xi = flow.ParticleGrid.identity(32).translated(shift)
    d = flow.right_translation_check(prov, SPEC, flow.BrownianDriver(2, 1e-3), xi, 0.0, 0.5)
    assert d <= tol
