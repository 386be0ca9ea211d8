from __future__ import annotations

import numpy as np
import pytest

from mctdvp.errors import DenseCapExceeded, InvalidInputError
from mctdvp.models import SP, SZ, build_kxz, build_xxz, dissipation_preset, zero_hamiltonian
from mctdvp.mps import random_state, to_dense
from mctdvp.observables import ObservableSpec
from mctdvp.oracle import (
    brute_force_tangent_argmin,
    dense_qsd_trajectory,
    density_matrix_defects,
    integrate_master,
    lindblad_rhs,
    master_series,
    propagate_expm,
    pure_density_matrix,
)
from mctdvp.sde import TrajectoryConfig, WienerIncrementSet, increments_from_normals, make_rng
from mctdvp.tdvp import compute_b_q

from .conftest import crandn

DOWN = np.array([0, 1], dtype=complex)


def pump_qubit():
    return zero_hamiltonian(1).with_dissipation([(1, SP)])


def fig1_model():
    return build_kxz(2, 1.0).with_dissipation(dissipation_preset("homogeneous_plus", 2))


def random_rho(rng, dim):
    a = crandn(rng, dim, dim)
    rho = a @ a.conj().T
    return rho / np.trace(rho)


def test_rhs_trivial_and_pump():
    rho = pure_density_matrix(DOWN)
    assert np.all(lindblad_rhs(rho, zero_hamiltonian(1)) == 0)
    drho = lindblad_rhs(rho, pump_qubit())
    assert np.trace(SZ @ drho).real == pytest.approx(2.0, abs=1e-14)


def test_rhs_forms_agree_and_trace_free(rng):
    model = fig1_model()
    for _ in range(5):
        rho = random_rho(rng, 4)
        q = lindblad_rhs(rho, model, "q")
        c = lindblad_rhs(rho, model, "commutator")
        assert np.max(np.abs(q - c)) <= 1e-12
        assert abs(np.trace(q)) <= 1e-12


def test_rhs_validation():
    with pytest.raises(InvalidInputError):
        lindblad_rhs(np.eye(2), fig1_model())
    with pytest.raises(InvalidInputError):
        lindblad_rhs(np.eye(4) / 4, fig1_model(), form="other")
    with pytest.raises(DenseCapExceeded):
        lindblad_rhs(np.eye(256), build_kxz(8, 1.0))


def test_rk4_single_qubit_closed_form():
    times, rhos = integrate_master(pure_density_matrix(DOWN), pump_qubit(), 2.0, 1e-3, record_every=100)
    sz = np.einsum("ij,tji->t", SZ, rhos).real
    np.testing.assert_allclose(sz, 1 - 2 * np.exp(-times), atol=1e-8)
    assert len(times) == 21 and times[-1] == pytest.approx(2.0)


def test_rk4_trace_hermiticity_positivity(rng):
    model = build_xxz(3, 1.0, 1.0).with_dissipation(dissipation_preset("edge_driving", 3))
    _, rhos = integrate_master(random_rho(rng, 8), model, 1.0, 1e-2)
    for rho in rhos:
        d = density_matrix_defects(rho)
        assert d["trace"] <= 1e-10 and d["hermiticity"] <= 1e-10 and d["min_eigenvalue"] >= -1e-8


def test_rk4_unitary_conserves_purity():
    psi = to_dense(random_state(3, 2, 2, seed=1))
    _, rhos = integrate_master(pure_density_matrix(psi), build_kxz(3, 0.5), 2.0, 1e-2)
    purity = np.einsum("tij,tji->t", rhos, rhos).real
    np.testing.assert_allclose(purity, 1.0, atol=1e-10)


def test_rk4_step_halving_and_expm(rng):
    model = fig1_model()
    rho0 = random_rho(rng, 4)
    exact = propagate_expm(rho0, model, [1.0])[0]
    errs = [np.max(np.abs(integrate_master(rho0, model, 1.0, dt)[1][-1] - exact)) for dt in (0.1, 0.05)]
    assert 12 <= errs[0] / errs[1] <= 20
    fine = integrate_master(rho0, model, 1.0, 1e-3)[1][-1]
    assert np.max(np.abs(fine - exact)) <= 1e-10


def test_expm_cap():
    with pytest.raises(DenseCapExceeded):
        propagate_expm(np.eye(128) / 128, build_kxz(7, 1.0), [0.1])


def test_master_series_grid():
    cfg = TrajectoryConfig(dt=0.01, t_final=0.05, record_every=2, observables=(ObservableSpec("sz_profile"),))
    series = master_series(pure_density_matrix(DOWN), pump_qubit(), cfg)
    np.testing.assert_allclose(series.times, [0, 0.02, 0.04, 0.05])
    assert series.values["sz_profile"].shape == (4, 1)


def test_dense_qsd_noiseless_is_euler_schrodinger():
    model = build_kxz(3, 0.7)
    psi = to_dense(random_state(3, 2, 2, seed=2))
    cfg = TrajectoryConfig(dt=0.01, t_final=0.01)
    _, states = dense_qsd_trajectory(psi, model, cfg, np.zeros((1, 0)), return_states=True)
    ref = psi - 0.01j * model.dense_hamiltonian() @ psi
    np.testing.assert_allclose(states[-1], ref / np.linalg.norm(ref), atol=1e-14)


def test_dense_qsd_noise_validation():
    cfg = TrajectoryConfig(dt=0.01, t_final=0.02)
    noise = [WienerIncrementSet(np.zeros(1), 0.01)] * 3
    with pytest.raises(InvalidInputError):
        dense_qsd_trajectory(DOWN, pump_qubit(), cfg, noise)
    dense_qsd_trajectory(DOWN, pump_qubit(), cfg, noise[:2])


def test_dense_qsd_ensemble_matches_master():
    model = fig1_model()
    psi = to_dense(random_state(2, 2, 2, seed=3))
    cfg = TrajectoryConfig(dt=1e-3, t_final=0.5, record_every=100, observables=(ObservableSpec("tomography"),))
    n = 10_000
    z = make_rng(4).standard_normal((cfg.n_steps, n, 2 * model.n_channels))
    series = dense_qsd_trajectory(np.broadcast_to(psi, (n, 4)), model, cfg, increments_from_normals(z, cfg.dt))
    est = series.values["tomography"].mean(axis=0)
    ref = master_series(pure_density_matrix(psi), model, cfg).values["tomography"]
    assert np.max(np.abs(est - ref)) <= 5 / np.sqrt(n)


def test_brute_force_norm_direction_and_full_rank():
    st = random_state(2, 2, 2, seed=5)
    psi = to_dense(st)
    _, res, _ = brute_force_tangent_argmin(st, psi)
    assert res <= 1e-6
    _, res, _ = brute_force_tangent_argmin(st, fig1_model().dense_q() @ psi)
    assert res <= 1e-5


def test_brute_force_agrees_with_projection():
    st = random_state(4, 2, 2, seed=6)
    model = build_kxz(4, 0.8).with_dissipation(dissipation_preset("homogeneous_plus", 4))
    target = model.dense_q() @ to_dense(st)
    phi, res, jac = brute_force_tangent_argmin(st, target)
    ours = np.linalg.norm(target - compute_b_q(st, model).to_dense())
    assert abs(res - ours) <= 1e-4
    r = target - phi
    assert np.max(np.abs(jac.conj().T @ r)) <= 1e-5
