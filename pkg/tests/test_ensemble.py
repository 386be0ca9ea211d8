from __future__ import annotations

import numpy as np
import pytest

from mctdvp.ensemble import (
    Accumulator,
    InitialSpec,
    derive_seed,
    load_checkpoint,
    merge_checkpoints,
    product_kets,
    resolve_workers,
    result_from_accumulator,
    run_ensemble,
    save_checkpoint,
    tomography_ensemble,
)
from mctdvp.errors import CheckpointFormatError, EnsembleFailure, InvalidInputError
from mctdvp.models import SM, SP, build_kxz, dissipation_preset, zero_hamiltonian
from mctdvp.observables import ObservableSpec
from mctdvp.sde import TrajectoryConfig, make_rng

SZ_OBS = ObservableSpec("sz_profile")


def pump_qubit():
    return zero_hamiltonian(1).with_dissipation([(1, SP)])


def small_setup():
    model = build_kxz(3, 0.5).with_dissipation(dissipation_preset("homogeneous_plus", 3))
    init = InitialSpec("random", bond_dim=2, seed=4)
    cfg = TrajectoryConfig(dt=0.02, t_final=0.2, seed=17, observables=(SZ_OBS, ObservableSpec("energy")))
    return model, init, cfg


def assert_same(a, b):
    np.testing.assert_array_equal(a.times, b.times)
    assert a.mean.keys() == b.mean.keys()
    for k in a.mean:
        np.testing.assert_array_equal(a.mean[k], b.mean[k])
        np.testing.assert_array_equal(a.stderr[k], b.stderr[k])
    assert a.n_effective == b.n_effective and a.failures == b.failures


def test_derive_seed_pure_and_injective():
    assert derive_seed(5, 9) == derive_seed(5, 9)
    masters = np.random.default_rng(0).integers(0, 2**63, size=1_000_000, dtype=np.uint64)
    assert all(derive_seed(int(s), 0) != derive_seed(int(s), 1) for s in masters)
    seeds = {derive_seed(3, i) for i in range(100_000)}
    assert len(seeds) == 100_000
    with pytest.raises(InvalidInputError):
        derive_seed(3, -1)


def test_derived_streams_uncorrelated():
    draws = np.array([make_rng(derive_seed(11, i)).standard_normal(1000) for i in range(1001)])
    r = np.corrcoef(draws)
    assert np.max(np.abs(np.diag(r, 1))) < 0.15
    assert np.max(np.abs(r[0, 1:])) < 0.15
    # over all ~5e5 pairs about one exceedance of 0.15 is expected by chance
    off = np.abs(r[np.triu_indices(len(r), 1)])
    assert np.count_nonzero(off > 0.15) <= 6


def test_product_patterns():
    kets = product_kets("neel", 3)
    np.testing.assert_array_equal([k[0] for k in kets], [1, 0, 1])
    assert len(product_kets("r", 4)) == 4
    with pytest.raises(InvalidInputError):
        product_kets("udx", 3)
    with pytest.raises(InvalidInputError):
        InitialSpec("product", per_sample=True)


def test_single_sample_flags_stderr():
    model, init, cfg = small_setup()
    res = run_ensemble(model, init, cfg, 1)
    assert res.n_effective == 1 and not res.stderr_defined
    assert np.all(res.stderr["sz_profile"] == 0)


def test_constant_observable_has_zero_stderr():
    model = build_kxz(4, 0.5)
    init = InitialSpec("random", bond_dim=2, seed=1)
    cfg = TrajectoryConfig(dt=0.02, t_final=0.2, observables=(SZ_OBS,))
    res = run_ensemble(model, init, cfg, 37, batch_size=8)
    assert res.stderr_defined
    assert np.max(res.stderr["sz_profile"]) <= 1e-12


def test_mean_matches_direct_average():
    model, init, cfg = small_setup()
    from mctdvp.sde import run_batch

    res = run_ensemble(model, init, cfg, 20, batch_size=7)
    direct = run_batch(init.build(model), model, cfg, [derive_seed(cfg.seed, i) for i in range(20)])
    vals = direct.series.values["sz_profile"]
    np.testing.assert_allclose(res.mean["sz_profile"], vals.mean(axis=0), atol=1e-14)
    np.testing.assert_allclose(res.stderr["sz_profile"], vals.std(axis=0, ddof=1) / np.sqrt(20), atol=1e-14)


def test_worker_and_chunking_independence():
    model, init, cfg = small_setup()
    ref = run_ensemble(model, init, cfg, 30, 1, batch_size=4)
    for workers in (2, 8):
        assert_same(ref, run_ensemble(model, init, cfg, 30, workers, batch_size=4))
    assert_same(ref, run_ensemble(model, init, cfg, 30, 1, batch_size=64))


def test_workers_env_override(monkeypatch):
    monkeypatch.setenv("MCTDVP_WORKERS", "3")
    assert resolve_workers(1) == 3
    monkeypatch.setenv("MCTDVP_WORKERS", "many")
    with pytest.raises(InvalidInputError):
        resolve_workers(1)


def test_per_sample_initial_states():
    model, _, cfg = small_setup()
    init = InitialSpec("random", bond_dim=2, seed=4, per_sample=True)
    a = run_ensemble(model, init, cfg, 12, batch_size=5)
    b = run_ensemble(model, init, cfg, 12, batch_size=12)
    assert_same(a, b)
    assert np.all(a.stderr["sz_profile"][0] > 0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_all_failed_raises():
    model = zero_hamiltonian(1).with_dissipation([(1, 1e200 * SM)])
    cfg = TrajectoryConfig(dt=0.1, t_final=0.2, observables=(SZ_OBS,))
    with pytest.raises(EnsembleFailure):
        run_ensemble(model, InitialSpec("product", "up"), cfg, 3)


def test_checkpoint_round_trip(tmp_path):
    model, init, cfg = small_setup()
    res, acc = run_ensemble(model, init, cfg, 10, batch_size=3, return_accumulator=True)
    path = tmp_path / "run.ckpt"
    save_checkpoint(path, acc, "fp")
    back, fp = load_checkpoint(path)
    assert fp == "fp"
    np.testing.assert_array_equal(back.completed, acc.completed)
    assert back.nodes.keys() == acc.nodes.keys()
    for key, node in acc.nodes.items():
        other = back.nodes[key]
        assert other.count == node.count
        for k in node.mean:
            np.testing.assert_array_equal(other.mean[k], node.mean[k])
            np.testing.assert_array_equal(other.m2[k], node.m2[k])
    assert_same(res, result_from_accumulator(back, res.times, res.labels))


def test_truncated_or_corrupt_checkpoint(tmp_path):
    model, init, cfg = small_setup()
    _, acc = run_ensemble(model, init, cfg, 4, return_accumulator=True)
    path = tmp_path / "run.ckpt"
    save_checkpoint(path, acc, "fp")
    data = path.read_bytes()
    for bad in (data[:-10], data[: len(data) // 2], b"garbage", data[:20] + bytes([data[20] ^ 1]) + data[21:]):
        path.write_bytes(bad)
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)


def test_resume_completes_missing_samples(tmp_path):
    model, init, cfg = small_setup()
    full = run_ensemble(model, init, cfg, 100, batch_size=16)
    ck = tmp_path / "part.ckpt"
    run_ensemble(model, init, cfg, 100, batch_size=16, sample_range=(0, 50), checkpoint=ck)
    resumed = run_ensemble(model, init, cfg, 100, batch_size=16, checkpoint=ck, resume=True)
    assert_same(full, resumed)
    other = TrajectoryConfig(dt=0.02, t_final=0.2, seed=18, observables=cfg.observables)
    with pytest.raises(InvalidInputError):
        run_ensemble(model, init, other, 100, checkpoint=ck, resume=True)


def test_merge_disjoint_ranges(tmp_path):
    model, init, cfg = small_setup()
    full = run_ensemble(model, init, cfg, 40, batch_size=8)
    parts = []
    for lo, hi in ((0, 13), (13, 29), (29, 40)):
        p = tmp_path / f"p{lo}.ckpt"
        run_ensemble(model, init, cfg, 40, batch_size=8, sample_range=(lo, hi), checkpoint=p)
        parts.append(p)
    acc, _ = merge_checkpoints(parts[::-1], tmp_path / "all.ckpt")
    assert_same(full, result_from_accumulator(acc, full.times, full.labels))
    with pytest.raises(InvalidInputError):
        merge_checkpoints([parts[0], parts[0]])


def test_accumulator_rejects_duplicates():
    acc = Accumulator(4, {"x": (1, 1)})
    acc.add_sample(2, {"x": np.ones((1, 1))})
    with pytest.raises(InvalidInputError):
        acc.add_sample(2, {"x": np.ones((1, 1))})


def test_tomography_estimates():
    model = build_kxz(2, 1.0).with_dissipation(dissipation_preset("homogeneous_plus", 2))
    init = InitialSpec("random", bond_dim=2, seed=3)
    cfg = TrajectoryConfig(dt=0.01, t_final=0.3, record_every=10)
    _, rho, err = tomography_ensemble(model, init, cfg, 200)
    for r, e in zip(rho, err):
        assert abs(np.trace(r) - 1) <= 1e-10
        assert np.max(np.abs(r - r.conj().T)) <= 1e-12
        assert np.linalg.eigvalsh(r).min() >= -5 * e.max() - 1e-12
    _, single, _ = tomography_ensemble(model, init, cfg, 1)
    assert np.linalg.matrix_rank(single[-1], tol=1e-10) == 1
    _, closed, _ = tomography_ensemble(build_kxz(2, 1.0), init, cfg, 5)
    purity = np.einsum("tij,tji->t", closed, closed).real
    np.testing.assert_allclose(purity, 1.0, atol=1e-10)


def test_stderr_scales_inverse_sqrt_n():
    cfg = TrajectoryConfig(dt=1e-2, t_final=1.0, record_every=100, observables=(SZ_OBS,))
    init = InitialSpec("product", "down")
    small = run_ensemble(pump_qubit(), init, cfg, 400, master_seed=1)
    large = run_ensemble(pump_qubit(), init, cfg, 40_000, master_seed=2, batch_size=4096)
    ratio = small.stderr["sz_profile"][-1, 0] / large.stderr["sz_profile"][-1, 0]
    assert 8 <= ratio <= 12
