from __future__ import annotations

import numpy as np
import pytest

from mctdvp.errors import DegenerateStateError, DenseCapExceeded, InvalidInputError
from mctdvp.models import PAULI, SM, SP, SX, SZ, SiteOperator, build_kxz, build_xxz, embed
from mctdvp.mps import (
    MpsState,
    canonicalize_right,
    expand_bond_dims,
    expect_local,
    expect_nn_hamiltonian,
    expect_profile,
    expect_two_point,
    from_bytes,
    from_dense,
    norm_squared,
    normalize,
    overlap,
    product_state,
    random_state,
    right_canonical_error,
    stack_states,
    to_bytes,
    to_dense,
    two_point_profile,
)

from .conftest import crandn

UP, DOWN = np.array([1, 0]), np.array([0, 1])
RIGHT = np.array([1, 1]) / np.sqrt(2)


def dense_expect(psi, op):
    return np.vdot(psi, op @ psi) / np.vdot(psi, psi)


def scrambled(state, rng):
    """Same physical state in a random non-canonical gauge, scaled by 3."""
    ts = list(state.tensors)
    for k in range(len(ts) - 1):
        dim = ts[k].shape[-1]
        g = crandn(rng, dim, dim) + 3 * np.eye(dim)
        ts[k] = ts[k] @ g
        ts[k + 1] = np.linalg.inv(g) @ ts[k + 1]
    ts[0] = 3 * ts[0]
    return MpsState(tuple(ts))


def test_product_single_site_sz():
    st = product_state(1, 2, [UP])
    assert expect_local(st, SiteOperator(SZ, 1)) == pytest.approx(1)


def test_product_down_down():
    st = product_state(2, 2, [DOWN, DOWN])
    assert expect_local(st, SiteOperator(SZ, 1)) == pytest.approx(-1)
    assert expect_local(st, SiteOperator(SZ, 2)) == pytest.approx(-1)
    assert st.bond_dims == (1, 1, 1)


def test_product_x_polarized():
    st = product_state(3, 2, [RIGHT] * 3)
    np.testing.assert_allclose(expect_profile(st, SX), [1, 1, 1])


def test_product_rejects_unnormalized():
    with pytest.raises(InvalidInputError):
        product_state(1, 2, [np.array([1.0, 1.0])])


def test_random_state_normalized_and_deterministic():
    a, b = random_state(2, 2, 2, seed=7), random_state(2, 2, 2, seed=7)
    assert abs(norm_squared(a) - 1) <= 1e-12
    assert all(np.array_equal(x, y) for x, y in zip(a.tensors, b.tensors))
    assert right_canonical_error(a) <= 1e-10


def test_random_state_rank_cap():
    assert random_state(4, 2, 8, seed=1).bond_dims == (1, 2, 4, 2, 1)
    assert random_state(6, 2, 3, seed=1).bond_dims == (1, 2, 3, 3, 3, 2, 1)


def test_random_state_rejects_zero_bond():
    with pytest.raises(InvalidInputError):
        random_state(3, 2, 0, seed=1)


def test_normalize(rng):
    st = random_state(4, 2, 3, seed=2)
    assert np.array_equal(normalize(st).tensors[1], st.tensors[1])
    np.testing.assert_allclose(to_dense(normalize(st)), to_dense(st), atol=1e-12)
    big = MpsState((3 * st.tensors[0],) + st.tensors[1:])
    np.testing.assert_allclose(
        expect_profile(normalize(big), SZ), expect_profile(st, SZ), atol=1e-12
    )
    once = normalize(big)
    assert abs(norm_squared(normalize(once)) - norm_squared(once)) <= 1e-12


def test_normalize_zero_state():
    st = MpsState((np.zeros((2, 1, 1)),))
    with pytest.raises(DegenerateStateError):
        normalize(st)
    with pytest.raises(DegenerateStateError):
        canonicalize_right(st)


def test_canonicalize_product_state_unchanged():
    st = product_state(3, 2, [UP, DOWN, RIGHT])
    out = canonicalize_right(st)
    for a, b in zip(st.tensors, out.tensors):
        np.testing.assert_allclose(np.abs(a), np.abs(b), atol=1e-14)


def test_canonicalize_preserves_expectations(rng):
    st = random_state(5, 2, 4, seed=3)
    sc = scrambled(st, rng)
    out = canonicalize_right(sc)
    assert right_canonical_error(out) <= 1e-10
    np.testing.assert_allclose(expect_profile(out, SZ), expect_profile(st, SZ), atol=1e-10)
    np.testing.assert_allclose(expect_profile(sc, SZ), expect_profile(st, SZ), atol=1e-10)


def test_canonicalize_idempotent(rng):
    once = canonicalize_right(scrambled(random_state(4, 2, 4, seed=4), rng))
    twice = canonicalize_right(once)
    for a, b in zip(once.tensors, twice.tensors):
        np.testing.assert_allclose(a, b, atol=1e-13)


def test_expect_local_basic():
    st = product_state(2, 2, [UP, UP])
    assert expect_local(st, SiteOperator(SZ, 1)) == pytest.approx(1)
    assert expect_local(product_state(1, 2, [DOWN]), SiteOperator(SP, 1)) == 0


def test_expect_local_site_range():
    with pytest.raises(InvalidInputError):
        expect_local(product_state(2, 2, [UP, UP]), SiteOperator(SZ, 3))


@pytest.mark.parametrize("name", ["x", "y", "z", "plus"])
def test_expect_local_matches_dense(name):
    st = random_state(4, 2, 4, seed=5)
    psi = to_dense(st)
    for site in range(1, 5):
        val = expect_local(st, SiteOperator(PAULI[name], site))
        assert abs(val - dense_expect(psi, embed(PAULI[name], site, 4))) <= 1e-10


def test_two_point_basic():
    assert expect_two_point(
        product_state(2, 2, [UP, UP]), SiteOperator(SZ, 1), SiteOperator(SZ, 2)
    ) == pytest.approx(1)
    assert expect_two_point(
        product_state(2, 2, [RIGHT, RIGHT]), SiteOperator(SX, 1), SiteOperator(SX, 2)
    ) == pytest.approx(1)


def test_two_point_matches_dense(rng):
    st = scrambled(random_state(4, 2, 4, seed=6), rng)
    psi = to_dense(st)
    for a in range(1, 5):
        for b in range(1, 5):
            val = expect_two_point(st, SiteOperator(SX, a), SiteOperator(SP, b))
            ref = dense_expect(psi, embed(SX, a, 4) @ embed(SP, b, 4))
            assert abs(val - ref) <= 1e-10


def test_two_point_profile_matches_pairs():
    st = random_state(6, 2, 4, seed=8)
    prof = two_point_profile(st, 3, SX)
    for m in range(1, 7):
        ref = expect_two_point(st, SiteOperator(SX, 3), SiteOperator(SX, m))
        assert abs(prof[m - 1] - ref) <= 1e-10


def test_energy_examples():
    st = product_state(2, 2, [UP, UP])
    assert expect_nn_hamiltonian(st, build_kxz(2, 1.0)) == pytest.approx(1)
    st = product_state(2, 2, [UP, DOWN])
    assert expect_nn_hamiltonian(st, build_xxz(2, 1.0, 1.0)) == pytest.approx(-1)


def test_energy_matches_dense():
    st = random_state(6, 2, 4, seed=9)
    model = build_kxz(6, 0.4)
    ref = dense_expect(to_dense(st), model.dense_hamiltonian())
    assert abs(expect_nn_hamiltonian(st, model) - ref) <= 1e-10
    assert abs(ref.imag) <= 1e-10


def test_to_dense_basis_order():
    np.testing.assert_allclose(to_dense(product_state(2, 2, [UP, DOWN])), [0, 1, 0, 0])


def test_to_dense_norm():
    st = random_state(5, 2, 3, seed=10)
    assert abs(np.linalg.norm(to_dense(st)) ** 2 - norm_squared(st)) <= 1e-12


def test_bell_state_round_trip():
    bell = np.array([1, 0, 0, 1]) / np.sqrt(2)
    np.testing.assert_allclose(to_dense(from_dense(bell, 2)), bell, atol=1e-14)


def test_from_dense_full_rank(rng):
    psi = crandn(rng, 32)
    psi /= np.linalg.norm(psi)
    st = canonicalize_right(from_dense(psi, 5))
    assert st.is_full_rank()
    assert abs(abs(np.vdot(psi, to_dense(st))) - 1) <= 1e-12


def test_dense_cap():
    with pytest.raises(DenseCapExceeded):
        to_dense(random_state(4, 2, 2, seed=1), cap=8)


def test_expand_bond_dims_keeps_state():
    st = product_state(4, 2, [UP, DOWN, RIGHT, UP])
    big = expand_bond_dims(st, 4)
    assert big.bond_dims == (1, 2, 4, 2, 1)
    assert abs(abs(np.vdot(to_dense(st), to_dense(big))) - 1) <= 1e-12
    assert right_canonical_error(big) <= 1e-10


def test_overlap_and_batch():
    a, b = random_state(3, 2, 2, seed=1), random_state(3, 2, 2, seed=2)
    assert abs(overlap(a, b) - np.vdot(to_dense(a), to_dense(b))) <= 1e-12
    batch = stack_states([a, b])
    assert batch.batch_shape == (2,)
    np.testing.assert_allclose(expect_profile(batch, SZ)[1], expect_profile(b, SZ), atol=1e-13)
    np.testing.assert_allclose(to_dense(batch.select(0)), to_dense(a))


def test_binary_round_trip():
    st = random_state(4, 2, 3, seed=11)
    data = to_bytes(st)
    header = np.frombuffer(data[: 8 * 7], dtype="<u8")
    assert list(header) == [4, 2, 1, 2, 3, 2, 1]
    back = from_bytes(data)
    assert all(np.array_equal(x, y) for x, y in zip(st.tensors, back.tensors))
    with pytest.raises(InvalidInputError):
        from_bytes(data[:-1])


def test_state_validation():
    with pytest.raises(InvalidInputError):
        MpsState((np.ones((2, 2, 1)),))
    with pytest.raises(InvalidInputError):
        MpsState((np.ones((2, 1, 2)), np.ones((2, 3, 1))))
    with pytest.raises(InvalidInputError):
        MpsState((np.full((2, 1, 1), np.nan),))


def test_sm_expectation_is_conjugate_of_sp():
    st = random_state(3, 2, 2, seed=12)
    a = expect_local(st, SiteOperator(SP, 2))
    b = expect_local(st, SiteOperator(SM, 2))
    assert abs(a - np.conj(b)) <= 1e-12
