from __future__ import annotations

import numpy as np
import pytest

from mctdvp.errors import InvalidInputError
from mctdvp.linalg import lq_reduced, pseudo_inverse, qr_positive, svd

from .conftest import crandn


def penrose_errors(m, x):
    return (
        np.abs(m @ x @ m - m).max(),
        np.abs(x @ m @ x - x).max(),
        np.abs((m @ x).conj().T - m @ x).max(),
        np.abs((x @ m).conj().T - x @ m).max(),
    )


def test_pinv_identity():
    np.testing.assert_allclose(pseudo_inverse(np.eye(3), 1e-12), np.eye(3), atol=1e-15)


def test_pinv_drops_zero_singular_value():
    np.testing.assert_allclose(pseudo_inverse(np.diag([2.0, 0.0]), 1e-12), np.diag([0.5, 0]), atol=1e-15)


def test_pinv_rank_deficient_penrose(rng):
    m = crandn(rng, 4, 2) @ crandn(rng, 2, 4)
    x = pseudo_inverse(m, 1e-12)
    assert max(penrose_errors(m, x)) <= 1e-10


def test_pinv_well_conditioned_penrose(rng):
    m = crandn(rng, 5, 5) + 5 * np.eye(5)
    assert max(penrose_errors(m, pseudo_inverse(m))) <= 1e-10


def test_pinv_cutoff_is_relative():
    m = np.diag([1.0, 1e-13])
    np.testing.assert_allclose(pseudo_inverse(m, 1e-12), np.diag([1.0, 0.0]))
    np.testing.assert_allclose(pseudo_inverse(m, 1e-14), np.diag([1.0, 1e13]))


def test_pinv_batched(rng):
    ms = crandn(rng, 3, 4, 4)
    out = pseudo_inverse(ms)
    for m, x in zip(ms, out):
        np.testing.assert_allclose(x, np.linalg.pinv(m), atol=1e-10)


@pytest.mark.parametrize("bad", [np.array([[np.nan, 0], [0, 1]]), np.array([[np.inf]])])
def test_pinv_rejects_non_finite(bad):
    with pytest.raises(InvalidInputError):
        pseudo_inverse(bad)


@pytest.mark.parametrize("cut", [-0.1, 1.0])
def test_pinv_rejects_bad_cutoff(cut):
    with pytest.raises(InvalidInputError):
        pseudo_inverse(np.eye(2), cut)


def test_qr_identity():
    q, r = qr_positive(np.eye(2))
    np.testing.assert_allclose(q, np.eye(2))
    np.testing.assert_allclose(r, np.eye(2))


def test_qr_column_vector_positive_convention():
    q, r = qr_positive(np.array([[0.0], [2.0]]))
    np.testing.assert_allclose(q, [[0], [1]], atol=1e-15)
    np.testing.assert_allclose(r, [[2]])


def test_qr_random_reconstruction(rng):
    m = crandn(rng, 6, 3)
    q, r = qr_positive(m)
    assert np.abs(q.conj().T @ q - np.eye(3)).max() <= 1e-12
    assert np.abs(q @ r - m).max() <= 1e-12
    assert np.all(np.diag(r).real > 0) and np.allclose(np.diag(r).imag, 0)
    assert np.allclose(np.tril(r, -1), 0)


def test_qr_deterministic(rng):
    m = crandn(rng, 5, 3)
    a, b = qr_positive(m), qr_positive(m.copy())
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_qr_complete_spans_complement(rng):
    m = crandn(rng, 6, 2)
    q, r = qr_positive(m, complete=True)
    assert q.shape == (6, 6)
    np.testing.assert_allclose(q.conj().T @ q, np.eye(6), atol=1e-12)
    np.testing.assert_allclose(q[:, :2] @ r[:2], m, atol=1e-12)
    np.testing.assert_allclose(q[:, 2:].conj().T @ m, 0, atol=1e-12)


def test_qr_rejects_wide_matrix():
    with pytest.raises(InvalidInputError):
        qr_positive(np.ones((2, 3)))


def test_lq_reconstruction(rng):
    m = crandn(rng, 3, 7)
    l, q = lq_reduced(m)
    np.testing.assert_allclose(l @ q, m, atol=1e-12)
    np.testing.assert_allclose(q @ q.conj().T, np.eye(3), atol=1e-12)


def test_svd_diag():
    _, s, _ = svd(np.diag([3.0, 1.0]))
    np.testing.assert_allclose(s, [3, 1])


def test_svd_zero():
    _, s, _ = svd(np.zeros((3, 2)))
    assert np.all(s == 0)


def test_svd_reconstruction_and_ordering(rng):
    m = crandn(rng, 4, 4)
    u, s, v = svd(m)
    assert np.abs(u @ np.diag(s) @ v.conj().T - m).max() <= 1e-12 * np.abs(m).max()
    assert np.all(np.diff(s) <= 0)


def test_svd_matches_gram_eigenvalues(rng):
    m = crandn(rng, 5, 5)
    _, s, _ = svd(m)
    ev = np.sort(np.linalg.eigvalsh(m.conj().T @ m))[::-1]
    np.testing.assert_allclose(s, np.sqrt(np.clip(ev, 0, None)), atol=1e-10)
