"""Dense complex linear algebra used by the MPS and tangent-space code.

Every routine accepts stacks of matrices: leading axes are treated as batch
axes, so a batch of trajectories shares one call.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidInputError

DEFAULT_CUTOFF = 1e-12


def _as_complex(m) -> np.ndarray:
    a = np.asarray(m, dtype=np.complex128)
    if a.ndim < 2:
        raise InvalidInputError(f"expected a matrix, got array of shape {a.shape}")
    return a


def _phase(x: np.ndarray) -> np.ndarray:
    """Unit-modulus phases of ``x`` with phase 1 where ``x == 0``."""
    mag = np.abs(x)
    out = np.ones_like(x)
    nz = mag > 0
    out[nz] = x[nz] / mag[nz]
    return out


def svd(m) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD ``m = u @ diag(s) @ v^H`` with ``s`` nonincreasing.

    Returns ``(u, s, v)``; note that ``v`` (not ``v^H``) is returned.
    """
    a = _as_complex(m)
    u, s, vh = np.linalg.svd(a, full_matrices=False)
    return u, s, np.conj(np.swapaxes(vh, -1, -2))


def pseudo_inverse(m, rel_cutoff: float = DEFAULT_CUTOFF) -> np.ndarray:
    """Moore-Penrose pseudo-inverse via SVD.

    Singular values ``s_i < rel_cutoff * s_max`` are treated as zero.

    Raises:
        InvalidInputError: for non-finite entries or a cutoff outside ``[0, 1)``.
    """
    if not 0.0 <= rel_cutoff < 1.0:
        raise InvalidInputError(f"rel_cutoff must lie in [0, 1), got {rel_cutoff}")
    a = _as_complex(m)
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("pseudo_inverse: matrix has non-finite entries")
    u, s, v = svd(a)
    if s.shape[-1] == 0:
        return np.zeros(a.shape[:-2] + (a.shape[-1], a.shape[-2]), dtype=np.complex128)
    smax = s[..., :1]
    keep = (s >= rel_cutoff * smax) & (s > 0)
    sinv = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
    return (v * sinv[..., None, :]) @ np.conj(np.swapaxes(u, -1, -2))


def qr_positive(m, complete: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """QR factorization with a real nonnegative diagonal of ``r``.

    With ``complete=False`` the input must have ``rows >= cols``; ``q`` then
    has orthonormal columns and ``r`` is square. With ``complete=True`` ``q``
    is a full unitary and the trailing columns span the orthogonal complement
    of the column space (for full-rank input).
    """
    a = _as_complex(m)
    rows, cols = a.shape[-2:]
    if not complete and rows < cols:
        raise InvalidInputError(f"qr_positive needs rows >= cols, got {rows}x{cols}")
    q, r = np.linalg.qr(a, mode="complete" if complete else "reduced")
    k = min(rows, cols)
    ph = _phase(np.diagonal(r[..., :k, :k], axis1=-2, axis2=-1))
    q[..., :, :k] *= ph[..., None, :]
    r[..., :k, :] *= np.conj(ph)[..., :, None]
    return q, r


def qr_reduced(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reduced QR for any shape, positive diagonal; ``q`` has ``min(rows, cols)`` columns."""
    q, r = np.linalg.qr(a, mode="reduced")
    k = min(a.shape[-2:])
    ph = _phase(np.diagonal(r[..., :k, :k], axis1=-2, axis2=-1))
    q *= ph[..., None, :]
    r *= np.conj(ph)[..., :, None]
    return q, r


def lq_reduced(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``a = l @ q`` with orthonormal rows in ``q`` and positive diagonal in ``l``."""
    q, r = qr_reduced(np.conj(np.swapaxes(a, -1, -2)))
    return np.conj(np.swapaxes(r, -1, -2)), np.conj(np.swapaxes(q, -1, -2))


def dagger(a: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(a, -1, -2))
