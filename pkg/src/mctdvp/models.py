"""Spin-chain Hamiltonians, dissipation presets and the effective generator.

Conventions: local basis order is (up, down), ``SZ = diag(1, -1)`` and
``SP = (SX + i SY) / 2`` raises down to up. Sites are numbered from 1.
Dissipation strength is fixed to one; the coupling constant ``epsilon`` of
the XXZ chain sets the Hamiltonian scale relative to it.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import reduce

import numpy as np

from .errors import DenseCapExceeded, InvalidInputError

SX = np.array([[0, 1], [1, 0]], dtype=np.complex128)
SY = np.array([[0, -1j], [1j, 0]], dtype=np.complex128)
SZ = np.array([[1, 0], [0, -1]], dtype=np.complex128)
SP = (SX + 1j * SY) / 2
SM = (SX - 1j * SY) / 2
ID2 = np.eye(2, dtype=np.complex128)

PAULI = {"x": SX, "y": SY, "z": SZ, "plus": SP, "minus": SM, "+": SP, "-": SM}

DISSIPATION_PRESETS = ("homogeneous_plus", "bihomogeneous", "edge_driving")


@dataclass(frozen=True)
class SiteOperator:
    """A ``d x d`` operator acting on one site (1-based)."""

    matrix: np.ndarray
    site: int

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=np.complex128)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise InvalidInputError(f"site operator must be square, got shape {m.shape}")
        object.__setattr__(self, "matrix", m)


@dataclass(frozen=True)
class LindbladModel:
    """Nearest-neighbour Hamiltonian ``K`` plus on-site Lindblad channels.

    ``nn_terms[k]`` is the ``d^2 x d^2`` bond operator acting on sites
    ``k + 1`` and ``k + 2``; ``lindblad_ops`` holds ``(site, matrix)`` pairs.
    """

    n_sites: int
    nn_terms: tuple[np.ndarray, ...]
    lindblad_ops: tuple[tuple[int, np.ndarray], ...] = ()
    d: int = 2
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.n_sites < 1:
            raise InvalidInputError("n_sites must be >= 1")
        if len(self.nn_terms) != max(self.n_sites - 1, 0):
            raise InvalidInputError(
                f"expected {self.n_sites - 1} bond terms, got {len(self.nn_terms)}"
            )
        dd = self.d * self.d
        terms = []
        for h in self.nn_terms:
            h = np.asarray(h, dtype=np.complex128)
            if h.shape != (dd, dd):
                raise InvalidInputError(f"bond term must be {dd}x{dd}, got {h.shape}")
            if not np.all(np.isfinite(h)):
                raise InvalidInputError("bond terms must be finite")
            if not np.allclose(h, h.conj().T, atol=1e-12, rtol=0):
                raise InvalidInputError("bond terms must be Hermitian")
            terms.append(h)
        ops = []
        for site, mat in self.lindblad_ops:
            mat = np.asarray(mat, dtype=np.complex128)
            if not 1 <= site <= self.n_sites:
                raise InvalidInputError(f"Lindblad site {site} outside 1..{self.n_sites}")
            if mat.shape != (self.d, self.d):
                raise InvalidInputError(f"Lindblad operator must be {self.d}x{self.d}")
            if not np.all(np.isfinite(mat)):
                raise InvalidInputError("Lindblad operators must be finite")
            ops.append((int(site), mat))
        object.__setattr__(self, "nn_terms", tuple(terms))
        object.__setattr__(self, "lindblad_ops", tuple(ops))

    @property
    def n_channels(self) -> int:
        return len(self.lindblad_ops)

    def with_dissipation(self, ops) -> "LindbladModel":
        return replace(self, lindblad_ops=tuple(ops))

    def onsite_damping(self) -> list[np.ndarray]:
        """Per-site sum of ``L^dag L`` over the channels living on that site."""
        out = [np.zeros((self.d, self.d), dtype=np.complex128) for _ in range(self.n_sites)]
        for site, mat in self.lindblad_ops:
            out[site - 1] += mat.conj().T @ mat
        return out

    # dense forms, only for small chains
    def dense_hamiltonian(self, cap: int = 2**14) -> np.ndarray:
        dim = _check_dim(self.d, self.n_sites, cap)
        k = np.zeros((dim, dim), dtype=np.complex128)
        for b, h in enumerate(self.nn_terms):
            left = np.eye(self.d**b)
            right = np.eye(self.d ** (self.n_sites - b - 2))
            k += np.kron(np.kron(left, h), right)
        return k

    def dense_lindblad_ops(self, cap: int = 2**14) -> list[np.ndarray]:
        _check_dim(self.d, self.n_sites, cap)
        return [embed(mat, site, self.n_sites, self.d) for site, mat in self.lindblad_ops]

    def dense_q(self, cap: int = 2**14) -> np.ndarray:
        """Effective generator ``Q = -i K - 1/2 sum L^dag L``."""
        q = -1j * self.dense_hamiltonian(cap)
        for lop in self.dense_lindblad_ops(cap):
            q -= 0.5 * lop.conj().T @ lop
        return q


def _check_dim(d: int, n: int, cap: int) -> int:
    dim = d**n
    if dim > cap:
        raise DenseCapExceeded(f"dense dimension {dim} exceeds cap {cap}")
    return dim


def embed(op: np.ndarray, site: int, n_sites: int, d: int = 2) -> np.ndarray:
    """Dense ``1 x ... x op x ... x 1`` with ``op`` on 1-based ``site``."""
    mats = [np.eye(d, dtype=np.complex128)] * n_sites
    mats = list(mats)
    mats[site - 1] = np.asarray(op, dtype=np.complex128)
    return reduce(np.kron, mats)


def build_kxz(n_sites: int, lam: float) -> LindbladModel:
    """``K_XZ = sum_n SX_n SX_{n+1} + lam SZ_n SZ_{n+1}`` with no dissipation."""
    if n_sites < 2:
        raise InvalidInputError("build_kxz needs n_sites >= 2")
    h = np.kron(SX, SX) + lam * np.kron(SZ, SZ)
    return LindbladModel(
        n_sites, tuple(h.copy() for _ in range(n_sites - 1)), (), 2, "kxz", {"lambda": lam}
    )


def build_xxz(n_sites: int, epsilon: float, lam: float) -> LindbladModel:
    """``K = sum_n epsilon (2 SP SM + 2 SM SP + lam SZ SZ)`` with no dissipation."""
    if n_sites < 2:
        raise InvalidInputError("build_xxz needs n_sites >= 2")
    h = epsilon * (2 * np.kron(SP, SM) + 2 * np.kron(SM, SP) + lam * np.kron(SZ, SZ))
    return LindbladModel(
        n_sites,
        tuple(h.copy() for _ in range(n_sites - 1)),
        (),
        2,
        "xxz",
        {"epsilon": epsilon, "lambda": lam},
    )


def zero_hamiltonian(n_sites: int, d: int = 2) -> LindbladModel:
    dd = d * d
    return LindbladModel(
        n_sites, tuple(np.zeros((dd, dd)) for _ in range(n_sites - 1)), (), d, "zero", {}
    )


def dissipation_preset(kind: str, n_sites: int) -> list[tuple[int, np.ndarray]]:
    """Lindblad channel lists used by the benchmark chains.

    ``homogeneous_plus``: ``SP`` on every site. ``bihomogeneous``: ``SP`` on
    the first half, ``SM`` on the second (even ``n_sites`` only).
    ``edge_driving``: ``SP`` on site 1 and ``SM`` on site ``n_sites``.
    """
    if n_sites < 2:
        raise InvalidInputError("dissipation presets need n_sites >= 2")
    if kind == "homogeneous_plus":
        return [(n, SP.copy()) for n in range(1, n_sites + 1)]
    if kind == "bihomogeneous":
        if n_sites % 2:
            raise InvalidInputError("bihomogeneous dissipation requires an even number of sites")
        half = n_sites // 2
        return [(n, (SP if n <= half else SM).copy()) for n in range(1, n_sites + 1)]
    if kind == "edge_driving":
        return [(1, SP.copy()), (n_sites, SM.copy())]
    raise InvalidInputError(f"unknown dissipation preset {kind!r}; choose from {DISSIPATION_PRESETS}")


def full_rank_bond_dims(n_sites: int, d: int) -> tuple[int, ...]:
    """Bond dimensions ``min(d^k, d^(n-k))`` at which an MPS spans the full space."""
    return tuple(min(d**k, d ** (n_sites - k)) for k in range(n_sites + 1))
