"""Open-boundary matrix product states.

A state is stored as one array per site with shape ``(..., d, D_left, D_right)``:
the leading axes (possibly none) index a batch of independent states that
share bond dimensions, which lets a chunk of trajectories advance through the
same numpy calls. Boundary bonds have dimension one, so the edge vectors are
absorbed into the first and last tensors.

The standard gauge is right-canonical, ``sum_s A^s A^s^dag = 1`` at every
site, with the norm carried by the first tensor until :func:`normalize`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateStateError, DenseCapExceeded, InvalidInputError, PreconditionError
from .linalg import dagger, lq_reduced, qr_reduced
from .models import LindbladModel, SiteOperator, full_rank_bond_dims

DENSE_CAP = 2**14


@dataclass(frozen=True, eq=False)
class MpsState:
    """Site tensors ``(..., d, D_left, D_right)`` with unit boundary bonds; all entries finite."""

    tensors: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        ts = tuple(np.asarray(t, dtype=np.complex128) for t in self.tensors)
        if not ts:
            raise InvalidInputError("an MPS needs at least one site")
        batch = ts[0].shape[:-3]
        d = ts[0].shape[-3]
        for k, t in enumerate(ts):
            if t.ndim < 3 or t.shape[:-3] != batch or t.shape[-3] != d:
                raise InvalidInputError(f"site {k + 1}: inconsistent tensor shape {t.shape}")
            if k and ts[k - 1].shape[-1] != t.shape[-2]:
                raise InvalidInputError(f"bond mismatch between sites {k} and {k + 1}")
            if not np.isfinite(t).all():
                raise InvalidInputError(f"site {k + 1}: non-finite tensor entries")
        if ts[0].shape[-2] != 1 or ts[-1].shape[-1] != 1:
            raise InvalidInputError("boundary bond dimensions must be 1")
        object.__setattr__(self, "tensors", ts)

    @property
    def n_sites(self) -> int:
        return len(self.tensors)

    @property
    def d(self) -> int:
        return self.tensors[0].shape[-3]

    @property
    def bond_dims(self) -> tuple[int, ...]:
        return (1,) + tuple(t.shape[-1] for t in self.tensors)

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.tensors[0].shape[:-3]

    def select(self, index) -> "MpsState":
        """Sub-batch (or single state) selected along the leading batch axis."""
        return MpsState(tuple(t[index] for t in self.tensors))

    def is_full_rank(self) -> bool:
        return self.bond_dims == full_rank_bond_dims(self.n_sites, self.d)


def stack_states(states: Sequence[MpsState]) -> MpsState:
    """Stack unbatched states with equal bond dimensions into one batch."""
    dims = {s.bond_dims for s in states}
    if len(dims) != 1:
        raise InvalidInputError("can only stack states with identical bond dimensions")
    n = states[0].n_sites
    return MpsState(tuple(np.stack([s.tensors[k] for s in states]) for k in range(n)))


def broadcast_state(state: MpsState, batch: int) -> MpsState:
    """Copy an unbatched state ``batch`` times along a new leading axis."""
    return MpsState(tuple(np.repeat(t[None], batch, axis=0) for t in state.tensors))


# --- construction -----------------------------------------------------------


def product_state(n_sites: int, d: int, local_kets) -> MpsState:
    kets = [np.asarray(k, dtype=np.complex128) for k in local_kets]
    if len(kets) != n_sites:
        raise InvalidInputError(f"need {n_sites} local kets, got {len(kets)}")
    tensors = []
    for k, ket in enumerate(kets):
        if ket.shape != (d,):
            raise InvalidInputError(f"local ket {k + 1} must have {d} components")
        if abs(np.linalg.norm(ket) - 1.0) > 1e-12:
            raise InvalidInputError(f"local ket {k + 1} is not normalized")
        tensors.append(ket.reshape(d, 1, 1).copy())
    return MpsState(tuple(tensors))


def random_state(n_sites: int, d: int, max_bond_dim: int, seed) -> MpsState:
    """Normalized right-canonical state with Gaussian random tensors."""
    if max_bond_dim < 1:
        raise InvalidInputError("max_bond_dim must be >= 1")
    rng = np.random.default_rng(seed)
    dims = [min(max_bond_dim, c) for c in full_rank_bond_dims(n_sites, d)]
    tensors = []
    for k in range(n_sites):
        shape = (d, dims[k], dims[k + 1])
        tensors.append(rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
    return canonicalize_right(MpsState(tuple(tensors)))


def expand_bond_dims(state: MpsState, max_bond_dim: int) -> MpsState:
    """Zero-pad bonds up to ``min(max_bond_dim, exact rank cap)`` and re-gauge.

    The physical state is unchanged; the padded directions receive
    orthonormal completions from the canonicalization sweep.
    """
    caps = full_rank_bond_dims(state.n_sites, state.d)
    target = [max(min(max_bond_dim, c), b) for c, b in zip(caps, state.bond_dims)]
    tensors = []
    for k, t in enumerate(state.tensors):
        pad = [(0, 0)] * (t.ndim - 2) + [
            (0, target[k] - t.shape[-2]),
            (0, target[k + 1] - t.shape[-1]),
        ]
        tensors.append(np.pad(t, pad))
    return canonicalize_right(MpsState(tuple(tensors)), keep_norm=True)


def from_dense(psi, n_sites: int, d: int = 2) -> MpsState:
    """Exact MPS (full-rank bond dimensions) of a dense state vector."""
    psi = np.asarray(psi, dtype=np.complex128)
    if psi.shape[-1] != d**n_sites:
        raise InvalidInputError("dense vector length does not match d**n_sites")
    batch = psi.shape[:-1]
    rest = psi.reshape(batch + (1, d**n_sites))
    tensors = []
    for k in range(n_sites - 1):
        dl = rest.shape[-2]
        m = rest.reshape(batch + (dl * d, -1))
        q, r = qr_reduced(m)
        tensors.append(np.moveaxis(q.reshape(batch + (dl, d, q.shape[-1])), -2, -3))
        rest = r
    dl = rest.shape[-2]
    tensors.append(np.moveaxis(rest.reshape(batch + (dl, d, 1)), -2, -3))
    return canonicalize_right(MpsState(tuple(tensors)), keep_norm=True)


# --- gauge ------------------------------------------------------------------


def _norm_of_first(state: MpsState) -> np.ndarray:
    a = state.tensors[0]
    return np.sqrt(np.sum(np.abs(a) ** 2, axis=(-3, -2, -1)))


def _check_norm(nrm: np.ndarray) -> None:
    if not np.all(np.isfinite(nrm)) or np.any(nrm == 0):
        raise DegenerateStateError("state has zero or non-finite norm")


def sweep_right(state: MpsState) -> tuple[MpsState, np.ndarray]:
    """Right-to-left LQ sweep; returns the gauged state and the per-state norm.

    Does not validate the norm, so callers can mask degenerate batch members.
    """
    ts = list(state.tensors)
    d = state.d
    for k in range(len(ts) - 1, 0, -1):
        t = ts[k]
        batch = t.shape[:-3]
        dl, dr = t.shape[-2:]
        m = np.swapaxes(t, -3, -2).reshape(batch + (dl, d * dr))
        l, q = lq_reduced(m)
        nb = q.shape[-2]
        ts[k] = np.swapaxes(q.reshape(batch + (nb, d, dr)), -3, -2)
        ts[k - 1] = ts[k - 1] @ l[..., None, :, :]
    out = MpsState(tuple(ts))
    return out, _norm_of_first(out)


def canonicalize_right(state: MpsState, keep_norm: bool = False) -> MpsState:
    """Right-to-left LQ sweep bringing every site into right-orthonormal form.

    The LQ factors use a positive diagonal, so the result is unique for
    full-rank bonds. Unless ``keep_norm`` is set the result is normalized,
    making site 1 right-orthonormal as well.
    """
    out, nrm = sweep_right(state)
    _check_norm(nrm)
    if keep_norm:
        return out
    return _scale_first(out, 1.0 / nrm)


def _scale_first(state: MpsState, factor) -> MpsState:
    factor = np.asarray(factor)
    ts = list(state.tensors)
    ts[0] = ts[0] * factor[..., None, None, None]
    return MpsState(tuple(ts))


def normalize(state: MpsState) -> MpsState:
    nrm = np.sqrt(np.real(norm_squared(state)))
    _check_norm(nrm)
    return _scale_first(state, 1.0 / nrm)


def right_canonical_error(state: MpsState) -> float:
    """Largest deviation of ``sum_s A^s A^s^dag`` from the identity over all sites."""
    err = 0.0
    for t in state.tensors:
        gram = np.einsum("...sab,...scb->...ac", t, np.conj(t))
        err = max(err, float(np.max(np.abs(gram - np.eye(gram.shape[-1])))))
    return err


def is_right_canonical(state: MpsState, tol: float = 1e-8) -> bool:
    return right_canonical_error(state) <= tol


# --- environments -----------------------------------------------------------


def apply_site_op(op: np.ndarray, tensor: np.ndarray) -> np.ndarray:
    return np.einsum("...st,...tab->...sab", op, tensor)


def transfer_left(env: np.ndarray, bra: np.ndarray, ket: np.ndarray) -> np.ndarray:
    """``sum_s bra^s^dag env ket^s``; ``env`` is indexed ``(bra, ket)``."""
    t = env[..., None, :, :] @ ket
    d, db, _ = bra.shape[-3:]
    batch = np.broadcast_shapes(bra.shape[:-3], t.shape[:-3])
    b = np.broadcast_to(bra, batch + bra.shape[-3:]).reshape(batch + (d * db, -1))
    t = np.broadcast_to(t, batch + t.shape[-3:]).reshape(batch + (d * db, -1))
    return dagger(b) @ t


def transfer_right(env: np.ndarray, bra: np.ndarray, ket: np.ndarray) -> np.ndarray:
    """``sum_s ket^s env bra^s^dag``; ``env`` is indexed ``(ket, bra)``."""
    t = ket @ env[..., None, :, :]
    return np.einsum("...sab,...scb->...ac", t, np.conj(bra))


def _ones(state: MpsState) -> np.ndarray:
    return np.ones(state.batch_shape + (1, 1), dtype=np.complex128)


def left_envs(state: MpsState) -> list[np.ndarray]:
    """``envs[k]`` contracts sites ``1..k`` of ``<psi|psi>``."""
    envs = [_ones(state)]
    for t in state.tensors:
        envs.append(transfer_left(envs[-1], t, t))
    return envs


def right_envs(state: MpsState) -> list[np.ndarray]:
    """``envs[k]`` contracts sites ``k+1..n`` (1-based) of ``<psi|psi>``."""
    n = state.n_sites
    envs = [None] * (n + 1)
    envs[n] = _ones(state)
    for k in range(n - 1, -1, -1):
        envs[k] = transfer_right(envs[k + 1], state.tensors[k], state.tensors[k])
    return envs


def _close(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """Trace of ``left @ right`` over the last two axes."""
    return np.einsum("...ab,...ba->...", left, right)


def norm_squared(state: MpsState) -> np.ndarray:
    env = _ones(state)
    for t in state.tensors:
        env = transfer_left(env, t, t)
    return env[..., 0, 0]


def overlap(bra: MpsState, ket: MpsState) -> np.ndarray:
    """``<bra|ket>`` without normalization."""
    env = np.ones(np.broadcast_shapes(bra.batch_shape, ket.batch_shape) + (1, 1), complex)
    for b, k in zip(bra.tensors, ket.tensors):
        env = transfer_left(env, b, k)
    return env[..., 0, 0]


# --- observables ------------------------------------------------------------


def _check_site(state: MpsState, site: int) -> int:
    if not 1 <= site <= state.n_sites:
        raise InvalidInputError(f"site {site} outside 1..{state.n_sites}")
    return site - 1


def expect_local(state: MpsState, op: SiteOperator):
    """``<psi|O|psi> / <psi|psi>`` for an on-site operator."""
    k = _check_site(state, op.site)
    lenv, renv = left_envs(state), right_envs(state)
    t = state.tensors[k]
    val = _close(transfer_left(lenv[k], t, apply_site_op(op.matrix, t)), renv[k + 1])
    return val / np.real(_close(lenv[-1], renv[-1]))


def expect_profile(state: MpsState, op: np.ndarray) -> np.ndarray:
    """``<O_m>`` for every site ``m``; last axis runs over sites."""
    lenv, renv = left_envs(state), right_envs(state)
    nrm = np.real(lenv[-1][..., 0, 0])
    vals = []
    for k, t in enumerate(state.tensors):
        vals.append(_close(transfer_left(lenv[k], t, apply_site_op(op, t)), renv[k + 1]))
    return np.stack(vals, axis=-1) / nrm[..., None]


def expect_two_point(state: MpsState, op_a: SiteOperator, op_b: SiteOperator):
    """``<psi|O_a O_b|psi> / <psi|psi>``."""
    ka, kb = _check_site(state, op_a.site), _check_site(state, op_b.site)
    if ka == kb:
        return expect_local(state, SiteOperator(op_a.matrix @ op_b.matrix, op_a.site))
    if ka > kb:
        # on different sites the operators commute
        (ka, ma), (kb, mb) = (kb, op_b.matrix), (ka, op_a.matrix)
    else:
        ma, mb = op_a.matrix, op_b.matrix
    lenv, renv = left_envs(state), right_envs(state)
    ts = state.tensors
    env = transfer_left(lenv[ka], ts[ka], apply_site_op(ma, ts[ka]))
    for k in range(ka + 1, kb):
        env = transfer_left(env, ts[k], ts[k])
    env = transfer_left(env, ts[kb], apply_site_op(mb, ts[kb]))
    return _close(env, renv[kb + 1]) / np.real(lenv[-1][..., 0, 0])


def two_point_profile(state: MpsState, ref_site: int, op: np.ndarray) -> np.ndarray:
    """``<O_ref O_m>`` for every site ``m`` (same-site entry is ``<O^2>``)."""
    r = _check_site(state, ref_site)
    ts = state.tensors
    n = state.n_sites
    lenv, renv = left_envs(state), right_envs(state)
    nrm = np.real(lenv[-1][..., 0, 0])
    vals = [None] * n
    t = ts[r]
    vals[r] = _close(transfer_left(lenv[r], t, apply_site_op(op @ op, t)), renv[r + 1])
    env = transfer_left(lenv[r], t, apply_site_op(op, t))
    for k in range(r + 1, n):
        vals[k] = _close(transfer_left(env, ts[k], apply_site_op(op, ts[k])), renv[k + 1])
        env = transfer_left(env, ts[k], ts[k])
    env = transfer_right(renv[r + 1], t, apply_site_op(op, t))
    for k in range(r - 1, -1, -1):
        vals[k] = _close(lenv[k], transfer_right(env, ts[k], apply_site_op(op, ts[k])))
        env = transfer_right(env, ts[k], ts[k])
    return np.stack(vals, axis=-1) / nrm[..., None]


def bond_energies(state: MpsState, model: LindbladModel) -> np.ndarray:
    """``<h_{n,n+1}>`` for every bond; last axis runs over bonds."""
    if model.n_sites != state.n_sites or model.d != state.d:
        raise PreconditionError("model and state sizes differ")
    d = state.d
    lenv, renv = left_envs(state), right_envs(state)
    nrm = np.real(lenv[-1][..., 0, 0])
    out = []
    for k, h in enumerate(model.nn_terms):
        theta = np.einsum("...sab,...tbc->...stac", state.tensors[k], state.tensors[k + 1])
        h4 = h.reshape(d, d, d, d)
        htheta = np.einsum("uvst,...stac->...uvac", h4, theta)
        t = lenv[k][..., None, None, :, :] @ htheta @ renv[k + 2][..., None, None, :, :]
        out.append(np.einsum("...uvac,...uvac->...", np.conj(theta), t))
    if not out:
        return np.zeros(state.batch_shape + (0,))
    return np.real(np.stack(out, axis=-1)) / nrm[..., None]


def expect_nn_hamiltonian(state: MpsState, model: LindbladModel):
    """``<K> = sum_n <h_{n,n+1}>`` (real for Hermitian bond terms)."""
    return np.sum(bond_energies(state, model), axis=-1)


# --- dense bridge -----------------------------------------------------------


def to_dense(state: MpsState, cap: int = DENSE_CAP) -> np.ndarray:
    """Amplitudes ``<s_1 ... s_n|psi>`` in lexicographic order (site 1 slowest)."""
    dim = state.d**state.n_sites
    if dim > cap:
        raise DenseCapExceeded(f"dense dimension {dim} exceeds cap {cap}")
    batch = state.batch_shape
    psi = state.tensors[0][..., :, 0, :]
    for t in state.tensors[1:]:
        psi = np.einsum("...xa,...sab->...xsb", psi, t)
        psi = psi.reshape(batch + (-1, t.shape[-1]))
    return psi[..., 0]


# --- binary encoding --------------------------------------------------------


def to_bytes(state: MpsState) -> bytes:
    """Header of little-endian uint64 counts, then tensors as little-endian complex128.

    Layout: ``n_sites, d, D_0..D_n`` followed by every site's ``d`` matrices in
    row-major order with real and imaginary parts interleaved.
    """
    if state.batch_shape:
        raise InvalidInputError("binary encoding is defined for single states only")
    header = np.array([state.n_sites, state.d, *state.bond_dims], dtype="<u8").tobytes()
    body = b"".join(np.ascontiguousarray(t, dtype="<c16").tobytes() for t in state.tensors)
    return header + body


def from_bytes(data: bytes) -> MpsState:
    if len(data) < 16:
        raise InvalidInputError("MPS encoding too short")
    n, d = struct.unpack_from("<QQ", data, 0)
    off = 16 + 8 * (n + 1)
    if n < 1 or len(data) < off:
        raise InvalidInputError("MPS encoding has a malformed header")
    dims = np.frombuffer(data, dtype="<u8", count=n + 1, offset=16).astype(int)
    tensors = []
    for k in range(n):
        count = d * dims[k] * dims[k + 1]
        if len(data) < off + 16 * count:
            raise InvalidInputError("MPS encoding truncated")
        arr = np.frombuffer(data, dtype="<c16", count=count, offset=off)
        tensors.append(arr.reshape(d, dims[k], dims[k + 1]).astype(np.complex128))
        off += 16 * count
    if off != len(data):
        raise InvalidInputError("MPS encoding has trailing bytes")
    return MpsState(tuple(tensors))
