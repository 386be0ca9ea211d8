"""Tangent-space projections for matrix product states.

Tangent vectors are stored in the left-gauge-fixed parametrization

    |Phi> = c |psi> + sum_n  A_L[1] ... A_L[n-1]  (V_n X_n)  A_R[n+1] ... A_R[N]

where ``A_L`` / ``A_R`` are the left / right orthonormal gauges of the base
state and ``V_n`` spans the orthogonal complement of ``A_L[n]`` (stacked as a
``d*D_left x D_right`` isometry). The blocks are mutually orthogonal and
orthogonal to ``|psi>``, so the tangent-space metric is the identity on
``(c, X_1, ..., X_N)`` and the least-squares fit of ``O|psi>`` is a plain
projection: ``c = <psi|O|psi>`` and ``X_n = V_n^dag F_n`` with ``F_n`` the
effective (environment-contracted) vector of ``O|psi>`` at site ``n``.

The only inversions happen when the tangent vector is mapped back onto the
raw right-canonical parameters (:func:`apply_tangent`), which needs the
inverse of the bond matrices ``C_n`` (square roots of the reduced density
matrices); these use a cutoff pseudo-inverse.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidInputError, PreconditionError
from .linalg import DEFAULT_CUTOFF, dagger, lq_reduced, pseudo_inverse, qr_positive, qr_reduced
from .models import LindbladModel, SiteOperator
from .mps import MpsState, is_right_canonical, to_dense

_OP_RANK_TOL = 1e-14


@dataclass(frozen=True, eq=False)
class TangentFrame:
    """Mixed-gauge data of a normalized right-canonical state.

    ``left[n] @ centers[n+1] == centers[n] @ state.tensors[n]`` (per physical
    index) and ``centers[0] == centers[N] == 1``.
    """

    state: MpsState
    left: tuple[np.ndarray, ...]
    centers: tuple[np.ndarray, ...]
    null: tuple[np.ndarray, ...]


def tangent_frame(state: MpsState) -> TangentFrame:
    """Left-canonical sweep with complete QR, giving ``A_L``, ``C`` and null spaces."""
    d = state.d
    batch = state.batch_shape
    c = np.ones(batch + (1, 1), dtype=np.complex128)
    left, centers, null = [], [c], []
    for t in state.tensors:
        dl, dr = t.shape[-2:]
        if dr > d * dl:
            raise PreconditionError("bond dimension exceeds d times the left bond")
        m = (c[..., None, :, :] @ t).reshape(batch + (d * dl, dr))
        q, r = qr_positive(m, complete=True)
        left.append(q[..., :dr].reshape(batch + (d, dl, dr)))
        null.append(q[..., dr:])
        c = r[..., :dr, :]
        centers.append(c)
    return TangentFrame(state, tuple(left), tuple(centers), tuple(null))


@dataclass(frozen=True, eq=False)
class TangentVector:
    """``c |psi> + sum_n Phi_n(V_n X_n)`` anchored at ``frame.state``."""

    frame: TangentFrame
    norm_coeff: np.ndarray
    blocks: tuple[np.ndarray, ...]

    @property
    def base_state(self) -> MpsState:
        return self.frame.state

    def site_tensors(self) -> list[np.ndarray]:
        """Mixed-gauge site tensors ``V_n X_n`` with shape ``(..., d, Dl, Dr)``."""
        out = []
        for v, x, al in zip(self.frame.null, self.blocks, self.frame.left):
            b = v @ x
            out.append(b.reshape(b.shape[:-2] + al.shape[-3:]))
        return out

    def inner(self, other: "TangentVector") -> np.ndarray:
        """``<self|other>``; Euclidean in the gauge-fixed coordinates."""
        _same_anchor(self.frame, other.frame)
        val = np.conj(self.norm_coeff) * other.norm_coeff
        for x, y in zip(self.blocks, other.blocks):
            val = val + np.einsum("...ab,...ab->...", np.conj(x), y)
        return val

    def norm(self) -> np.ndarray:
        return np.sqrt(np.real(self.inner(self)))

    def scaled(self, factor) -> "TangentVector":
        f = np.asarray(factor)
        return TangentVector(
            self.frame,
            self.norm_coeff * f,
            tuple(x * f[..., None, None] for x in self.blocks),
        )

    def __add__(self, other: "TangentVector") -> "TangentVector":
        _same_anchor(self.frame, other.frame)
        return TangentVector(
            self.frame,
            self.norm_coeff + other.norm_coeff,
            tuple(x + y for x, y in zip(self.blocks, other.blocks)),
        )

    def to_dense(self, cap: int = 2**14) -> np.ndarray:
        """Dense vector of ``|Phi>`` (small chains only)."""
        fr = self.frame
        out = self.norm_coeff[..., None] * to_dense(fr.state, cap)
        for n, b in enumerate(self.site_tensors()):
            ts = list(fr.left[:n]) + [b] + list(fr.state.tensors[n + 1 :])
            out = out + to_dense(MpsState(tuple(ts)), cap)
        return out


def _same_anchor(a: TangentFrame, b: TangentFrame) -> None:
    if a is b or a.state is b.state:
        return
    if a.state.bond_dims != b.state.bond_dims or not all(
        np.array_equal(x, y) for x, y in zip(a.state.tensors, b.state.tensors)
    ):
        raise PreconditionError("tangent vectors are anchored at different states")


# --- operators as MPOs ------------------------------------------------------


def split_bond_term(h: np.ndarray, d: int) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Operator-Schmidt decomposition ``h = sum_k P_k (x) R_k``."""
    m = h.reshape(d, d, d, d).transpose(0, 2, 1, 3).reshape(d * d, d * d)
    u, s, vh = np.linalg.svd(m)
    if s[0] == 0:
        return [], []
    keep = s > _OP_RANK_TOL * s[0]
    sq = np.sqrt(s[keep])
    ps = [(u[:, k] * sq[k]).reshape(d, d) for k in range(int(keep.sum()))]
    rs = [(vh[k, :] * sq[k]).reshape(d, d) for k in range(int(keep.sum()))]
    return ps, rs


class LocalOperatorMpo:
    """MPO of ``sum_bonds scale * h_b + sum_sites o_n`` with fixed bond terms.

    The bond terms are decomposed once; the on-site terms, which may carry a
    batch axis, are supplied per call of :meth:`tensors`.
    """

    def __init__(self, n_sites: int, d: int, bond_terms: Sequence[np.ndarray | None]):
        self.n_sites = n_sites
        self.d = d
        self._splits = [
            split_bond_term(h, d) if h is not None else ([], []) for h in bond_terms
        ]
        ranks = [len(p) for p, _ in self._splits]
        self._widths = [1] + [2 + r for r in ranks] + [1]

    def tensors(self, onsite: Sequence[np.ndarray | None], bond_scale=1.0) -> list[np.ndarray]:
        """Site tensors ``W[..., w_left, w_right, s_out, s_in]``."""
        n, d = self.n_sites, self.d
        batch = ()
        for o in onsite:
            if o is not None:
                batch = np.broadcast_shapes(batch, np.shape(o)[:-2])
        scale = np.asarray(bond_scale, dtype=np.complex128)
        batch = np.broadcast_shapes(batch, scale.shape)
        eye = np.eye(d, dtype=np.complex128)
        out = []
        for k in range(n):
            wl = 2 + len(self._splits[k - 1][0]) if k > 0 else 2
            wr = 2 + len(self._splits[k][0]) if k < n - 1 else 2
            w = np.zeros(batch + (wl, wr, d, d), dtype=np.complex128)
            w[..., 0, 0, :, :] = eye
            w[..., wl - 1, wr - 1, :, :] = eye
            if onsite[k] is not None:
                w[..., 0, wr - 1, :, :] = onsite[k]
            if k < n - 1:
                for j, p in enumerate(self._splits[k][0]):
                    w[..., 0, 1 + j, :, :] = scale[..., None, None] * p
            if k > 0:
                for j, r in enumerate(self._splits[k - 1][1]):
                    w[..., 1 + j, wr - 1, :, :] = r
            if k == 0:
                w = w[..., :1, :, :, :]
            if k == n - 1:
                w = w[..., :, -1:, :, :]
            out.append(w)
        return out


# The contractions below are written as reshapes plus batched matmul, which is
# much faster than ellipsis einsum for stacks of small matrices. Index names:
# left env (bra a, mpo w, ket b), ket (t, b, c), mpo (w, v, s, t), bra (s, a, x).


def _w_in_out(w):
    """MPO tensor as a ``(w*t, v*s)`` matrix."""
    wl, wr, d = w.shape[-4], w.shape[-3], w.shape[-2]
    return np.moveaxis(w, -1, -3).reshape(w.shape[:-4] + (wl * d, wr * d))


def _w_out_in(w):
    """MPO tensor as a ``(w*s, v*t)`` matrix."""
    wl, wr, d = w.shape[-4], w.shape[-3], w.shape[-2]
    return np.swapaxes(w, -3, -2).reshape(w.shape[:-4] + (wl * d, wr * d))


def _env_left(env, bra, w, ket):
    a, wl, b = env.shape[-3:]
    d, _, c = ket.shape[-3:]
    wr = w.shape[-3]
    x = bra.shape[-1]
    t1 = env.reshape(env.shape[:-3] + (a * wl, b)) @ np.swapaxes(ket, -3, -2).reshape(
        ket.shape[:-3] + (b, d * c)
    )
    t1 = np.swapaxes(t1.reshape(t1.shape[:-2] + (a, wl, d, c)), -3, -1)  # a c t w
    t1 = np.swapaxes(t1, -2, -1).reshape(t1.shape[:-4] + (a * c, wl * d))  # a c w t
    t2 = (t1 @ _w_in_out(w)).reshape(t1.shape[:-2] + (a, c, wr, d))  # a c v s
    t2 = np.moveaxis(t2, -1, -4).reshape(t2.shape[:-4] + (d * a, c, wr))  # (s a) c v
    t2 = np.swapaxes(t2, -2, -1).reshape(t2.shape[:-3] + (d * a, wr * c))
    bra_h = np.swapaxes(np.conj(bra).reshape(bra.shape[:-3] + (d * bra.shape[-2], x)), -2, -1)
    return (bra_h @ t2).reshape(t2.shape[:-2] + (x, wr, c))


def _env_right(env, bra, w, ket):
    x, wr, y = env.shape[-3:]
    d, b, _ = ket.shape[-3:]
    wl = w.shape[-4]
    a = bra.shape[-2]
    t1 = ket.reshape(ket.shape[:-3] + (d * b, y)) @ np.swapaxes(
        env.reshape(env.shape[:-3] + (x * wr, y)), -2, -1
    )  # (t b) (x v)
    t1 = t1.reshape(t1.shape[:-2] + (d, b, x, wr))
    t1 = np.moveaxis(t1, -1, -4)  # (t b x v) -> (v t b x)
    t1 = t1.reshape(t1.shape[:-4] + (wr * d, b * x))
    t2 = (_w_out_in(w) @ t1).reshape(t1.shape[:-2] + (wl, d, b, x))  # w s b x
    t2 = np.swapaxes(t2, -1, -2).reshape(t2.shape[:-4] + (wl, d * x, b))  # w (s x) b
    t2 = np.swapaxes(t2, -3, -2).reshape(t2.shape[:-3] + (d * x, wl * b))
    bra_c = np.moveaxis(np.conj(bra), -2, -3).reshape(bra.shape[:-3] + (a, d * x))
    return (bra_c @ t2).reshape(t2.shape[:-2] + (a, wl, b))


def _effective(env_l, w, ket, env_r):
    a, wl, c = env_l.shape[-3:]
    d, _, y = ket.shape[-3:]
    b, wr, _ = env_r.shape[-3:]
    t1 = env_l.reshape(env_l.shape[:-3] + (a * wl, c)) @ np.swapaxes(ket, -3, -2).reshape(
        ket.shape[:-3] + (c, d * y)
    )
    t1 = np.swapaxes(t1.reshape(t1.shape[:-2] + (a, wl, d, y)), -3, -1)  # a y t w
    t1 = np.swapaxes(t1, -2, -1).reshape(t1.shape[:-4] + (a * y, wl * d))  # a y w t
    t2 = (t1 @ _w_in_out(w)).reshape(t1.shape[:-2] + (a, y, wr, d))  # a y v s
    t2 = np.moveaxis(t2, -1, -4)  # s a y v
    t2 = np.swapaxes(t2, -2, -1).reshape(t2.shape[:-4] + (d * a, wr * y))
    er = np.swapaxes(env_r.reshape(env_r.shape[:-3] + (b, wr * y)), -2, -1)
    return (t2 @ er).reshape(t2.shape[:-2] + (d, a, b))


def project_mpo(frame: TangentFrame, mpo: Sequence[np.ndarray]) -> TangentVector:
    """Orthogonal projection of ``O|psi>`` onto the tangent space at ``frame.state``."""
    state = frame.state
    ts = state.tensors
    n = state.n_sites
    batch = np.broadcast_shapes(state.batch_shape, mpo[0].shape[:-4])
    one = np.ones(batch + (1, 1, 1), dtype=np.complex128)
    renv = [None] * (n + 1)
    renv[n] = one
    for k in range(n - 1, 0, -1):
        renv[k] = _env_right(renv[k + 1], ts[k], mpo[k], ts[k])
    env = one
    blocks = []
    coeff = None
    for k in range(n):
        f = _effective(env, mpo[k], ts[k], renv[k + 1])
        if k == 0:
            coeff = np.einsum("...sab,...sab->...", np.conj(ts[0]), f)
        dl, dr = f.shape[-2:]
        fs = f.reshape(f.shape[:-3] + (state.d * dl, dr))
        blocks.append(dagger(frame.null[k]) @ fs)
        if k < n - 1:
            env = _env_left(env, frame.left[k], mpo[k], ts[k])
    return TangentVector(frame, coeff, tuple(blocks))


# --- public projections -----------------------------------------------------


def _require_canonical(state: MpsState) -> None:
    if not is_right_canonical(state, 1e-8):
        raise PreconditionError("state must be normalized and right-canonical")


def q_operator_mpo(model: LindbladModel) -> list[np.ndarray]:
    """MPO of ``Q = -i K - 1/2 sum_alpha L^dag L``."""
    builder = LocalOperatorMpo(model.n_sites, model.d, model.nn_terms)
    onsite = [-0.5 * m for m in model.onsite_damping()]
    return builder.tensors(onsite, bond_scale=-1j)


def compute_b_q(state: MpsState, model: LindbladModel) -> TangentVector:
    """Least-squares tangent approximation of ``Q|psi>``."""
    if model.n_sites != state.n_sites or model.d != state.d:
        raise PreconditionError("model and state sizes differ")
    _require_canonical(state)
    return project_mpo(tangent_frame(state), q_operator_mpo(model))


def compute_b_alpha(state: MpsState, l_op: SiteOperator) -> TangentVector:
    """Tangent representation of ``L|psi>`` for an on-site ``L`` (exact, not approximate)."""
    if l_op.matrix.shape != (state.d, state.d):
        raise InvalidInputError("operator dimension does not match the state")
    if not 1 <= l_op.site <= state.n_sites:
        raise InvalidInputError(f"site {l_op.site} outside 1..{state.n_sites}")
    _require_canonical(state)
    return project_mpo(tangent_frame(state), site_operator_mpo(state.n_sites, state.d, l_op))


def site_operator_mpo(n_sites: int, d: int, op: SiteOperator) -> list[np.ndarray]:
    onsite = [None] * n_sites
    onsite[op.site - 1] = op.matrix
    return LocalOperatorMpo(n_sites, d, [None] * (n_sites - 1)).tensors(onsite)


# --- parameter updates ------------------------------------------------------


def _check_anchor(state: MpsState, tangent: TangentVector) -> None:
    base = tangent.base_state
    if base is state:
        return
    if base.bond_dims != state.bond_dims or not all(
        np.array_equal(a, b) for a, b in zip(base.tensors, state.tensors)
    ):
        raise PreconditionError("tangent vector is not anchored at this state")


def raw_tangent_tensors(tangent: TangentVector, cutoff: float = DEFAULT_CUTOFF) -> list[np.ndarray]:
    """Tangent direction in the raw right-canonical parameters ``A_n``.

    Left of site ``n`` the raw tensors equal ``A_L ... A_L C_{n-1}``, so the
    raw update at site ``n`` is ``C_{n-1}^+ V_n X_n``; the norm direction is
    carried by site 1.
    """
    fr = tangent.frame
    raw = []
    for k, b in enumerate(tangent.site_tensors()):
        if k == 0:
            raw.append(b + tangent.norm_coeff[..., None, None, None] * fr.state.tensors[0])
        else:
            cinv = pseudo_inverse(fr.centers[k], cutoff)
            raw.append(cinv[..., None, :, :] @ b)
    return raw


def apply_tangent(state: MpsState, tangent: TangentVector, scale, cutoff: float = DEFAULT_CUTOFF) -> MpsState:
    """First-order parameter update ``a + scale * b`` (no re-projection, no normalization)."""
    _check_anchor(state, tangent)
    s = np.asarray(scale, dtype=np.complex128)
    if not np.any(s):
        return state
    raw = raw_tangent_tensors(tangent, cutoff)
    return MpsState(
        tuple(a + s[..., None, None, None] * b for a, b in zip(state.tensors, raw))
    )


def apply_tangent_exact(state: MpsState, tangent: TangentVector, scale) -> tuple[MpsState, np.ndarray]:
    """Exact vector sum ``|psi> + scale |Phi>`` re-expressed at the same bond dimensions.

    Only defined when the bond dimensions are the full-rank profile, where the
    manifold is the whole Hilbert space and no truncation occurs. Returns the
    right-canonical (unnormalized) result and its norm.
    """
    _check_anchor(state, tangent)
    ts, nrm = exact_sum_tensors(state, tangent, scale)
    return MpsState(ts), nrm


def exact_sum_tensors(state: MpsState, tangent: TangentVector, scale):
    """Tensors and norm of :func:`apply_tangent_exact` without validation (may be non-finite)."""
    if not state.is_full_rank():
        raise PreconditionError("exact tangent update requires full-rank bond dimensions")
    fr = tangent.frame
    n, d = state.n_sites, state.d
    s = np.asarray(scale, dtype=np.complex128)
    batch = np.broadcast_shapes(state.batch_shape, s.shape, tangent.norm_coeff.shape)
    sb = [s[..., None, None, None] * b for b in tangent.site_tensors()]
    lead = (1 + s * tangent.norm_coeff)[..., None, None, None]
    if n == 1:
        ts = [np.broadcast_to(lead * state.tensors[0] + sb[0], batch + (d, 1, 1))]
    else:
        ts = []
        for k in range(n):
            al = np.broadcast_to(fr.left[k], batch + fr.left[k].shape[-3:])
            ar = np.broadcast_to(state.tensors[k], batch + state.tensors[k].shape[-3:])
            b = np.broadcast_to(sb[k], batch + sb[k].shape[-3:])
            if k == 0:
                ts.append(np.concatenate([al, b], axis=-1))
            elif k == n - 1:
                top = lead * (al @ fr.centers[n][..., None, :, :]) + b
                ts.append(np.concatenate([top, ar], axis=-2))
            else:
                zero = np.zeros_like(al)
                upper = np.concatenate([al, b], axis=-1)
                lower = np.concatenate([zero, ar], axis=-1)
                ts.append(np.concatenate([upper, lower], axis=-2))
    return _recanonicalize(ts, d, batch, state.bond_dims)


def _recanonicalize(ts, d, batch, target_dims):
    """Left QR sweep then right LQ sweep; exact (no truncation) at full-rank dims."""
    ts = list(ts)
    n = len(ts)
    r = None
    for k in range(n):
        t = ts[k] if r is None else r[..., None, :, :] @ ts[k]
        dl, dr = t.shape[-2:]
        if k == n - 1:
            ts[k] = t
            break
        q, r = qr_reduced(t.reshape(batch + (d * dl, dr)))
        ts[k] = q.reshape(batch + (d, dl, q.shape[-1]))
    for k in range(n - 1, 0, -1):
        t = ts[k]
        dl, dr = t.shape[-2:]
        m = np.swapaxes(t, -3, -2).reshape(batch + (dl, d * dr))
        l, q = lq_reduced(m)
        ts[k] = np.swapaxes(q.reshape(batch + (q.shape[-2], d, dr)), -3, -2)
        ts[k - 1] = ts[k - 1] @ l[..., None, :, :]
    dims = (1,) + tuple(t.shape[-1] for t in ts)
    if dims != tuple(target_dims):
        raise PreconditionError(f"re-canonicalized bond dims {dims} != {tuple(target_dims)}")
    nrm = np.sqrt(np.sum(np.abs(ts[0]) ** 2, axis=(-3, -2, -1)))
    return tuple(ts), nrm
