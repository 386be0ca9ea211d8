"""Dense reference implementations for small chains.

Everything here works on explicit state vectors or density matrices and is
independent of the MPS machinery (apart from reading MPS parameters in
:func:`brute_force_tangent_argmin`), so it can validate the variational code.
"""

from __future__ import annotations

import numpy as np
from scipy.sparse.linalg import expm_multiply

from .errors import DenseCapExceeded, InvalidInputError
from .linalg import pseudo_inverse
from .models import PAULI, LindbladModel, embed
from .mps import MpsState, to_dense
from .observables import ObservableSeries, ObservableSpec
from .sde import TrajectoryConfig, WienerIncrementSet

RHO_CAP = 2**7
EXPM_CAP = 64


def _check_rho_dim(model: LindbladModel, cap: int) -> int:
    dim = model.d**model.n_sites
    if dim > cap:
        raise DenseCapExceeded(f"density-matrix dimension {dim} exceeds cap {cap}")
    return dim


class DenseLindblad:
    """Dense ``K``, ``L_alpha`` and ``Q`` of a model (precomputed once)."""

    def __init__(self, model: LindbladModel, cap: int = RHO_CAP):
        self.dim = _check_rho_dim(model, cap)
        self.model = model
        self.k = model.dense_hamiltonian()
        self.ls = model.dense_lindblad_ops()
        self.q = model.dense_q()

    def rhs(self, rho: np.ndarray) -> np.ndarray:
        """``Q rho + rho Q^dag + sum_alpha L rho L^dag``."""
        out = self.q @ rho
        out = out + np.conj(np.swapaxes(out, -1, -2))
        for lop in self.ls:
            out = out + lop @ rho @ lop.conj().T
        return out

    def rhs_commutator(self, rho: np.ndarray) -> np.ndarray:
        """``-i[K, rho] - 1/2 sum_alpha (L^dag L rho + rho L^dag L - 2 L rho L^dag)``."""
        out = -1j * (self.k @ rho - rho @ self.k)
        for lop in self.ls:
            ll = lop.conj().T @ lop
            out = out - 0.5 * (ll @ rho + rho @ ll - 2 * lop @ rho @ lop.conj().T)
        return out

    def liouvillian(self) -> np.ndarray:
        """Superoperator acting on row-major ``vec(rho)``."""
        eye = np.eye(self.dim)
        sup = np.kron(self.q, eye) + np.kron(eye, np.conj(self.q))
        for lop in self.ls:
            sup += np.kron(lop, np.conj(lop))
        return sup


def lindblad_rhs(rho, model: LindbladModel, form: str = "q") -> np.ndarray:
    """Right-hand side of the master equation, in ``q`` or ``commutator`` form."""
    rho = np.asarray(rho, dtype=np.complex128)
    dense = DenseLindblad(model)
    if rho.shape[-2:] != (dense.dim, dense.dim):
        raise InvalidInputError(f"rho must be {dense.dim}x{dense.dim}")
    if form == "q":
        return dense.rhs(rho)
    if form == "commutator":
        return dense.rhs_commutator(rho)
    raise InvalidInputError("form must be 'q' or 'commutator'")


def pure_density_matrix(psi) -> np.ndarray:
    psi = np.asarray(psi, dtype=np.complex128)
    psi = psi / np.linalg.norm(psi)
    return np.outer(psi, np.conj(psi))


def density_matrix_defects(rho) -> dict[str, float]:
    """Hermiticity error, trace error and most negative eigenvalue."""
    rho = np.asarray(rho)
    herm = float(np.max(np.abs(rho - rho.conj().T)))
    tr = float(abs(np.trace(rho) - 1))
    mineig = float(np.min(np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))))
    return {"hermiticity": herm, "trace": tr, "min_eigenvalue": mineig}


def integrate_master(rho0, model: LindbladModel, t_final: float, dt: float, record_every: int = 1):
    """Classical RK4 integration of the master equation.

    Returns:
        ``(times, rhos)`` with ``rhos`` of shape ``(n_records, dim, dim)``;
        the step count is ``ceil(t_final / dt)`` as for trajectories.
    """
    dense = DenseLindblad(model)
    rho = np.array(rho0, dtype=np.complex128)
    if rho.shape != (dense.dim, dense.dim):
        raise InvalidInputError(f"rho0 must be {dense.dim}x{dense.dim}")
    steps = TrajectoryConfig(dt=dt, t_final=t_final, record_every=record_every).record_steps()
    n_steps = int(steps[-1])
    out = np.empty((len(steps), dense.dim, dense.dim), dtype=np.complex128)
    out[0] = rho
    slot = 1
    f = dense.rhs
    for step in range(1, n_steps + 1):
        k1 = f(rho)
        k2 = f(rho + 0.5 * dt * k1)
        k3 = f(rho + 0.5 * dt * k2)
        k4 = f(rho + dt * k3)
        rho = rho + (dt / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        if slot < len(steps) and steps[slot] == step:
            out[slot] = rho
            slot += 1
    return steps * dt, out


def propagate_expm(rho0, model: LindbladModel, times) -> np.ndarray:
    """``exp(t L) rho0`` at the given times via the sparse-action exponential (dim <= 64)."""
    dense = DenseLindblad(model, cap=EXPM_CAP)
    sup = dense.liouvillian()
    vec = np.asarray(rho0, dtype=np.complex128).reshape(-1)
    times = np.asarray(times, dtype=float)
    out = np.empty((len(times), dense.dim, dense.dim), dtype=np.complex128)
    for i, t in enumerate(times):
        out[i] = expm_multiply(sup * t, vec).reshape(dense.dim, dense.dim)
    return out


# --- dense observables ------------------------------------------------------


def dense_observable(spec: ObservableSpec, rho: np.ndarray, model: LindbladModel) -> np.ndarray:
    """Value of ``spec`` on a density matrix (or a stack of them)."""
    n, d = model.n_sites, model.d
    if spec.kind == "tomography":
        return rho.reshape(rho.shape[:-2] + (-1,))
    if spec.kind == "energy":
        ops = [model.dense_hamiltonian()]
    elif spec.kind == "two_point":
        p = PAULI[spec.op]
        ref = embed(p, spec.ref_site, n, d)
        ops = [ref @ embed(p, m, n, d) for m in range(1, n + 1)]
    else:
        p = PAULI[spec.kind[1]]
        ops = [embed(p, m, n, d) for m in range(1, n + 1)]
    return np.stack([np.einsum("ij,...ji->...", o, rho) for o in ops], axis=-1)


def master_series(rho0, model: LindbladModel, cfg: TrajectoryConfig) -> ObservableSeries:
    """Oracle observables on the trajectory time grid of ``cfg``."""
    times, rhos = integrate_master(rho0, model, cfg.t_final, cfg.dt, cfg.record_every)
    values = {s.name: dense_observable(s, rhos, model) for s in cfg.observables}
    labels = {s.name: s.labels(model.n_sites, model.d) for s in cfg.observables}
    return ObservableSeries(times, values, labels)


# --- dense quantum state diffusion -----------------------------------------


def _noise_array(shared_noise, n_steps: int, n_channels: int) -> np.ndarray:
    if isinstance(shared_noise, np.ndarray):
        dw = shared_noise
    else:
        dw = np.array([w.dw if isinstance(w, WienerIncrementSet) else w for w in shared_noise])
    if dw.shape[0] != n_steps or dw.shape[-1] != n_channels:
        raise InvalidInputError(
            f"noise must have {n_steps} steps of {n_channels} channels, got shape {dw.shape}"
        )
    return dw.astype(np.complex128)


def dense_qsd_trajectory(
    psi0,
    model: LindbladModel,
    cfg: TrajectoryConfig,
    shared_noise,
    return_states: bool = False,
    cap: int = 2**14,
):
    """Euler-Maruyama on the full Hilbert space with per-step renormalization.

    ``dpsi = (Q + conj(<L_alpha>) L_alpha) psi dt + L_alpha psi dw_alpha``.
    ``psi0`` may carry leading batch axes; ``shared_noise`` is a sequence of
    :class:`WienerIncrementSet` or an array ``(n_steps, batch..., n_channels)``.

    Returns:
        The recorded :class:`ObservableSeries` (values with batch axes first),
        plus the normalized state after every step when ``return_states``.
    """
    n, d = model.n_sites, model.d
    if d**n > cap:
        raise DenseCapExceeded(f"dense dimension {d**n} exceeds cap {cap}")
    psi = np.array(psi0, dtype=np.complex128)
    psi = psi / np.linalg.norm(psi, axis=-1, keepdims=True)
    dw = _noise_array(shared_noise, cfg.n_steps, model.n_channels)
    q = model.dense_q(cap)
    ls = model.dense_lindblad_ops(cap)
    rec = cfg.record_steps()
    batch = psi.shape[:-1]
    values = {
        s.name: np.empty(batch + (len(rec), len(s.labels(n, d))), dtype=np.complex128)
        for s in cfg.observables
    }

    def record(slot: int) -> None:
        rho = psi[..., :, None] * np.conj(psi[..., None, :])
        for s in cfg.observables:
            values[s.name][..., slot, :] = dense_observable(s, rho, model)

    states = [psi.copy()] if return_states else None
    record(0)
    slot = 1
    for step in range(1, cfg.n_steps + 1):
        dpsi = cfg.dt * (psi @ q.T)
        for a, lop in enumerate(ls):
            lpsi = psi @ lop.T
            lbar = np.conj(np.sum(np.conj(psi) * lpsi, axis=-1))
            dpsi = dpsi + (lbar * cfg.dt + dw[step - 1, ..., a])[..., None] * lpsi
        psi = psi + dpsi
        psi = psi / np.linalg.norm(psi, axis=-1, keepdims=True)
        if return_states:
            states.append(psi.copy())
        if slot < len(rec) and rec[slot] == step:
            record(slot)
            slot += 1
    labels = {s.name: s.labels(n, d) for s in cfg.observables}
    series = ObservableSeries(rec * cfg.dt, values, labels)
    if return_states:
        return series, np.stack(states)
    return series


# --- brute-force tangent least squares -------------------------------------


def finite_difference_basis(state: MpsState, h: float = 1e-6) -> np.ndarray:
    """Columns ``d|psi>/da^j`` for every complex MPS parameter (central differences)."""
    if state.batch_shape:
        raise InvalidInputError("single states only")
    cols = []
    tensors = [t.copy() for t in state.tensors]
    for k, t in enumerate(tensors):
        for idx in np.ndindex(t.shape):
            orig = t[idx]
            t[idx] = orig + h
            plus = to_dense(MpsState(tuple(tensors)))
            t[idx] = orig - h
            minus = to_dense(MpsState(tuple(tensors)))
            t[idx] = orig
            cols.append((plus - minus) / (2 * h))
    return np.stack(cols, axis=1)


def brute_force_tangent_argmin(
    state: MpsState, target, h: float = 1e-6, cutoff: float = 1e-10
):
    """Least-squares tangent fit of a dense target through the raw metric.

    Builds ``J = [d psi / d a^j]`` by finite differences, forms the metric
    ``g = J^dag J`` and solves the normal equations with a cutoff
    pseudo-inverse (the MPS gauge freedom makes ``g`` singular).

    Returns:
        ``(phi, residual_norm, basis)`` with ``phi`` the optimal dense tangent vector.
    """
    target = np.asarray(target, dtype=np.complex128)
    jac = finite_difference_basis(state, h)
    metric = jac.conj().T @ jac
    coeff = pseudo_inverse(metric, cutoff) @ (jac.conj().T @ target)
    phi = jac @ coeff
    return phi, float(np.linalg.norm(target - phi)), jac
