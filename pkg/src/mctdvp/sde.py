"""Euler-Maruyama integration of the stochastic variational equation.

One step advances the MPS parameters by

    da = (b_Q + sum_alpha conj(<L_alpha>) b_alpha) dt + sum_alpha b_alpha dw_alpha

and then renormalizes and restores the right-canonical gauge. Because the
tangent projection is linear in the operator, all terms are projected at once
as the single operator ``dt Q + sum_alpha (conj(<L_alpha>) dt + dw_alpha) L_alpha``.

Noise contract: each step consumes ``2 * n_channels`` standard normals from the
trajectory's generator, ordered ``u_1, v_1, u_2, v_2, ...``, and forms
``dw_alpha = sqrt(dt / 2) (u_alpha + i v_alpha)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, PreconditionError, TrajectoryFailure
from .linalg import DEFAULT_CUTOFF
from .models import LindbladModel
from .mps import MpsState, broadcast_state, is_right_canonical, sweep_right
from .observables import ObservableSeries, ObservableSpec
from .tdvp import LocalOperatorMpo, exact_sum_tensors, project_mpo, raw_tangent_tensors, tangent_frame

UPDATE_MODES = ("auto", "exact", "raw")
# norms below this count as a collapsed trajectory
_MIN_NORM = 1e-100
# steps of noise drawn per generator call
_NOISE_BLOCK = 256


@dataclass(frozen=True)
class WienerIncrementSet:
    """Complex increments ``dw`` (last axis over channels) for one step of size ``dt``."""

    dw: np.ndarray
    dt: float

    @property
    def n_channels(self) -> int:
        return self.dw.shape[-1]


def increments_from_normals(z: np.ndarray, dt: float) -> np.ndarray:
    """Map interleaved normals ``(..., 2 n)`` to complex increments ``(..., n)``."""
    z = np.asarray(z, dtype=np.float64)
    return math.sqrt(dt / 2) * (z[..., 0::2] + 1j * z[..., 1::2])


def sample_wiener(n_channels: int, dt: float, rng: np.random.Generator) -> WienerIncrementSet:
    """Draw one step of complex Wiener increments (exactly ``2 n_channels`` normals)."""
    if not dt > 0:
        raise InvalidInputError("dt must be positive")
    return WienerIncrementSet(increments_from_normals(rng.standard_normal(2 * n_channels), dt), dt)


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator used for every trajectory."""
    return np.random.Generator(np.random.Philox(key=int(seed) % 2**64))


@dataclass(frozen=True)
class TrajectoryConfig:
    """Integration controls for one trajectory.

    Attributes:
        dt: Step size.
        t_final: Final time; the run takes ``ceil(t_final / dt)`` steps.
        seed: 64-bit seed of the trajectory's noise stream.
        observables: Quantities recorded along the way.
        record_every: Record every this many steps (the last step is always recorded).
        renormalize_every_step: When false, the log-norm of the unnormalized
            linear evolution is tracked and recorded as ``log_norm``; the
            working state itself is always kept normalized.
        canonicalize_every_step: Must stay true; the projection needs the gauge.
        cutoff: Relative pseudo-inverse cutoff.
        update: ``exact`` re-sums the tangent step losslessly (full-rank bonds
            only), ``raw`` adds the step to the parameters, ``auto`` picks exact
            whenever allowed.
    """

    dt: float
    t_final: float
    seed: int = 0
    observables: tuple[ObservableSpec, ...] = ()
    record_every: int = 1
    renormalize_every_step: bool = True
    canonicalize_every_step: bool = True
    cutoff: float = DEFAULT_CUTOFF
    update: str = "auto"

    def __post_init__(self) -> None:
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise InvalidInputError("dt must be positive")
        if not (self.t_final >= self.dt and math.isfinite(self.t_final)):
            raise InvalidInputError("t_final must be at least dt")
        if self.record_every < 1:
            raise InvalidInputError("record_every must be >= 1")
        if self.update not in UPDATE_MODES:
            raise InvalidInputError(f"update must be one of {UPDATE_MODES}")
        if not self.canonicalize_every_step:
            raise InvalidInputError(
                "canonicalize_every_step=False is unsupported: the tangent projection "
                "requires a right-canonical state at every step"
            )
        object.__setattr__(self, "observables", tuple(self.observables))

    @property
    def n_steps(self) -> int:
        ratio = self.t_final / self.dt
        return max(1, int(math.ceil(ratio - 1e-9 * max(1.0, ratio))))

    def record_steps(self) -> np.ndarray:
        steps = list(range(0, self.n_steps + 1, self.record_every))
        if steps[-1] != self.n_steps:
            steps.append(self.n_steps)
        return np.asarray(steps)


class StepKernel:
    """Batched Euler step for a fixed model; caches the operator decomposition."""

    def __init__(self, model: LindbladModel, update: str = "auto", cutoff: float = DEFAULT_CUTOFF):
        if update not in UPDATE_MODES:
            raise InvalidInputError(f"update must be one of {UPDATE_MODES}")
        self.model = model
        self.update = update
        self.cutoff = cutoff
        self._builder = LocalOperatorMpo(model.n_sites, model.d, model.nn_terms)
        self._damping = [-0.5 * m for m in model.onsite_damping()]
        self._ops = np.array([m for _, m in model.lindblad_ops], dtype=np.complex128).reshape(
            -1, model.d, model.d
        )
        self._sites = np.array([s - 1 for s, _ in model.lindblad_ops], dtype=int)

    def mode_for(self, state: MpsState) -> str:
        if self.update == "auto":
            return "exact" if state.is_full_rank() else "raw"
        if self.update == "exact" and not state.is_full_rank():
            raise PreconditionError("exact update requires full-rank bond dimensions")
        return self.update

    def channel_expectations(self, frame) -> np.ndarray:
        """``<L_alpha>`` on the normalized state, shape ``batch + (n_channels,)``."""
        vals = []
        for site, op in zip(self._sites, self._ops):
            m = frame.centers[site][..., None, :, :] @ frame.state.tensors[site]
            vals.append(np.einsum("...sab,st,...tab->...", np.conj(m), op, m))
        if not vals:
            return np.zeros(frame.state.batch_shape + (0,), dtype=np.complex128)
        return np.stack(vals, axis=-1)

    def __call__(self, state: MpsState, dt: float, dw: np.ndarray):
        """Advance a normalized right-canonical (batched) state by one step.

        Returns ``(new_state, growth, failed)``: the normalized new state, the
        norm of the unnormalized update and a boolean failure mask. Failed
        batch members carry their old tensors.
        """
        mode = self.mode_for(state)
        frame = tangent_frame(state)
        batch = state.batch_shape
        onsite = [np.broadcast_to(dt * m, batch + m.shape).copy() for m in self._damping]
        if len(self._ops):
            coef = np.conj(self.channel_expectations(frame)) * dt + dw
            for a, (site, op) in enumerate(zip(self._sites, self._ops)):
                onsite[site] += coef[..., a, None, None] * op
        mpo = self._builder.tensors(onsite, bond_scale=-1j * dt)
        tangent = project_mpo(frame, mpo)
        if mode == "exact":
            ts, nrm = exact_sum_tensors(state, tangent, 1.0)
        else:
            raw = raw_tangent_tensors(tangent, self.cutoff)
            ts = tuple(a + b for a, b in zip(state.tensors, raw))
        bad = ~_finite_per_sample(ts, batch)
        if np.any(bad):
            ts = tuple(np.where(_bcast(bad, t), a, t) for a, t in zip(state.tensors, ts))
        if mode == "exact":
            new = MpsState(ts)
            if np.any(bad):
                nrm = np.where(bad, 1.0, np.sqrt(np.sum(np.abs(ts[0]) ** 2, axis=(-3, -2, -1))))
        else:
            new, nrm = sweep_right(MpsState(ts))
        failed = bad | ~np.isfinite(nrm) | (nrm < _MIN_NORM)
        safe = np.where(failed, 1.0, nrm)
        first = new.tensors[0] / np.asarray(safe)[..., None, None, None]
        if np.any(failed):
            first = np.where(_bcast(failed, first), state.tensors[0], first)
            rest = tuple(
                np.where(_bcast(failed, t), a, t) for a, t in zip(state.tensors[1:], new.tensors[1:])
            )
        else:
            rest = new.tensors[1:]
        return MpsState((first,) + tuple(rest)), np.asarray(nrm), np.asarray(failed)


def _finite_per_sample(ts, batch) -> np.ndarray:
    ok = np.ones(batch, dtype=bool)
    for t in ts:
        ok &= np.all(np.isfinite(t), axis=(-3, -2, -1))
    return ok


def _bcast(mask: np.ndarray, t: np.ndarray) -> np.ndarray:
    return np.asarray(mask)[..., None, None, None]


def _check_start(state: MpsState, model: LindbladModel) -> None:
    if model.n_sites != state.n_sites or model.d != state.d:
        raise PreconditionError("model and state sizes differ")
    if not is_right_canonical(state, 1e-8):
        raise PreconditionError("initial state must be normalized and right-canonical")


def euler_step(
    state: MpsState,
    model: LindbladModel,
    dt: float,
    rng: np.random.Generator,
    *,
    update: str = "auto",
    cutoff: float = DEFAULT_CUTOFF,
    time: float = 0.0,
) -> MpsState:
    """One Euler-Maruyama step of a single normalized right-canonical state.

    Raises:
        TrajectoryFailure: The updated state has zero or non-finite norm.
    """
    if state.batch_shape:
        raise InvalidInputError("euler_step takes a single state; use StepKernel for batches")
    _check_start(state, model)
    dw = sample_wiener(model.n_channels, dt, rng).dw
    new, _, failed = StepKernel(model, update, cutoff)(state, dt, dw)
    if failed:
        raise TrajectoryFailure(time + dt, "state norm collapsed")
    return new


@dataclass
class BatchOutcome:
    """Result of integrating a batch of trajectories.

    ``series.values`` have a leading sample axis; rows of failed samples are
    NaN from the failure time on. ``failure_times`` is NaN for survivors.
    """

    series: ObservableSeries
    failure_times: np.ndarray
    final_state: MpsState | None = None
    log_norm: np.ndarray = field(default_factory=lambda: np.zeros(0))


class NoiseSource:
    """Per-sample generators read in blocks, matching sequential per-step draws."""

    def __init__(self, seeds, n_channels: int):
        self.rngs = [make_rng(s) for s in seeds]
        self.width = 2 * n_channels
        self._buf = None
        self._pos = 0

    def next(self, dt: float) -> np.ndarray:
        if self.width == 0:
            return np.zeros((len(self.rngs), 0), dtype=np.complex128)
        if self._buf is None or self._pos == self._buf.shape[1]:
            self._buf = np.stack([r.standard_normal((_NOISE_BLOCK, self.width)) for r in self.rngs])
            self._pos = 0
        z = self._buf[:, self._pos]
        self._pos += 1
        return increments_from_normals(z, dt)


def run_batch(initial: MpsState, model: LindbladModel, cfg: TrajectoryConfig, seeds) -> BatchOutcome:
    """Integrate ``len(seeds)`` trajectories in lockstep.

    ``initial`` is either one state (shared start) or a batch with one state
    per seed. Sample ``i`` uses only the stream seeded by ``seeds[i]``, and
    failed samples are dropped from the working batch, so every trajectory
    is independent of the others in the batch.
    """
    seeds = list(seeds)
    n = len(seeds)
    if n == 0:
        raise InvalidInputError("need at least one seed")
    if not initial.batch_shape:
        state = broadcast_state(initial, n)
    elif initial.batch_shape == (n,):
        state = initial
    else:
        raise InvalidInputError("initial batch does not match the number of seeds")
    _check_start(state, model)
    for spec in cfg.observables:
        spec.validate(model.n_sites, model.d)

    kernel = StepKernel(model, cfg.update, cfg.cutoff)
    noise = NoiseSource(seeds, model.n_channels)
    rec = cfg.record_steps()
    times = rec * cfg.dt
    values = {
        s.name: np.full((n, len(rec), len(s.labels(model.n_sites, model.d))), np.nan + 0j)
        for s in cfg.observables
    }
    labels = {s.name: s.labels(model.n_sites, model.d) for s in cfg.observables}
    fail_t = np.full(n, np.nan)
    log_norm = np.zeros(n)
    alive = np.arange(n)
    if not cfg.renormalize_every_step:
        values["log_norm"] = np.full((n, len(rec), 1), np.nan + 0j)
        labels["log_norm"] = ["total"]

    def record(slot: int) -> None:
        for s in cfg.observables:
            values[s.name][alive, slot] = s.evaluate(state, model)
        if not cfg.renormalize_every_step:
            values["log_norm"][alive, slot, 0] = log_norm[alive]

    record(0)
    slot = 1
    for step in range(1, cfg.n_steps + 1):
        dw = noise.next(cfg.dt)[alive]
        state, growth, failed = kernel(state, cfg.dt, dw)
        log_norm[alive] += np.log(np.where(failed, 1.0, growth))
        if np.any(failed):
            fail_t[alive[failed]] = step * cfg.dt
            keep = ~failed
            alive = alive[keep]
            if alive.size == 0:
                break
            state = state.select(keep)
        if slot < len(rec) and rec[slot] == step:
            record(slot)
            slot += 1

    final = state if alive.size == n else None
    return BatchOutcome(ObservableSeries(times, values, labels), fail_t, final, log_norm)


def run_trajectory(initial: MpsState, model: LindbladModel, cfg: TrajectoryConfig) -> ObservableSeries:
    """Integrate one trajectory with noise stream ``cfg.seed``.

    Raises:
        TrajectoryFailure: The norm collapsed; carries the failure time.
    """
    if initial.batch_shape:
        raise InvalidInputError("run_trajectory takes a single state")
    out = run_batch(initial, model, cfg, [cfg.seed])
    if np.isfinite(out.failure_times[0]):
        raise TrajectoryFailure(float(out.failure_times[0]), "state norm collapsed")
    return out.series.select(0)
