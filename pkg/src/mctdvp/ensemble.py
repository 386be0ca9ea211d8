"""Parallel trajectory ensembles with reproducible aggregation.

Sample ``i`` always uses the noise stream ``derive_seed(master, i)``, and a
trajectory's numbers do not depend on which other samples share its batch.
Statistics are accumulated in a canonical dyadic tree over sample indices:
each aligned block ``[k 2^j, (k+1) 2^j)`` holds ``(count, mean, M2)`` and two
sibling blocks are always combined the same way. The final result therefore
depends only on the set of completed indices, not on worker count, chunking,
interruption or on how partial runs were merged.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError, EnsembleFailure, InvalidInputError
from .models import LindbladModel
from .mps import MpsState, expand_bond_dims, product_state, random_state, stack_states
from .sde import TrajectoryConfig, run_batch

WORKERS_ENV = "MCTDVP_WORKERS"
DEFAULT_BATCH = 256
_MASK64 = 2**64 - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix64(z: int) -> int:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _MASK64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK64
    return z ^ (z >> 31)


def derive_seed(master_seed: int, sample_index: int) -> int:
    """SplitMix64 stream seed of sample ``sample_index``.

    ``mix(mix(master) + (i + 1) * golden)``: the inner sum is injective in
    ``i`` modulo 2^64 (the golden constant is odd) and the finalizer is a
    bijection, so distinct indices never collide for a fixed master seed.
    """
    if sample_index < 0:
        raise InvalidInputError("sample index must be non-negative")
    base = _mix64(int(master_seed) & _MASK64)
    return _mix64((base + (int(sample_index) + 1) * _GOLDEN) & _MASK64)


# --- initial states ---------------------------------------------------------

_KETS = {
    "u": np.array([1, 0], dtype=np.complex128),
    "d": np.array([0, 1], dtype=np.complex128),
    "r": np.array([1, 1], dtype=np.complex128) / np.sqrt(2),
    "l": np.array([1, -1], dtype=np.complex128) / np.sqrt(2),
}


def product_kets(pattern: str, n_sites: int) -> list[np.ndarray]:
    """Local kets from ``up``, ``down``, ``neel`` or a per-site string over ``udrl``."""
    words = {"up": "u", "down": "d", "neel": "ud" * n_sites}
    chars = words.get(pattern, pattern)
    if pattern == "neel":
        chars = chars[:n_sites]
    if len(chars) == 1:
        chars = chars * n_sites
    if len(chars) != n_sites or any(c not in _KETS for c in chars):
        raise InvalidInputError(
            f"product pattern {pattern!r} must be up, down, neel or {n_sites} letters from 'udrl'"
        )
    return [_KETS[c] for c in chars]


@dataclass(frozen=True)
class InitialSpec:
    """Initial state of every trajectory.

    Attributes:
        kind: ``product`` or ``random``.
        pattern: Product-state pattern (see :func:`product_kets`).
        bond_dim: Simulation bond dimension; product states are padded to it.
        seed: Seed of the random state.
        per_sample: Draw a fresh random state per sample (seeded by
            ``derive_seed(seed, index)``) instead of sharing one.
    """

    kind: str = "product"
    pattern: str = "down"
    bond_dim: int = 1
    seed: int = 0
    per_sample: bool = False

    def __post_init__(self) -> None:
        if self.kind not in ("product", "random"):
            raise InvalidInputError(f"initial kind must be product or random, got {self.kind!r}")
        if self.bond_dim < 1:
            raise InvalidInputError("bond_dim must be >= 1")
        if self.per_sample and self.kind != "random":
            raise InvalidInputError("per_sample applies to random initial states only")

    def build(self, model: LindbladModel, index: int | None = None) -> MpsState:
        if model.d != 2 and self.kind == "product":
            raise InvalidInputError("product patterns are defined for spin-1/2 only")
        if self.kind == "product":
            state = product_state(model.n_sites, 2, product_kets(self.pattern, model.n_sites))
            return expand_bond_dims(state, self.bond_dim)
        seed = derive_seed(self.seed, index) if self.per_sample and index is not None else self.seed
        return random_state(model.n_sites, model.d, self.bond_dim, seed)

    def build_batch(self, model: LindbladModel, indices) -> MpsState:
        """One shared state, or a stacked batch when drawn per sample."""
        if not self.per_sample:
            return self.build(model)
        return stack_states([self.build(model, int(i)) for i in indices])


# --- aggregation ------------------------------------------------------------


@dataclass
class _Node:
    level: int
    pos: int
    count: int
    mean: dict[str, np.ndarray]
    m2: dict[str, np.ndarray]

    @property
    def start(self) -> int:
        return self.pos << self.level


def _combine(a: _Node, b: _Node, level: int, pos: int) -> _Node:
    """Chan's pairwise update; exact (zero M2) for identical inputs."""
    if b.count == 0:
        return _Node(level, pos, a.count, a.mean, a.m2)
    if a.count == 0:
        return _Node(level, pos, b.count, b.mean, b.m2)
    n = a.count + b.count
    frac = b.count / n
    weight = a.count * b.count / n
    mean, m2 = {}, {}
    for k in a.mean:
        delta = b.mean[k] - a.mean[k]
        mean[k] = a.mean[k] + delta * frac
        m2[k] = a.m2[k] + b.m2[k] + (delta.real**2 + delta.imag**2) * weight
    return _Node(level, pos, n, mean, m2)


class Accumulator:
    """Canonical dyadic-tree accumulator over sample indices ``[0, n_samples)``."""

    def __init__(self, n_samples: int, shapes: dict[str, tuple[int, ...]]):
        self.n_samples = n_samples
        self.shapes = dict(shapes)
        self.completed = np.zeros(n_samples, dtype=bool)
        self.failures: dict[int, float] = {}
        self.nodes: dict[tuple[int, int], _Node] = {}

    def _insert(self, node: _Node) -> None:
        while True:
            sib = (node.level, node.pos ^ 1)
            other = self.nodes.pop(sib, None)
            if other is None:
                self.nodes[(node.level, node.pos)] = node
                return
            left, right = (node, other) if node.pos % 2 == 0 else (other, node)
            node = _combine(left, right, node.level + 1, node.pos >> 1)

    def _empty(self) -> tuple[dict, dict]:
        mean = {k: np.zeros(s, dtype=np.complex128) for k, s in self.shapes.items()}
        m2 = {k: np.zeros(s) for k, s in self.shapes.items()}
        return mean, m2

    def add_sample(self, index: int, values: dict[str, np.ndarray] | None, failure_time=None) -> None:
        """Record sample ``index``; ``values=None`` marks a failed trajectory."""
        if not 0 <= index < self.n_samples:
            raise InvalidInputError(f"sample index {index} outside 0..{self.n_samples - 1}")
        if self.completed[index]:
            raise InvalidInputError(f"sample {index} recorded twice")
        self.completed[index] = True
        if values is None:
            self.failures[index] = float(failure_time)
            mean, m2 = self._empty()
            self._insert(_Node(0, index, 0, mean, m2))
        else:
            m2 = {k: np.zeros(s) for k, s in self.shapes.items()}
            self._insert(_Node(0, index, 1, {k: np.asarray(values[k]) for k in self.shapes}, m2))

    def absorb(self, other: "Accumulator") -> None:
        """Merge another accumulator over disjoint sample indices."""
        if other.n_samples != self.n_samples or other.shapes != self.shapes:
            raise InvalidInputError("accumulators describe different ensembles")
        if np.any(self.completed & other.completed):
            raise InvalidInputError("accumulators overlap in sample indices")
        self.completed |= other.completed
        self.failures.update(other.failures)
        for key in sorted(other.nodes):
            self._insert(other.nodes[key])

    def total(self) -> _Node:
        """Left-to-right reduction of the maximal blocks."""
        nodes = sorted(self.nodes.values(), key=lambda nd: nd.start)
        if not nodes:
            mean, m2 = self._empty()
            return _Node(0, 0, 0, mean, m2)
        acc = nodes[0]
        for nd in nodes[1:]:
            acc = _combine(acc, nd, 0, 0)
        return acc


@dataclass
class EnsembleResult:
    """Aggregated observables.

    ``mean[name]`` and ``stderr[name]`` have shape ``(n_times, n_labels)``;
    the standard error is the sample standard deviation over ``sqrt(n)``.
    With a single surviving sample it is reported as zero and
    ``stderr_defined`` is false.
    """

    times: np.ndarray
    mean: dict[str, np.ndarray]
    stderr: dict[str, np.ndarray]
    labels: dict[str, list[str]]
    n_requested: int
    n_effective: int
    failures: list[tuple[int, float]] = field(default_factory=list)
    stderr_defined: bool = True


def _result_from(acc: Accumulator, times, labels, n_requested: int) -> EnsembleResult:
    tot = acc.total()
    if tot.count == 0:
        raise EnsembleFailure(f"all {n_requested} samples failed")
    stderr = {}
    for k, m2 in tot.m2.items():
        if tot.count > 1:
            stderr[k] = np.sqrt(m2 / (tot.count - 1) / tot.count)
        else:
            stderr[k] = np.zeros_like(m2)
    return EnsembleResult(
        times=np.asarray(times),
        mean=dict(tot.mean),
        stderr=stderr,
        labels=dict(labels),
        n_requested=n_requested,
        n_effective=tot.count,
        failures=sorted(acc.failures.items()),
        stderr_defined=tot.count > 1,
    )


# --- running ----------------------------------------------------------------


def resolve_workers(n_workers: int) -> int:
    """Worker count, overridable through the ``MCTDVP_WORKERS`` environment variable."""
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            n_workers = int(env)
        except ValueError as exc:
            raise InvalidInputError(f"{WORKERS_ENV} must be an integer, got {env!r}") from exc
    if n_workers < 1:
        raise InvalidInputError("n_workers must be >= 1")
    return n_workers


def _run_chunk(model, initial_spec, cfg, master_seed, indices):
    indices = list(indices)
    seeds = [derive_seed(master_seed, i) for i in indices]
    state = initial_spec.build_batch(model, indices)
    out = run_batch(state, model, cfg, seeds)
    return indices, out.series.values, out.failure_times


def _chunks(todo: np.ndarray, batch_size: int):
    """Split pending indices along the fixed grid ``[k B, (k+1) B)``."""
    if todo.size == 0:
        return []
    keys = todo // batch_size
    cuts = np.flatnonzero(np.diff(keys)) + 1
    return np.split(todo, cuts)


def observable_shapes(model: LindbladModel, cfg: TrajectoryConfig) -> tuple[dict, dict]:
    n_t = len(cfg.record_steps())
    labels = {s.name: s.labels(model.n_sites, model.d) for s in cfg.observables}
    if not cfg.renormalize_every_step:
        labels["log_norm"] = ["total"]
    shapes = {k: (n_t, len(v)) for k, v in labels.items()}
    return shapes, labels


def run_ensemble(
    model: LindbladModel,
    initial_spec: InitialSpec,
    cfg: TrajectoryConfig,
    n_samples: int,
    n_workers: int = 1,
    *,
    master_seed: int | None = None,
    batch_size: int = DEFAULT_BATCH,
    sample_range: tuple[int, int] | None = None,
    checkpoint: str | os.PathLike | None = None,
    resume: bool = False,
    return_accumulator: bool = False,
):
    """Run samples ``sample_range`` (default all) of an ``n_samples`` ensemble.

    The result summarizes every sample held by the accumulator, which after a
    resume includes samples completed by earlier runs.

    Args:
        master_seed: Defaults to ``cfg.seed``.
        batch_size: Trajectories advanced together in one worker call.
        checkpoint: File rewritten atomically after every chunk.
        resume: Continue from ``checkpoint`` if it exists, running only the
            missing indices of the requested range.
        return_accumulator: Also return the raw :class:`Accumulator`.

    Raises:
        EnsembleFailure: Every sample in the range failed.
    """
    if n_samples < 1:
        raise InvalidInputError("n_samples must be >= 1")
    if batch_size < 1:
        raise InvalidInputError("batch_size must be >= 1")
    workers = resolve_workers(n_workers)
    master = cfg.seed if master_seed is None else int(master_seed)
    lo, hi = (0, n_samples) if sample_range is None else sample_range
    if not 0 <= lo < hi <= n_samples:
        raise InvalidInputError(f"sample range [{lo}, {hi}) outside [0, {n_samples})")
    for spec in cfg.observables:
        spec.validate(model.n_sites, model.d)

    shapes, labels = observable_shapes(model, cfg)
    times = cfg.record_steps() * cfg.dt
    fingerprint = run_fingerprint(model, initial_spec, cfg, n_samples, master)
    acc = None
    if resume and checkpoint is not None and Path(checkpoint).exists():
        acc, fp = load_checkpoint(checkpoint)
        if fp != fingerprint:
            raise InvalidInputError("checkpoint was written for a different run configuration")
    if acc is None:
        acc = Accumulator(n_samples, shapes)

    idx = np.arange(lo, hi)
    todo = idx[~acc.completed[lo:hi]]
    chunks = _chunks(todo, batch_size)

    def absorb(result) -> None:
        indices, values, fail_t = result
        for j, i in enumerate(indices):
            if np.isfinite(fail_t[j]):
                acc.add_sample(i, None, fail_t[j])
            else:
                acc.add_sample(i, {k: v[j] for k, v in values.items()})
        if checkpoint is not None:
            save_checkpoint(checkpoint, acc, fingerprint)

    if workers == 1 or len(chunks) <= 1:
        for ch in chunks:
            absorb(_run_chunk(model, initial_spec, cfg, master, ch))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_run_chunk, model, initial_spec, cfg, master, ch) for ch in chunks
            ]
            for fut in futures:
                absorb(fut.result())

    result = _result_from(acc, times, labels, int(acc.completed.sum()))
    if return_accumulator:
        return result, acc
    return result


def result_from_accumulator(acc: Accumulator, times, labels) -> EnsembleResult:
    return _result_from(acc, times, labels, int(acc.completed.sum()))


def tomography_ensemble(
    model: LindbladModel,
    initial_spec: InitialSpec,
    cfg: TrajectoryConfig,
    n_samples: int,
    n_workers: int = 1,
    **kwargs,
):
    """Sample-averaged density matrices ``rho_hat(t) = mean_l |psi_l><psi_l|``.

    Returns:
        ``(times, rho_hat, stderr)`` with matrices of shape ``(n_times, dim, dim)``.
    """
    from dataclasses import replace

    from .observables import ObservableSpec

    spec = ObservableSpec("tomography")
    spec.validate(model.n_sites, model.d)
    tcfg = replace(cfg, observables=(spec,))
    res = run_ensemble(model, initial_spec, tcfg, n_samples, n_workers, **kwargs)
    dim = model.d**model.n_sites
    shape = (len(res.times), dim, dim)
    return res.times, res.mean["tomography"].reshape(shape), res.stderr["tomography"].reshape(shape)


# --- checkpoints ------------------------------------------------------------

_MAGIC = b"MCTDVPCK"
_VERSION = 1


def run_fingerprint(model, initial_spec, cfg, n_samples, master_seed) -> str:
    """Hash of everything that determines the per-sample numbers."""
    h = hashlib.sha256()
    h.update(repr((model.n_sites, model.d, model.name)).encode())
    for t in model.nn_terms:
        h.update(np.ascontiguousarray(t).tobytes())
    for site, m in model.lindblad_ops:
        h.update(str(site).encode())
        h.update(np.ascontiguousarray(m).tobytes())
    h.update(repr(initial_spec).encode())
    h.update(
        repr(
            (
                cfg.dt,
                cfg.t_final,
                tuple(s.name for s in cfg.observables),
                cfg.record_every,
                cfg.renormalize_every_step,
                cfg.cutoff,
                cfg.update,
                n_samples,
                int(master_seed),
            )
        ).encode()
    )
    return h.hexdigest()


def save_checkpoint(path, acc: Accumulator, fingerprint: str) -> None:
    """Atomically write the accumulator (versioned header, bitmap, blocks, sha256 trailer)."""
    header = {
        "version": _VERSION,
        "fingerprint": fingerprint,
        "n_samples": acc.n_samples,
        "observables": [[k, list(s)] for k, s in acc.shapes.items()],
    }
    parts = [_MAGIC, struct.pack("<I", _VERSION)]
    hjson = json.dumps(header, sort_keys=True).encode()
    parts += [struct.pack("<Q", len(hjson)), hjson]
    bitmap = np.packbits(acc.completed, bitorder="little").tobytes()
    parts += [struct.pack("<Q", len(bitmap)), bitmap]
    fails = sorted(acc.failures.items())
    parts.append(struct.pack("<Q", len(fails)))
    parts += [struct.pack("<Qd", i, t) for i, t in fails]
    parts.append(struct.pack("<Q", len(acc.nodes)))
    for key in sorted(acc.nodes):
        nd = acc.nodes[key]
        parts.append(struct.pack("<QQQ", nd.level, nd.pos, nd.count))
        for k in acc.shapes:
            parts.append(np.ascontiguousarray(nd.mean[k], dtype="<c16").tobytes())
            parts.append(np.ascontiguousarray(nd.m2[k], dtype="<f8").tobytes())
    body = b"".join(parts)
    data = body + hashlib.sha256(body).digest()
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError("checkpoint truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> tuple[Accumulator, str]:
    """Read a checkpoint; returns the accumulator and the run fingerprint.

    Raises:
        CheckpointFormatError: Bad magic, unknown version, truncation or checksum mismatch.
    """
    data = Path(path).read_bytes()
    if len(data) < len(_MAGIC) + 4 + 32 or not data.startswith(_MAGIC):
        raise CheckpointFormatError("not a checkpoint file (bad magic or too short)")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointFormatError("checkpoint checksum mismatch (truncated or corrupt)")
    rd = _Reader(body)
    rd.take(len(_MAGIC))
    (version,) = rd.unpack("<I")
    if version != _VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    (hlen,) = rd.unpack("<Q")
    try:
        header = json.loads(rd.take(hlen))
    except ValueError as exc:
        raise CheckpointFormatError("malformed checkpoint header") from exc
    shapes = {k: tuple(s) for k, s in header["observables"]}
    acc = Accumulator(int(header["n_samples"]), shapes)
    (blen,) = rd.unpack("<Q")
    bits = np.unpackbits(np.frombuffer(rd.take(blen), dtype=np.uint8), bitorder="little")
    acc.completed = bits[: acc.n_samples].astype(bool)
    (nf,) = rd.unpack("<Q")
    for _ in range(nf):
        i, t = rd.unpack("<Qd")
        acc.failures[int(i)] = t
    (nn,) = rd.unpack("<Q")
    for _ in range(nn):
        level, pos, count = rd.unpack("<QQQ")
        mean, m2 = {}, {}
        for k, s in shapes.items():
            size = int(np.prod(s))
            mean[k] = np.frombuffer(rd.take(16 * size), dtype="<c16").reshape(s).copy()
            m2[k] = np.frombuffer(rd.take(8 * size), dtype="<f8").reshape(s).copy()
        acc.nodes[(level, pos)] = _Node(level, pos, count, mean, m2)
    if rd.pos != len(body):
        raise CheckpointFormatError("trailing bytes in checkpoint")
    return acc, header["fingerprint"]


def merge_checkpoints(paths, out_path=None) -> tuple[Accumulator, str]:
    """Combine partial checkpoints over disjoint sample ranges."""
    paths = list(paths)
    if not paths:
        raise InvalidInputError("nothing to merge")
    acc, fp = load_checkpoint(paths[0])
    for p in paths[1:]:
        other, ofp = load_checkpoint(p)
        if ofp != fp:
            raise InvalidInputError(f"{p} belongs to a different run")
        acc.absorb(other)
    if out_path is not None:
        save_checkpoint(out_path, acc, fp)
    return acc, fp
