"""Observable specifications and recorded time series."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .models import PAULI, LindbladModel
from .mps import (
    DENSE_CAP,
    MpsState,
    expect_nn_hamiltonian,
    expect_profile,
    to_dense,
    two_point_profile,
)

OBSERVABLE_KINDS = ("sz_profile", "sx_profile", "sy_profile", "energy", "two_point", "tomography")


@dataclass(frozen=True)
class ObservableSpec:
    """One recorded quantity.

    Attributes:
        kind: One of :data:`OBSERVABLE_KINDS`.
        ref_site: Reference site of ``two_point`` (1-based).
        op: Pauli label (``x``, ``y``, ``z``) of ``two_point``.
    """

    kind: str
    ref_site: int | None = None
    op: str = "x"

    def __post_init__(self) -> None:
        if self.kind not in OBSERVABLE_KINDS:
            raise InvalidInputError(f"unknown observable {self.kind!r}")
        if self.kind == "two_point":
            if self.ref_site is None:
                raise InvalidInputError("two_point needs a reference site")
            if self.op not in ("x", "y", "z"):
                raise InvalidInputError(f"two_point operator must be x, y or z, got {self.op!r}")

    @property
    def name(self) -> str:
        if self.kind == "two_point":
            return f"two_point_{self.op}{self.op}_{self.ref_site}"
        return self.kind

    def validate(self, n_sites: int, d: int) -> None:
        if self.kind == "two_point" and not 1 <= self.ref_site <= n_sites:
            raise InvalidInputError(f"reference site {self.ref_site} outside 1..{n_sites}")
        if self.kind == "tomography" and (d**n_sites) ** 2 > DENSE_CAP:
            raise InvalidInputError("tomography is limited to small chains")
        if self.kind != "energy" and self.kind != "tomography" and d != 2:
            raise InvalidInputError("Pauli observables need d = 2")

    def labels(self, n_sites: int, d: int = 2) -> list[str]:
        if self.kind == "energy":
            return ["total"]
        if self.kind == "tomography":
            dim = d**n_sites
            return [f"{r}:{c}" for r in range(dim) for c in range(dim)]
        if self.kind == "two_point":
            return [f"{self.ref_site}-{m}" for m in range(1, n_sites + 1)]
        return [str(m) for m in range(1, n_sites + 1)]

    def evaluate(self, state: MpsState, model: LindbladModel) -> np.ndarray:
        """Values with shape ``batch + (len(labels),)`` as complex numbers."""
        if self.kind == "energy":
            return np.asarray(expect_nn_hamiltonian(state, model), dtype=np.complex128)[..., None]
        if self.kind == "tomography":
            psi = to_dense(state)
            psi = psi / np.linalg.norm(psi, axis=-1, keepdims=True)
            rho = psi[..., :, None] * np.conj(psi[..., None, :])
            return rho.reshape(rho.shape[:-2] + (-1,))
        if self.kind == "two_point":
            return two_point_profile(state, self.ref_site, PAULI[self.op])
        return expect_profile(state, PAULI[self.kind[1]])


def parse_observable(text: str) -> ObservableSpec:
    """Parse ``sz_profile``, ``energy``, ``tomography`` or ``two_point:<ref>:<op>``."""
    parts = text.strip().split(":")
    if parts[0] == "two_point":
        if len(parts) not in (2, 3):
            raise InvalidInputError(f"malformed two_point spec {text!r}")
        try:
            ref = int(parts[1])
        except ValueError as exc:
            raise InvalidInputError(f"two_point reference must be an integer in {text!r}") from exc
        return ObservableSpec("two_point", ref, parts[2] if len(parts) == 3 else "x")
    if len(parts) != 1:
        raise InvalidInputError(f"malformed observable {text!r}")
    return ObservableSpec(parts[0])


@dataclass
class ObservableSeries:
    """Recorded observables of one trajectory (or a batch of them).

    ``values[name]`` has shape ``batch + (n_times, n_labels)``.
    """

    times: np.ndarray
    values: dict[str, np.ndarray] = field(default_factory=dict)
    labels: dict[str, list[str]] = field(default_factory=dict)

    def select(self, index) -> "ObservableSeries":
        return ObservableSeries(
            self.times, {k: v[index] for k, v in self.values.items()}, dict(self.labels)
        )
