"""Trajectory container shared by the effective and finite-size solvers.

Both solvers emit the same shape of data: a time grid, one reduced density
matrix per grid point, and run diagnostics. CSV export writes every float
with 17 significant digits and a '.' decimal separator so repeated runs are
byte-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .matio import atomic_write_text, save_trajectory
from .operators import DensityMatrix, Operator

CSV_FMT = "%.17g"


@dataclass(frozen=True)
class PropagationResult:
    times: np.ndarray
    states: tuple[DensityMatrix, ...]
    diagnostics: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        if times.ndim != 1 or len(times) != len(self.states):
            raise ValidationError(
                f"{len(times)} times for {len(self.states)} states")
        if len(self.states) == 0:
            raise ValidationError("empty trajectory")
        dims = {s.dims for s in self.states}
        if len(dims) != 1:
            raise ValidationError("trajectory states have mixed factor shapes")
        times.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", tuple(self.states))

    @property
    def dims(self) -> tuple[int, ...]:
        return self.states[0].dims

    def purities(self) -> np.ndarray:
        return np.array([s.purity() for s in self.states])

    def trace_drifts(self) -> np.ndarray:
        return np.array([abs(complex(np.trace(s.data)) - 1.0) for s in self.states])

    def expectations(self, observable: Operator | np.ndarray) -> np.ndarray:
        a = observable.data if isinstance(observable, Operator) else np.asarray(observable)
        if a.shape != (self.states[0].dim,) * 2:
            raise ValidationError(
                f"observable shape {a.shape} does not match state dim {self.states[0].dim}")
        return np.array([np.trace(s.data @ a).real for s in self.states])

    def final_state(self) -> DensityMatrix:
        return self.states[-1]

    def to_csv(self, path: str, observables: dict | None = None) -> None:
        """Columns: t, one per named observable, purity, trace_drift."""
        observables = observables or {}
        cols = {name: self.expectations(op) for name, op in observables.items()}
        purity = self.purities()
        drift = self.trace_drifts()
        header = ",".join(["t", *cols.keys(), "purity", "trace_drift"])
        lines = [header]
        for k, t in enumerate(self.times):
            row = [CSV_FMT % t]
            row += [CSV_FMT % cols[name][k] for name in cols]
            row += [CSV_FMT % purity[k], CSV_FMT % drift[k]]
            lines.append(",".join(row))
        atomic_write_text(path, "\n".join(lines) + "\n")

    def save_states(self, path: str) -> None:
        frames = np.stack([s.data for s in self.states])
        save_trajectory(path, self.times, frames, self.dims)
