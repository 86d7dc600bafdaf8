"""Control pairs ``(u1, u2)`` and their box constraints."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import SpatialGrid, TimeGrid, check_spacetime_field


@dataclass(frozen=True)
class Bounds:
    u1_min: float = -1.0
    u1_max: float = 1.0
    u2_min: float = -1.0
    u2_max: float = 1.0

    def violations(self) -> list[str]:
        out = []
        for i in (1, 2):
            lo, hi = getattr(self, f"u{i}_min"), getattr(self, f"u{i}_max")
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                out.append(f"(A4) need finite u{i}_min < u{i}_max, got {lo!r}, {hi!r}")
        return out

    def __post_init__(self):
        problems = self.violations()
        if problems:
            raise ValueError("; ".join(problems))

    def lower(self, i: int) -> float:
        return getattr(self, f"u{i}_min")

    def upper(self, i: int) -> float:
        return getattr(self, f"u{i}_max")

    @property
    def radius(self) -> float:
        """Sup-norm radius of the open ball that contains the admissible set."""
        return max(abs(self.u1_min), abs(self.u1_max), abs(self.u2_min), abs(self.u2_max)) + 1.0


@dataclass(frozen=True)
class ControlPair:
    """Space-time controls.  With ``bounds`` set, admissibility is enforced exactly.

    Perturbations and directions (finite differences, sensitivities) are
    built with ``bounds=None``.
    """

    u1: np.ndarray
    u2: np.ndarray
    bounds: Bounds | None = None

    def __post_init__(self):
        u1 = np.array(self.u1, dtype=float)
        u2 = np.array(self.u2, dtype=float)
        if u1.shape != u2.shape or u1.ndim != 2:
            raise ValueError("u1 and u2 must be 2D arrays of equal shape")
        if not (np.all(np.isfinite(u1)) and np.all(np.isfinite(u2))):
            raise ValueError("controls contain non-finite entries")
        u1.setflags(write=False)
        u2.setflags(write=False)
        object.__setattr__(self, "u1", u1)
        object.__setattr__(self, "u2", u2)
        b = self.bounds
        if b is not None:
            if u1.min() < b.u1_min or u1.max() > b.u1_max:
                raise ValueError("(A4) u1 violates its box bounds")
            if u2.min() < b.u2_min or u2.max() > b.u2_max:
                raise ValueError("(A4) u2 violates its box bounds")

    @classmethod
    def zeros(cls, g: SpatialGrid, tg: TimeGrid, bounds: Bounds | None = None) -> "ControlPair":
        z = np.zeros((tg.steps + 1, g.size))
        return cls(z, z, bounds)

    def check(self, g: SpatialGrid, tg: TimeGrid) -> None:
        check_spacetime_field(g, tg, self.u1, "u1")
        check_spacetime_field(g, tg, self.u2, "u2")

    def stack(self) -> np.ndarray:
        return np.stack([self.u1, self.u2])

    def with_values(self, u1, u2, bounds="same") -> "ControlPair":
        return ControlPair(u1, u2, self.bounds if bounds == "same" else bounds)

    def project(self, bounds: Bounds | None = None) -> "ControlPair":
        b = bounds if bounds is not None else self.bounds
        if b is None:
            return self
        return ControlPair(
            np.clip(self.u1, b.u1_min, b.u1_max), np.clip(self.u2, b.u2_min, b.u2_max), b
        )

    def __add__(self, other: "ControlPair") -> "ControlPair":
        return ControlPair(self.u1 + other.u1, self.u2 + other.u2)

    def scaled(self, c: float) -> "ControlPair":
        return ControlPair(c * self.u1, c * self.u2)
