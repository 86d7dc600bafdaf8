"""Model constants, potentials, the nonlinearities P and h, and initial data.

The convex part of the double-well potential comes in two flavours: the
logarithmic family ``F1_gamma = gamma * F1_log`` used for deep-quench solves
and the indicator of ``[-1, 1]`` used in the obstacle limit.  The concave
part is ``F2(r) = k (1 - r^2)``.

``h`` is the cubic smoothstep on ``[-1, 1]``, extended by constants.  ``P``
is either a constant or ``p_max * h``.  Both are artifact choices; any
nonnegative bounded C^1 pair with bounded derivatives fits the solvers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from .grid import SpatialGrid, check_space_field

GUARD_BAND = 1e-12


class DomainError(ValueError):
    """Raised when a potential is evaluated outside its domain."""


@dataclass(frozen=True)
class ModelParams:
    alpha: float = 1.0
    beta: float = 1.0
    chi: float = 0.5
    f2_k: float = 1.0
    p_max: float = 0.5
    p_shape: str = "constant"

    def violations(self) -> list[str]:
        out = []
        for name in ("alpha", "beta", "chi"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                out.append(f"(A1) {name} must be positive, got {v!r}")
        if not (np.isfinite(self.f2_k) and self.f2_k > 0):
            out.append(f"(A2) f2_k must be positive, got {self.f2_k!r}")
        if not (np.isfinite(self.p_max) and self.p_max >= 0):
            out.append(f"(A3) p_max must be nonnegative, got {self.p_max!r}")
        if self.p_shape not in ("constant", "ramp"):
            out.append(f"(A3) p_shape must be 'constant' or 'ramp', got {self.p_shape!r}")
        return out

    def __post_init__(self):
        problems = self.violations()
        if problems:
            raise ValueError("; ".join(problems))


@dataclass(frozen=True)
class PotentialSpec:
    """``kind`` is ``"obstacle"`` or ``"deep_quench"``; ``gamma`` only for the latter."""

    kind: str
    gamma: float | None = None

    def __post_init__(self):
        if self.kind == "obstacle":
            if self.gamma is not None:
                raise ValueError("obstacle potential takes no gamma")
        elif self.kind == "deep_quench":
            if self.gamma is None or not (0.0 < self.gamma <= 1.0):
                raise ValueError(f"gamma must lie in (0, 1], got {self.gamma!r}")
        else:
            raise ValueError(f"unknown potential kind {self.kind!r}")

    @classmethod
    def obstacle(cls) -> "PotentialSpec":
        return cls("obstacle")

    @classmethod
    def deep_quench(cls, gamma: float) -> "PotentialSpec":
        return cls("deep_quench", float(gamma))

    @property
    def is_obstacle(self) -> bool:
        return self.kind == "obstacle"


@dataclass(frozen=True)
class InitialData:
    mu0: np.ndarray
    phi0: np.ndarray
    sigma0: np.ndarray = field(default=None)

    def __post_init__(self):
        for name in ("mu0", "phi0", "sigma0"):
            v = getattr(self, name)
            if v is None:
                v = np.zeros_like(np.asarray(self.phi0, dtype=float))
            v = np.array(v, dtype=float)
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        if not (self.mu0.shape == self.phi0.shape == self.sigma0.shape):
            raise ValueError("initial fields must share one shape")

    def check(self, g: SpatialGrid) -> None:
        check_space_field(g, self.mu0, "mu0")
        check_space_field(g, self.phi0, "phi0")
        check_space_field(g, self.sigma0, "sigma0")

    @classmethod
    def zeros(cls, g: SpatialGrid) -> "InitialData":
        z = np.zeros(g.size)
        return cls(z, z, z)


# -- convex part ------------------------------------------------------------


def f1log_value(r):
    """``(1 + r) ln(1 + r) + (1 - r) ln(1 - r)`` on ``[-1, 1]``."""
    r = np.asarray(r, dtype=float)
    if np.any(np.abs(r) > 1):
        raise DomainError("f1log_value needs |r| <= 1")
    # this form stays nonnegative near r = 0 where the xlogx sum cancels
    inner = np.abs(r) < 1
    ri = np.where(inner, r, 0.0)
    out = np.where(inner, 2 * ri * np.arctanh(ri) + np.log1p(-ri * ri), 2 * np.log(2.0))
    return out if out.ndim else float(out)


def _check_spec(spec: PotentialSpec):
    if spec.is_obstacle:
        raise ValueError("derivatives of the obstacle potential are set-valued")


def f1_value(spec: PotentialSpec, r):
    if spec.is_obstacle:
        r = np.asarray(r, dtype=float)
        out = np.where(np.abs(r) <= 1, 0.0, np.inf)
        return out if out.ndim else float(out)
    return spec.gamma * f1log_value(r)


def _interior(r):
    r = np.asarray(r, dtype=float)
    if np.any(~(np.abs(r) < 1)):
        raise DomainError("F1 derivatives need |r| < 1 strictly")
    return r


def f1_prime(spec: PotentialSpec, r):
    _check_spec(spec)
    r = _interior(r)
    out = spec.gamma * (np.log1p(r) - np.log1p(-r))
    return out if out.ndim else float(out)


def f1_second(spec: PotentialSpec, r):
    _check_spec(spec)
    r = _interior(r)
    out = 2.0 * spec.gamma / ((1 - r) * (1 + r))
    return out if out.ndim else float(out)


def obstacle_resolvent(c: float, w):
    """Solve ``r + xi / c = w`` with ``xi`` in the normal cone of ``[-1, 1]`` at ``r``."""
    if not c > 0:
        raise ValueError("c must be positive")
    w = np.asarray(w, dtype=float)
    r = np.clip(w, -1.0, 1.0)
    xi = c * (w - r)
    if r.ndim == 0:
        return float(r), float(xi)
    return r, xi


# -- concave part, P and h ----------------------------------------------------


def f2_value(params: ModelParams, r):
    return params.f2_k * (1 - np.asarray(r, dtype=float) ** 2)


def f2_prime(params: ModelParams, r):
    return -2.0 * params.f2_k * np.asarray(r, dtype=float)


def f2_second(params: ModelParams, r):
    return np.full_like(np.asarray(r, dtype=float), -2.0 * params.f2_k)


def _smoothstep(r):
    s = 0.5 * (np.clip(np.asarray(r, dtype=float), -1.0, 1.0) + 1.0)
    return s * s * (3.0 - 2.0 * s)


def _smoothstep_prime(r):
    r = np.asarray(r, dtype=float)
    s = 0.5 * (np.clip(r, -1.0, 1.0) + 1.0)
    return np.where(np.abs(r) < 1, 3.0 * s * (1.0 - s), 0.0)


def h_eval(params: ModelParams, r):
    return _smoothstep(r)


def h_prime(params: ModelParams, r):
    return _smoothstep_prime(r)


def p_eval(params: ModelParams, r):
    r = np.asarray(r, dtype=float)
    if params.p_shape == "constant":
        return np.full_like(r, params.p_max)
    return params.p_max * _smoothstep(r)


def p_prime(params: ModelParams, r):
    r = np.asarray(r, dtype=float)
    if params.p_shape == "constant":
        return np.zeros_like(r)
    return params.p_max * _smoothstep_prime(r)


# -- initial data -----------------------------------------------------------


def _smooth(g: SpatialGrid, gamma: float, v: np.ndarray) -> np.ndarray:
    a = sps.csc_matrix(sps.identity(g.size) - gamma * g.laplacian)
    return spla.spsolve(a, v)


def mollify_initial_data(g: SpatialGrid, gamma: float, data: InitialData) -> InitialData:
    """Truncate ``phi0`` to ``|phi| <= 1 - gamma/2`` and smooth with ``(I - gamma Lap)^-1``.

    The smoothing is a discrete maximum-principle map, so the band survives
    it up to roundoff, which the final clip removes.
    """
    if not (0.0 < gamma <= 1.0):
        raise ValueError(f"gamma must lie in (0, 1], got {gamma!r}")
    data.check(g)
    band = 1.0 - 0.5 * gamma
    phi = _smooth(g, gamma, np.clip(data.phi0, -band, band))
    phi = np.clip(phi, -band, band)
    return InitialData(_smooth(g, gamma, data.mu0), phi, _smooth(g, gamma, data.sigma0))
