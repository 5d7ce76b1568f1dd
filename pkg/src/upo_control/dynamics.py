"""Earth-Moon circular restricted three-body dynamics in the rotating frame.

States are plain ``numpy`` arrays ``(x, y, z, vx, vy, vz)`` in nondimensional
units: positions in LU, velocities in LU/TU.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MU_EARTH_MOON = 1.215059e-2
LU_KM = 389703.0
TU_S = 382981.0


class SingularityError(ValueError):
    """Raised when a state sits (numerically) on top of a primary."""


@dataclass(frozen=True)
class SystemParams:
    """Mass ratio and units of the rotating frame."""

    mu: float = MU_EARTH_MOON
    length_unit_km: float = LU_KM
    time_unit_s: float = TU_S
    singularity_floor: float = 1e-12

    def __post_init__(self):
        if not 0.0 < self.mu < 0.5:
            raise ValueError(f"mass ratio must lie in (0, 1/2), got {self.mu}")
        if self.length_unit_km <= 0 or self.time_unit_s <= 0:
            raise ValueError("length and time units must be positive")


EARTH_MOON = SystemParams()


@dataclass(frozen=True)
class LagrangePoint:
    label: str
    position: np.ndarray
    jacobi: float


def as_state(s) -> np.ndarray:
    """Return ``s`` as a finite float array of shape (6,)."""
    arr = np.asarray(s, dtype=float)
    if arr.shape != (6,):
        raise ValueError(f"state must have 6 components, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"state has non-finite components: {arr}")
    return arr


def _distances(x, y, z, mu, floor):
    d = math.sqrt((x + mu) ** 2 + y * y + z * z)
    r = math.sqrt((x - 1.0 + mu) ** 2 + y * y + z * z)
    if d < floor or r < floor:
        raise SingularityError(f"state too close to a primary (d={d:.3e}, r={r:.3e})")
    return d, r


def cr3bp_derivative(s, p: SystemParams = EARTH_MOON) -> np.ndarray:
    """Time derivative of the state under the CR3BP equations of motion."""
    x, y, z, vx, vy, vz = (float(v) for v in s)
    mu = p.mu
    d, r = _distances(x, y, z, mu, p.singularity_floor)
    d3 = (1.0 - mu) / (d * d * d)
    r3 = mu / (r * r * r)
    ax = 2.0 * vy + x - d3 * (x + mu) - r3 * (x - 1.0 + mu)
    ay = -2.0 * vx + y - d3 * y - r3 * y
    az = -d3 * z - r3 * z
    return np.array([vx, vy, vz, ax, ay, az])


def effective_potential(pos, p: SystemParams = EARTH_MOON) -> float:
    x, y, z = (float(v) for v in pos[:3])
    d, r = _distances(x, y, z, p.mu, p.singularity_floor)
    return 0.5 * (x * x + y * y) + p.mu / r + (1.0 - p.mu) / d


def jacobi_constant(s, p: SystemParams = EARTH_MOON) -> float:
    """Jacobi integral ``C = 2U - V**2``."""
    v2 = float(s[3]) ** 2 + float(s[4]) ** 2 + float(s[5]) ** 2
    return 2.0 * effective_potential(s, p) - v2


def potential_hessian(pos, p: SystemParams = EARTH_MOON) -> np.ndarray:
    """Second derivatives of the effective potential (3x3, symmetric)."""
    x, y, z = (float(v) for v in pos[:3])
    mu = p.mu
    d, r = _distances(x, y, z, mu, p.singularity_floor)
    a = (1.0 - mu) / d**3
    b = mu / r**3
    a5 = 3.0 * (1.0 - mu) / d**5
    b5 = 3.0 * mu / r**5
    xd, xr = x + mu, x - 1.0 + mu
    uxx = 1.0 - a - b + a5 * xd * xd + b5 * xr * xr
    uyy = 1.0 - a - b + (a5 + b5) * y * y
    uzz = -a - b + (a5 + b5) * z * z
    uxy = a5 * xd * y + b5 * xr * y
    uxz = a5 * xd * z + b5 * xr * z
    uyz = (a5 + b5) * y * z
    return np.array([[uxx, uxy, uxz], [uxy, uyy, uyz], [uxz, uyz, uzz]])


# Coriolis coupling of the velocity rows
_OMEGA = np.array([[0.0, 2.0, 0.0], [-2.0, 0.0, 0.0], [0.0, 0.0, 0.0]])


def variational_jacobian(s, p: SystemParams = EARTH_MOON) -> np.ndarray:
    """Analytic 6x6 Jacobian of :func:`cr3bp_derivative` at ``s``."""
    jac = np.zeros((6, 6))
    jac[0:3, 3:6] = np.eye(3)
    jac[3:6, 0:3] = potential_hessian(s, p)
    jac[3:6, 3:6] = _OMEGA
    return jac


def _axis_acceleration(x: float, mu: float) -> float:
    d = abs(x + mu)
    r = abs(x - 1.0 + mu)
    return x - (1.0 - mu) * (x + mu) / d**3 - mu * (x - 1.0 + mu) / r**3


def _bisect_secant(f, lo: float, hi: float, tol: float = 1e-15, maxiter: int = 200) -> float:
    flo, fhi = f(lo), f(hi)
    if flo * fhi > 0:
        raise RuntimeError(f"root not bracketed on [{lo}, {hi}]")
    for _ in range(maxiter):
        mid = 0.5 * (lo + hi)
        fmid = f(mid)
        if fmid == 0.0:
            return mid
        if flo * fmid < 0:
            hi, fhi = mid, fmid
        else:
            lo, flo = mid, fmid
        if hi - lo < 1e-6:
            break
    # secant polish inside the (now tight) bracket
    x0, x1 = lo, hi
    f0, f1 = flo, fhi
    for _ in range(maxiter):
        if f1 == f0:
            break
        x2 = x1 - f1 * (x1 - x0) / (f1 - f0)
        if not lo <= x2 <= hi:
            x2 = 0.5 * (lo + hi)
        f2 = f(x2)
        if f2 == 0.0 or abs(x2 - x1) < tol:
            return x2
        if flo * f2 < 0:
            hi, fhi = x2, f2
        else:
            lo, flo = x2, f2
        x0, f0, x1, f1 = x1, f1, x2, f2
    return x1


def lagrange_points(p: SystemParams = EARTH_MOON) -> list[LagrangePoint]:
    """The five equilibria, with Jacobi constants, ordered L1..L5."""
    mu = p.mu
    eps = 1e-9
    f = lambda x: _axis_acceleration(x, mu)  # noqa: E731
    xs = {
        "L1": _bisect_secant(f, -mu + eps, 1.0 - mu - eps),
        "L2": _bisect_secant(f, 1.0 - mu + eps, 2.0),
        "L3": _bisect_secant(f, -2.0, -mu - eps),
    }
    points = []
    for label in ("L1", "L2", "L3"):
        pos = np.array([xs[label], 0.0, 0.0])
        points.append(LagrangePoint(label, pos, 2.0 * effective_potential(pos, p)))
    for label, sign in (("L4", 1.0), ("L5", -1.0)):
        pos = np.array([0.5 - mu, sign * math.sqrt(3.0) / 2.0, 0.0])
        points.append(LagrangePoint(label, pos, 2.0 * effective_potential(pos, p)))
    return points


def velocity_to_si(v_nondim, p: SystemParams = EARTH_MOON):
    """Convert LU/TU to m/s."""
    return v_nondim * (p.length_unit_km * 1000.0 / p.time_unit_s)
