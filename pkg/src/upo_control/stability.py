"""Monodromy matrices, Floquet classification and section sensitivity."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .catalog import UpoRecord
from .dynamics import EARTH_MOON, SystemParams
from .integrator import DEFAULT_CONFIG, IntegratorConfig, propagate_with_stm
from .sections import SectionDef, find_anchor

PLANAR_INDICES = (0, 1, 3, 4)


class NotUnstableError(ValueError):
    """Spectrum has no multiplier outside the unit circle."""


@dataclass
class MonodromyResult:
    M: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # columns
    anchor_crossing: np.ndarray
    section: SectionDef | None = None
    planar: bool = False


@dataclass
class ManifoldDirections:
    nu_s: np.ndarray
    nu_u: np.ndarray
    lambda_s: float
    lambda_u: float
    neutral: np.ndarray  # remaining multipliers, complex

    @property
    def neutral_magnitudes(self) -> np.ndarray:
        return np.abs(self.neutral)


def monodromy_from_state(anchor, period: float, cfg: IntegratorConfig = DEFAULT_CONFIG,
                         p: SystemParams = EARTH_MOON, planar: bool = False) -> MonodromyResult:
    res = propagate_with_stm(anchor, period, cfg, p)
    w, v = np.linalg.eig(res.stm)
    return MonodromyResult(res.stm, w, v, np.asarray(anchor, dtype=float).copy(), planar=planar)


def monodromy_at(u: UpoRecord, sec: SectionDef, cfg: IntegratorConfig = DEFAULT_CONFIG,
                 p: SystemParams = EARTH_MOON) -> MonodromyResult:
    """One-period STM of ``u`` started from its admissible crossing of ``sec``."""
    cal, _, anchor = find_anchor(u, sec, cfg, p)
    r = monodromy_from_state(anchor, u.period, cfg, p, planar=u.planar)
    r.section = cal
    return r


def _real_unit(v: np.ndarray) -> np.ndarray:
    """Real representative of a (possibly complex) eigenvector, unit 2-norm.

    The phase is rotated so the largest component is real before the real
    part is taken; the sign makes that component positive.
    """
    v = np.asarray(v, dtype=complex)
    k = int(np.argmax(np.abs(v)))
    v = v * np.exp(-1j * np.angle(v[k]))
    r = v.real
    return r / np.linalg.norm(r)


def classify_floquet(r: MonodromyResult, tol: float = 1e-6) -> ManifoldDirections:
    """Split the spectrum into unstable, stable and neutral parts.

    For planar orbits only the in-plane block of M is classified, so the
    out-of-plane multipliers never compete for the unstable/stable slots.
    When the unstable and stable multipliers form a complex quadruplet, their
    conjugates are excluded from the neutral set as well.
    """
    if r.planar:
        idx = list(PLANAR_INDICES)
        w, v4 = np.linalg.eig(r.M[np.ix_(idx, idx)])
        v = np.zeros((6, len(w)), dtype=complex)
        v[idx, :] = v4
    else:
        w, v = r.eigenvalues, r.eigenvectors
    mags = np.abs(w)
    iu, is_ = int(np.argmax(mags)), int(np.argmin(mags))
    if mags[iu] <= 1.0 + tol:
        raise NotUnstableError(f"largest multiplier magnitude {mags[iu]:.6g} is not above 1")
    taken = {iu, is_}
    for i in (iu, is_):
        # a complex multiplier drags its conjugate partner into the same class
        if abs(w[i].imag) > tol * abs(w[i]):
            partner = min((j for j in range(len(w)) if j not in taken), key=lambda j: abs(w[j] - np.conj(w[i])))
            taken.add(partner)
    rest = np.array([w[i] for i in range(len(w)) if i not in taken])
    return ManifoldDirections(
        nu_s=_real_unit(v[:, is_]),
        nu_u=_real_unit(v[:, iu]),
        lambda_s=float(mags[is_]),
        lambda_u=float(mags[iu]),
        neutral=rest,
    )


def sensitivity_norm(r: MonodromyResult | np.ndarray, kind: str = "spectral") -> float:
    """Induced 2-norm of M, or the Frobenius norm with ``kind="frobenius"``."""
    M = r.M if isinstance(r, MonodromyResult) else np.asarray(r)
    if kind == "spectral":
        return float(np.linalg.norm(M, 2))
    if kind == "frobenius":
        return float(np.linalg.norm(M, "fro"))
    raise ValueError(f"unknown norm kind {kind!r}")
