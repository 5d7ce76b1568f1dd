"""Closed-loop stabilization: one velocity impulse per admissible crossing."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .catalog import UpoRecord
from .control import VELOCITY_ACTUATION, ActuationProjection
from .dynamics import EARTH_MOON, SystemParams, cr3bp_derivative, velocity_to_si
from .integrator import DEFAULT_CONFIG, IntegratorConfig
from .sections import STATE_LABELS, SectionDef, admissible_crossings, find_anchor
from .stability import ManifoldDirections

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StabilizationConfig:
    eta_control: float = 1.0
    max_periods: int = 20
    divergence_radius: float = 2.0

    def __post_init__(self):
        if self.eta_control <= 0:
            raise ValueError("eta_control must be positive")
        if self.divergence_radius <= self.eta_control:
            raise ValueError("divergence_radius must exceed eta_control")
        if self.max_periods < 1:
            raise ValueError("max_periods must be at least 1")


@dataclass
class Crossing:
    time: float
    state: np.ndarray  # before the impulse
    deviation: float
    impulse: np.ndarray  # zeros when gated off


@dataclass
class StabilizationRun:
    anchor: np.ndarray
    crossings: list[Crossing] = field(default_factory=list)
    diverged: bool = False
    p: SystemParams = EARTH_MOON

    @property
    def periods_completed(self) -> int:
        """Crossings reached without divergence; one admissible crossing is one period."""
        return len(self.crossings) - int(self.diverged)

    @property
    def impulses(self) -> list[np.ndarray]:
        return [c.impulse for c in self.crossings if np.any(c.impulse)]

    @property
    def deviations(self) -> np.ndarray:
        return np.array([c.deviation for c in self.crossings])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["crossing", "time", *STATE_LABELS, "deviation", "du_x", "du_y", "du_z"])
            for i, c in enumerate(self.crossings, start=1):
                w.writerow([i, *(f"{v:.17g}" for v in (c.time, *c.state, c.deviation, *c.impulse))])


def _offset_on_section(offset, anchor, sec: SectionDef, p: SystemParams) -> np.ndarray:
    """Slide ``offset`` along the flow until it lies in the section hyperplane.

    Moving along the vector field keeps a monodromy eigenvector an eigenvector
    of the return map, whereas dropping the normal component would not.
    """
    d = np.array(offset, dtype=float)
    f = cr3bp_derivative(anchor, p)
    j = sec.zero_coordinate
    d = d - (d[j] / f[j]) * f
    d[j] = 0.0
    if sec.planar:
        d[[2, 5]] = 0.0
    return d


def stabilize(u: UpoRecord, sec: SectionDef, K_full, cfg: StabilizationConfig = StabilizationConfig(),
              icfg: IntegratorConfig = DEFAULT_CONFIG, p: SystemParams = EARTH_MOON, initial_offset=None,
              R: ActuationProjection = VELOCITY_ACTUATION, dirs: ManifoldDirections | None = None) -> StabilizationRun:
    """Fly the orbit from ``anchor + initial_offset`` with the feedback ``u_n = K (x_n - anchor)``.

    The default offset is ``1e-7`` along the unstable direction ``dirs.nu_u``.
    The offset is slid along the flow onto the section before the start.  A
    run stops after ``cfg.max_periods`` crossings, on divergence, or when the
    trajectory stops returning to the section.
    """
    cal, _, anchor = find_anchor(u, sec, icfg, p)
    K = np.asarray(K_full, dtype=float)
    if K.shape != (3, 6):
        raise ValueError("K_full must be 3x6")
    if initial_offset is None:
        if dirs is None:
            raise ValueError("either initial_offset or manifold directions are required")
        initial_offset = 1e-7 * dirs.nu_u
    state = anchor + _offset_on_section(initial_offset, anchor, cal, p)
    run = StabilizationRun(anchor.copy(), p=p)
    t_abs = 0.0
    for _ in range(cfg.max_periods):
        hit = next(admissible_crossings(state, cal, 2.0 * u.period, icfg, p), None)
        if hit is None:
            log.warning("no admissible return within two periods; stopping")
            run.diverged = True
            break
        t, x = hit
        t_abs += t
        dev = x - anchor
        dnorm = float(np.linalg.norm(dev))
        if dnorm > cfg.divergence_radius or not np.all(np.isfinite(x)):
            run.crossings.append(Crossing(t_abs, x, dnorm, np.zeros(3)))
            run.diverged = True
            break
        du = K @ dev if dnorm <= cfg.eta_control else np.zeros(3)
        run.crossings.append(Crossing(t_abs, x, dnorm, du))
        state = x + R.R @ du
    return run


def total_delta_v(run: StabilizationRun, first: int, last: int, p: SystemParams | None = None) -> float:
    """Sum of impulse magnitudes over crossings ``first..last`` (1-based, inclusive), in m/s."""
    if not 1 <= first <= last <= run.periods_completed:
        raise ValueError(f"range {first}..{last} outside 1..{run.periods_completed}")
    p = run.p if p is None else p
    mags = [np.linalg.norm(c.impulse) for c in run.crossings[first - 1:last]]
    return float(velocity_to_si(float(np.sum(mags)), p))


def _reference_direction(dirs: ManifoldDirections, sec: SectionDef, reading: str) -> np.ndarray:
    if reading == "velocity":
        idx = [3, 4] if sec.planar else [3, 4, 5]
    elif reading == "position":
        idx = [0, 1] if sec.planar else [0, 1, 2]
    else:
        raise ValueError(f"unknown reading {reading!r}; use 'velocity' or 'position'")
    v = dirs.nu_s[idx]
    nrm = np.linalg.norm(v)
    if nrm == 0:
        raise ValueError("stable direction has no components in the chosen subspace")
    return v / nrm


def impulse_manifold_angle(run: StabilizationRun, dirs: ManifoldDirections, sec: SectionDef,
                           reading: str = "position") -> float:
    """Mean angle in degrees between applied impulses and the stable direction.

    Impulses are compared in actuated-velocity space.  ``reading`` selects
    which sub-vector of ``nu_s`` is the reference: its position components
    (default) or its velocity components.  Sign-invariant.
    """
    imps = run.impulses
    if not imps:
        raise ValueError("run applied no impulses")
    ref = _reference_direction(dirs, sec, reading)
    k = len(ref)
    angles = []
    for du in imps:
        v = du[:k] / np.linalg.norm(du[:k])
        angles.append(np.degrees(np.arccos(min(1.0, abs(float(v @ ref))))))
    return float(np.mean(angles))


def run_summary(run: StabilizationRun, dirs: ManifoldDirections | None, sec: SectionDef,
                closed_loop_eigenvalues=None, dv_ranges=((1, 14),)) -> dict:
    out = {
        "periods_completed": run.periods_completed,
        "diverged": run.diverged,
        "n_impulses": len(run.impulses),
        "final_deviation": float(run.crossings[-1].deviation) if run.crossings else None,
        "delta_v_m_s": {},
    }
    for a, b in dv_ranges:
        if b <= run.periods_completed:
            out["delta_v_m_s"][f"{a}:{b}"] = total_delta_v(run, a, b)
    if run.periods_completed:
        out["delta_v_m_s"]["total"] = total_delta_v(run, 1, run.periods_completed)
    if dirs is not None and run.impulses:
        out["theta_velocity_deg"] = impulse_manifold_angle(run, dirs, sec, "velocity")
        out["theta_position_deg"] = impulse_manifold_angle(run, dirs, sec, "position")
    if closed_loop_eigenvalues is not None:
        ev = np.asarray(closed_loop_eigenvalues)
        out["closed_loop_eigenvalues"] = {"real": ev.real.tolist(), "imag": ev.imag.tolist()}
    return out
