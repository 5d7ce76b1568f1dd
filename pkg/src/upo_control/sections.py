"""Surfaces of section, crossing collection and the augmented sampling scheme."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace

import numpy as np

from .catalog import UpoRecord
from .dynamics import EARTH_MOON, SystemParams, cr3bp_derivative
from .integrator import DEFAULT_CONFIG, IntegratorConfig, iter_crossings

log = logging.getLogger(__name__)

STATE_LABELS = ("x", "y", "z", "vx", "vy", "vz")
ON_SECTION_TOL = 1e-10


@dataclass(frozen=True)
class SectionDef:
    """Hyperplane ``state[zero_coordinate] = 0`` restricted to one branch.

    ``region`` is ``(index, op, value)`` with ``op`` one of ``"<"`` or ``">"``.
    ``crossing_direction`` is the required sign of d/dt state[zero_coordinate]
    at admissible crossings; ``None`` until calibrated against an orbit.
    ``planar`` marks sections used for in-plane families, whose z and vz are
    pinned to zero.
    """

    name: str
    zero_coordinate: int
    region: tuple[int, str, float]
    planar: bool
    crossing_direction: int | None = None

    def __post_init__(self):
        if self.region[1] not in ("<", ">"):
            raise ValueError(f"region operator must be '<' or '>', got {self.region[1]!r}")
        if self.crossing_direction not in (None, -1, 1):
            raise ValueError("crossing_direction must be -1, +1 or None")

    @property
    def active(self) -> tuple[int, ...]:
        """State indices left free on the section."""
        fixed = {self.zero_coordinate}
        if self.planar:
            fixed |= {2, 5}
        return tuple(i for i in range(6) if i not in fixed)

    def in_region(self, s) -> bool:
        idx, op, val = self.region
        return s[idx] < val if op == "<" else s[idx] > val

    def crossing_rate(self, s, p: SystemParams = EARTH_MOON) -> float:
        j = self.zero_coordinate
        return float(s[j + 3]) if j < 3 else float(cr3bp_derivative(s, p)[j])

    def admissible(self, s, p: SystemParams = EARTH_MOON) -> bool:
        if not self.in_region(s):
            return False
        if self.crossing_direction is None:
            return True
        return np.sign(self.crossing_rate(s, p)) == self.crossing_direction


# Region bound for the Lyapunov sections; L1 sits at x = 0.83692.
LYAPUNOV_SPLIT_X = 0.8369

SECTIONS = {
    "S1L": SectionDef("S1L", 1, (0, "<", LYAPUNOV_SPLIT_X), planar=True),
    "S2L": SectionDef("S2L", 1, (0, ">", LYAPUNOV_SPLIT_X), planar=True),
    "S1H": SectionDef("S1H", 1, (2, ">", 0.0), planar=False),
    "S2H": SectionDef("S2H", 1, (2, "<", 0.0), planar=False),
}

SECTION_FAMILY = {"S1L": "Lyapunov", "S2L": "Lyapunov", "S1H": "Halo", "S2H": "Halo"}


def get_section(name: str) -> SectionDef:
    try:
        return SECTIONS[name.upper()]
    except KeyError:
        raise ValueError(f"unknown section {name!r}; expected one of {sorted(SECTIONS)}") from None


def section_event(sec: SectionDef):
    """Scalar event function whose zeros are hyperplane hits."""
    j = sec.zero_coordinate
    return lambda s: s[j]


def admissible_crossings(s0, sec: SectionDef, t_max: float, cfg: IntegratorConfig = DEFAULT_CONFIG,
                         p: SystemParams = EARTH_MOON):
    """Lazily yield admissible ``(t, state)`` crossings of ``sec`` up to ``t_max``.

    A start within ``ON_SECTION_TOL`` of the hyperplane is snapped onto it so
    that round-off in a refined crossing is not reported as a new crossing.
    """
    s0 = np.array(s0, dtype=float)
    if abs(s0[sec.zero_coordinate]) <= ON_SECTION_TOL:
        s0[sec.zero_coordinate] = 0.0
    direction = sec.crossing_direction or 0
    for t, s in iter_crossings(s0, (0.0, t_max), section_event(sec), direction, cfg, p):
        if sec.admissible(s, p):
            yield t, s


def find_anchor(u: UpoRecord, sec: SectionDef, cfg: IntegratorConfig = DEFAULT_CONFIG,
                p: SystemParams = EARTH_MOON) -> tuple[SectionDef, float, np.ndarray]:
    """Locate the orbit's admissible crossing and calibrate the crossing direction.

    Returns ``(calibrated section, time of crossing, anchor state)``.  An
    initial state already lying on the admissible branch is its own anchor.
    """
    s0 = u.initial_state
    j = sec.zero_coordinate
    if abs(s0[j]) < 1e-14 and sec.in_region(s0):
        t, anchor = 0.0, s0.copy()
    else:
        probe = replace(sec, crossing_direction=None)
        for t, anchor in admissible_crossings(s0, probe, 1.05 * u.period, cfg, p):
            break
        else:
            raise ValueError(f"orbit {u.id!r} has no admissible crossing of {sec.name}")
    direction = int(np.sign(sec.crossing_rate(anchor, p)))
    if direction == 0:
        raise ValueError(f"orbit {u.id!r} is tangent to {sec.name} at its crossing")
    if sec.crossing_direction is not None and sec.crossing_direction != direction:
        raise ValueError(f"{sec.name}: orbit crosses with direction {direction}, section requires "
                         f"{sec.crossing_direction}")
    return replace(sec, crossing_direction=direction), t, anchor


@dataclass(frozen=True)
class AugmentationConfig:
    delta_v: float = 2.5e-7
    m: int = 10
    dC: float = 1.75e-4
    eta: float = 1.0
    crossings_per_ic: int = 2
    perturb_z: bool | None = None  # None: only for non-planar sections
    time_cap_periods: float = 4.0

    def __post_init__(self):
        if self.delta_v < 0:
            raise ValueError("delta_v must be non-negative")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.crossings_per_ic < 2:
            raise ValueError("need at least two crossings per initial condition to form a pair")


@dataclass
class DatasetPair:
    """Consecutive-crossing pairs; row i of X2 follows row i of X1."""

    X1: np.ndarray
    X2: np.ndarray
    source: np.ndarray  # index of the generating initial condition per row

    def __post_init__(self):
        self.X1 = np.asarray(self.X1, dtype=float).reshape(-1, 6)
        self.X2 = np.asarray(self.X2, dtype=float).reshape(-1, 6)
        self.source = np.asarray(self.source, dtype=int).reshape(-1)
        if not len(self.X1) == len(self.X2) == len(self.source):
            raise ValueError("X1, X2 and source must have equal length")

    def __len__(self) -> int:
        return len(self.X1)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"{c}_1" for c in STATE_LABELS] + [f"{c}_2" for c in STATE_LABELS])
            for a, b in zip(self.X1, self.X2):
                w.writerow([f"{v:.17g}" for v in (*a, *b)])

    @classmethod
    def from_csv(cls, path) -> "DatasetPair":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if data.size == 0:
            return cls(np.empty((0, 6)), np.empty((0, 6)), np.empty(0, dtype=int))
        return cls(data[:, :6], data[:, 6:12], np.arange(len(data)))


def build_augmented_ics(base: list[UpoRecord] | list[np.ndarray], delta_v: float,
                        perturb_z: bool = False) -> list[np.ndarray]:
    """Each base state followed by its +-delta_v kicks in vx, vy (and vz)."""
    if len(base) == 0:
        raise ValueError("need at least one base orbit")
    axes = (3, 4, 5) if perturb_z else (3, 4)
    out = []
    for b in base:
        s = np.array(b.initial_state if isinstance(b, UpoRecord) else b, dtype=float)
        out.append(s.copy())
        for k in axes:
            for sign in (1.0, -1.0):
                kicked = s.copy()
                kicked[k] += sign * delta_v
                out.append(kicked)
    return out


def collect_pairs(ics, sec: SectionDef, anchor, cfg: AugmentationConfig, period: float,
                  integ: IntegratorConfig = DEFAULT_CONFIG, p: SystemParams = EARTH_MOON) -> DatasetPair:
    """Record admissible crossings per initial condition and pair consecutive ones.

    An initial condition lying on the admissible branch of the section counts
    as its own first crossing.  ``sec`` must carry a calibrated crossing
    direction (see :func:`find_anchor`).  Pairs with either member outside the
    ``eta`` ball about ``anchor`` are dropped.
    """
    if sec.crossing_direction is None:
        raise ValueError("section crossing direction is not calibrated")
    anchor = np.asarray(anchor, dtype=float)
    if abs(anchor[sec.zero_coordinate]) > ON_SECTION_TOL:
        raise ValueError("anchor does not lie on the section")
    t_cap = cfg.time_cap_periods * period
    X1, X2, src = [], [], []
    for i, s0 in enumerate(ics):
        s0 = np.asarray(s0, dtype=float)
        on_section = abs(s0[sec.zero_coordinate]) <= ON_SECTION_TOL and sec.admissible(s0, p)
        hits = [s0.copy()] if on_section else []
        for _, s in admissible_crossings(s0, sec, t_cap, integ, p):
            hits.append(s)
            if len(hits) == cfg.crossings_per_ic:
                break
        if len(hits) < cfg.crossings_per_ic:
            log.warning("initial condition %d: only %d of %d crossings before the time cap", i, len(hits),
                        cfg.crossings_per_ic)
        for a, b in zip(hits[:-1], hits[1:]):
            if np.linalg.norm(a - anchor) <= cfg.eta and np.linalg.norm(b - anchor) <= cfg.eta:
                X1.append(a)
                X2.append(b)
                src.append(i)
    return DatasetPair(np.array(X1).reshape(-1, 6), np.array(X2).reshape(-1, 6), np.array(src, dtype=int))


def sample_section_data(target: UpoRecord, neighbours: list[UpoRecord], sec: SectionDef,
                        cfg: AugmentationConfig, integ: IntegratorConfig = DEFAULT_CONFIG,
                        p: SystemParams = EARTH_MOON) -> tuple[DatasetPair, np.ndarray, SectionDef]:
    """Augment target + neighbours, integrate, and assemble the training pairs.

    ``delta_v = 0`` switches augmentation off: only the base orbits are used.
    """
    cal, _, anchor = find_anchor(target, sec, integ, p)
    perturb_z = (not sec.planar) if cfg.perturb_z is None else cfg.perturb_z
    base = [target, *neighbours]
    if cfg.delta_v == 0:
        ics = [b.initial_state.copy() for b in base]
    else:
        ics = build_augmented_ics(base, cfg.delta_v, perturb_z)
    data = collect_pairs(ics, cal, anchor, cfg, target.period, integ, p)
    return data, anchor, cal
