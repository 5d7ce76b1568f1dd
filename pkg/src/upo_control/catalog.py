"""Periodic-orbit catalog: CSV ingestion, neighbour selection, periodicity checks."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .dynamics import EARTH_MOON, SystemParams, as_state, jacobi_constant
from .integrator import DEFAULT_CONFIG, IntegratorConfig, propagate

log = logging.getLogger(__name__)

HEADER = ["id", "family", "x", "y", "z", "vx", "vy", "vz", "period", "jacobi"]
JACOBI_FLAG_TOL = 1e-6

LYAPUNOV_TARGET_ID = "L1_lyap_C2.7501800"
HALO_TARGET_ID = "L1_haloN_C1.7979000"


class CatalogError(ValueError):
    pass


@dataclass
class UpoRecord:
    id: str
    family: str
    initial_state: np.ndarray
    period: float
    jacobi: float

    def __post_init__(self):
        self.initial_state = as_state(self.initial_state)
        if not self.period > 0:
            raise CatalogError(f"record {self.id!r}: period must be positive, got {self.period}")

    @property
    def planar(self) -> bool:
        return self.family.lower() == "lyapunov"


@dataclass
class Catalog:
    """Records sorted by Jacobi constant; ids are unique."""

    records: list[UpoRecord] = field(default_factory=list)
    flagged: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.records = sorted(self.records, key=lambda r: (r.jacobi, r.id))
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise CatalogError(f"duplicate record ids: {dupes}")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, key: str) -> UpoRecord:
        for r in self.records:
            if r.id == key:
                return r
        raise KeyError(key)

    def family(self, name: str) -> list[UpoRecord]:
        return [r for r in self.records if r.family.lower() == name.lower()]


def _parse_row(row: dict, lineno: int, p: SystemParams) -> tuple[UpoRecord, float]:
    try:
        state = np.array([float(row[k]) for k in ("x", "y", "z", "vx", "vy", "vz")])
        period = float(row["period"])
        stored_c = float(row["jacobi"])
        rec_id, family = row["id"].strip(), row["family"].strip()
    except (KeyError, TypeError, ValueError) as exc:
        raise CatalogError(f"line {lineno}: cannot parse record ({exc})") from exc
    if not rec_id:
        raise CatalogError(f"line {lineno}: empty id")
    try:
        rec = UpoRecord(rec_id, family, state, period, stored_c)
    except (CatalogError, ValueError) as exc:
        raise CatalogError(f"line {lineno}: {exc}") from exc
    return rec, abs(jacobi_constant(state, p) - stored_c)


def load_catalog(path, p: SystemParams = EARTH_MOON) -> Catalog:
    """Read a catalog CSV, recomputing each record's Jacobi constant.

    Records whose stored constant disagrees with the recomputed one by more
    than 1e-6 are kept but listed in ``Catalog.flagged``.
    """
    path = Path(path)
    text = path.read_text()
    if not text.strip():
        return Catalog([])
    reader = csv.DictReader(text.splitlines())
    missing = [h for h in HEADER if h not in (reader.fieldnames or [])]
    if missing:
        raise CatalogError(f"line 1: header is missing columns {missing}")
    records, flagged = [], []
    for lineno, row in enumerate(reader, start=2):
        if not any((v or "").strip() for v in row.values()):
            continue
        rec, mismatch = _parse_row(row, lineno, p)
        if mismatch > JACOBI_FLAG_TOL:
            msg = f"line {lineno}: record {rec.id!r} jacobi mismatch {mismatch:.3e}"
            log.warning(msg)
            flagged.append(msg)
        records.append(rec)
    return Catalog(records, flagged)


def save_catalog(cat: Catalog, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADER)
        for r in cat.records:
            w.writerow([r.id, r.family, *(repr(float(v)) for v in r.initial_state), repr(float(r.period)),
                        repr(float(r.jacobi))])


def bundled_catalog_path() -> Path:
    return Path(str(resources.files("upo_control") / "data" / "earth_moon_l1.csv"))


def select_neighbours(cat: Catalog, target: UpoRecord, m: int, dC: float) -> list[UpoRecord]:
    """Pick ``m`` same-family orbits at Jacobi levels ``target.jacobi + k*dC``.

    Levels alternate below/above the target (``k = -1, +1, -2, +2, ...``) so
    that an even ``m`` gives ``m/2`` on each side.  The nearest catalog entry
    to each level is taken; results are returned sorted by Jacobi constant.
    """
    if m <= 0:
        return []
    if dC <= 0:
        raise ValueError("dC must be positive")
    pool = [r for r in cat.family(target.family) if r.id != target.id]
    if not pool:
        raise CatalogError(f"no other {target.family} records in the catalog")
    cs = np.array([r.jacobi for r in pool])
    n_below = math.ceil(m / 2)
    n_above = m - n_below
    levels = [target.jacobi - k * dC for k in range(1, n_below + 1)]
    levels += [target.jacobi + k * dC for k in range(1, n_above + 1)]
    lo, hi = min(levels), max(levels)
    if lo < cs.min() - dC / 2 or hi > cs.max() + dC / 2:
        raise CatalogError(
            f"catalog spans C in [{cs.min():.6f}, {cs.max():.6f}] but neighbours need [{lo:.6f}, {hi:.6f}]"
        )
    chosen: dict[str, UpoRecord] = {}
    for level in levels:
        order = np.argsort(np.abs(cs - level), kind="stable")
        for i in order:
            if pool[i].id not in chosen:
                chosen[pool[i].id] = pool[i]
                break
    return sorted(chosen.values(), key=lambda r: r.jacobi)


def periodicity_residual(u: UpoRecord, cfg: IntegratorConfig = DEFAULT_CONFIG, p: SystemParams = EARTH_MOON) -> float:
    """Position error [LU] after flowing the record for one period."""
    final = propagate(u.initial_state, u.period, cfg, p)
    return float(np.linalg.norm(final[:3] - u.initial_state[:3]))
