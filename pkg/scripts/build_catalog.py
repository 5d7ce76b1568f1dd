"""Generate the bundled L1 Lyapunov / northern-halo initial-condition catalog.

Symmetric periodic orbits are corrected by single shooting on the half-period
map (perpendicular y = 0 crossings).  The families are traced by continuation,
then refined at fixed Jacobi constant on fine grids around the two studied
orbits.  Lyapunov states are stored at the x < L1 crossing, halo states at
the z < 0 crossing next to the Moon.  Run once; the output CSV ships with the package.

    python scripts/build_catalog.py [--out src/upo_control/data/earth_moon_l1.csv]
"""

from __future__ import annotations

import argparse
import logging
from pathlib import Path

import numpy as np

from upo_control.catalog import Catalog, UpoRecord, save_catalog
from upo_control.dynamics import EARTH_MOON, effective_potential, jacobi_constant, lagrange_points
from upo_control.integrator import iter_crossings

log = logging.getLogger("build_catalog")

LYAP_TARGET_C = 2.75018
HALO_TARGET_C = 1.7979


def _half_period(s0):
    for t, s in iter_crossings(s0, (0.0, 20.0), lambda y: y[1], -1):
        return t, s
    raise RuntimeError("no return to y = 0")


def _state(x0, z0, vy0):
    return np.array([x0, 0.0, z0, 0.0, vy0, 0.0])


def _vy_at(x0, z0, C):
    v2 = 2.0 * effective_potential([x0, 0.0, z0]) - C
    if v2 <= 0:
        raise RuntimeError("outside the Hill region")
    return np.sqrt(v2)


def _newton(residual, v, h=1e-8, tol=1e-13, maxiter=40):
    v = np.asarray(v, dtype=float)
    for _ in range(maxiter):
        g = residual(v)
        if np.max(np.abs(g)) < tol:
            return v
        jac = np.empty((g.size, v.size))
        for j in range(v.size):
            e = np.zeros(v.size)
            e[j] = h
            jac[:, j] = (residual(v + e) - residual(v - e)) / (2 * h)
        dv = np.linalg.lstsq(jac, -g, rcond=None)[0]
        v = v + dv
        if np.max(np.abs(dv)) < 1e-14 and np.max(np.abs(g)) < 1e-11:
            return v
    raise RuntimeError(f"corrector did not converge, |g|={np.max(np.abs(g)):.2e}")


# --- Lyapunov -----------------------------------------------------------------

def lyapunov_family(c_stop=2.745):
    """Continuation in x0 from a small orbit about L1; returns [(x0, vy0)]."""
    l1 = lagrange_points()[0].position[0]
    res = lambda v, x0: np.array([_half_period(_state(x0, 0.0, v[0]))[1][3]])  # noqa: E731
    xs, vys, periods = [], [], []
    x0, dx = l1 - 0.002, 0.002
    vy = 3.2 * 0.002 * 2.33
    while True:
        if len(xs) >= 2:
            vy = vys[-1] + (vys[-1] - vys[-2]) * (x0 - xs[-1]) / (xs[-1] - xs[-2])
        elif len(xs) == 1:
            vy = vys[-1] * (l1 - x0) / (l1 - xs[-1])
        try:
            vyc = _newton(lambda v: res(v, x0), [vy])[0]
            t, _ = _half_period(_state(x0, 0.0, vyc))
            if periods and abs(2 * t - periods[-1]) > 0.05 * periods[-1]:
                raise RuntimeError("period jump")
        except RuntimeError:
            dx /= 2
            x0 = xs[-1] - dx
            continue
        xs.append(x0)
        vys.append(vyc)
        periods.append(2 * t)
        if jacobi_constant(_state(x0, 0.0, vyc)) < c_stop:
            return list(zip(xs, vys))
        dx = min(dx * 1.3, 0.01)
        x0 -= dx


def lyapunov_at(C, x_guess):
    res = lambda v: np.array([_half_period(_state(v[0], 0.0, _vy_at(v[0], 0.0, C)))[1][3]])  # noqa: E731
    x0 = _newton(res, [x_guess])[0]
    s = _state(x0, 0.0, _vy_at(x0, 0.0, C))
    return s, 2 * _half_period(s)[0]


# --- Halo ---------------------------------------------------------------------

def halo_family(c_stop=1.75):
    """Pseudo-arclength continuation of the northern L1 halo family."""

    def g(v):
        s = _half_period(_state(*v))[1]
        return np.array([s[3], s[5]])

    def jac(v, h=1e-8):
        out = np.empty((2, 3))
        for j in range(3):
            e = np.zeros(3)
            e[j] = h
            out[:, j] = (g(v + e) - g(v - e)) / (2 * h)
        return out

    # seed near the Lyapunov bifurcation, corrected at fixed z0
    z0 = 0.0224
    v = _newton(lambda w: g(np.array([w[0], z0, w[1]])), [0.8234, 0.1343])
    v = np.array([v[0], z0, v[1]])
    out = [v]
    tangent, ds = None, 0.002
    while True:
        n = np.linalg.svd(jac(v))[2][-1]
        if (tangent is not None and n @ tangent < 0) or (tangent is None and n[1] < 0):
            n = -n
        tangent = n
        guess = v + ds * tangent
        try:
            vn = _newton(lambda w: np.append(g(w), (w - v) @ tangent - ds), guess)
        except RuntimeError:
            ds /= 2
            if ds < 1e-6:
                raise
            continue
        v = vn
        out.append(v)
        if jacobi_constant(_state(*v)) < c_stop:
            return out
        ds = min(ds * 1.3, 0.02)


def halo_at(C, x_guess, z_guess):
    def res(w):
        s = _half_period(_state(w[0], w[1], _vy_at(w[0], w[1], C)))[1]
        return np.array([s[3], s[5]])

    x0, z0 = _newton(res, [x_guess, z_guess])
    s = _state(x0, z0, _vy_at(x0, z0, C))
    return s, 2 * _half_period(s)[0]


def _interp_guess(family, C):
    cs = np.array([jacobi_constant(_state(*f)) if len(f) == 3 else jacobi_constant(_state(f[0], 0, f[1]))
                   for f in family])
    i = int(np.argmin(np.abs(cs - C)))
    j = i + 1 if i + 1 < len(cs) else i - 1
    w = (C - cs[i]) / (cs[j] - cs[i])
    return np.asarray(family[i]) + w * (np.asarray(family[j]) - np.asarray(family[i]))


def _near_moon(s):
    """Move a halo state at its z > 0 perpendicular crossing to the z < 0 one."""
    _, h = _half_period(s)
    h = h.copy()
    h[[1, 3, 5]] = 0.0  # perpendicular crossing by symmetry
    return h


def _record(prefix, family_name, s, T):
    C = jacobi_constant(s)
    return UpoRecord(f"{prefix}_C{C:.7f}", family_name, s, T, C)


def build(lyap_step=1.75e-4 / 5, lyap_halfwidth=60, halo_step=2.5e-5, halo_halfwidth=80, coarse=True):
    records = []
    log.info("tracing Lyapunov family")
    lyap = lyapunov_family()
    if coarse:
        for x0, vy in lyap[::2]:
            s = _state(x0, 0.0, vy)
            records.append(_record("L1_lyap", "Lyapunov", s, 2 * _half_period(s)[0]))
    for k in range(-lyap_halfwidth, lyap_halfwidth + 1):
        C = LYAP_TARGET_C + k * lyap_step
        x_guess = _interp_guess(lyap, C)[0]
        s, T = lyapunov_at(C, x_guess)
        records.append(_record("L1_lyap", "Lyapunov", s, T))
    log.info("tracing halo family")
    halo = halo_family()
    if coarse:
        for v in halo[::3]:
            s = _state(*v)
            records.append(_record("L1_haloN", "Halo", _near_moon(s), 2 * _half_period(s)[0]))
    for k in range(-halo_halfwidth, halo_halfwidth + 1):
        C = HALO_TARGET_C + k * halo_step
        guess = _interp_guess(halo, C)
        s, T = halo_at(C, guess[0], guess[1])
        records.append(_record("L1_haloN", "Halo", _near_moon(s), T))
    uniq = {}
    for r in records:
        uniq.setdefault(r.id, r)
    return Catalog(list(uniq.values()))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path(__file__).parents[1] / "src/upo_control/data/earth_moon_l1.csv")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cat = build()
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_catalog(cat, args.out)
    log.info("wrote %d records to %s", len(cat), args.out)


if __name__ == "__main__":
    main()
