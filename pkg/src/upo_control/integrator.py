"""Adaptive RK8(7) propagation, crossing location and variational equations.

All propagation goes through :func:`_march`, a plain adaptive loop over an
arbitrary right-hand side.  Event crossings are refined by re-stepping from the
left end of the bracketing step with the full 8th-order formula, so located
crossing states carry the same local accuracy as ordinary steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import _tableau as tab
from .dynamics import EARTH_MOON, SystemParams, as_state, cr3bp_derivative, variational_jacobian


class IntegrationError(RuntimeError):
    """Step budget exhausted or step size underflow."""


@dataclass(frozen=True)
class IntegratorConfig:
    rel_tol: float = 1e-12
    abs_tol: float = 1e-14
    max_step: float = math.inf
    min_step: float = 1e-13
    max_steps: int = 2_000_000

    def __post_init__(self):
        if self.rel_tol <= 0 or self.abs_tol <= 0:
            raise ValueError("tolerances must be positive")
        if not 0 < self.min_step <= self.max_step:
            raise ValueError("need 0 < min_step <= max_step")


DEFAULT_CONFIG = IntegratorConfig()


@dataclass
class Trajectory:
    """Accepted-step samples of a propagated state."""

    times: np.ndarray
    states: np.ndarray
    derivatives: np.ndarray = field(repr=False)

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    def __len__(self) -> int:
        return len(self.times)


@dataclass
class StmResult:
    final_state: np.ndarray
    stm: np.ndarray


def _rk_step(f, y, f0, h):
    """One RK8(7) step; returns (y8, error vector)."""
    k = np.empty((13, y.size))
    k[0] = f0
    A = tab.A
    for i in range(1, 13):
        k[i] = f(y + h * (A[i, :i] @ k[:i]))
    return y + h * (tab.B8 @ k), h * (tab.E @ k)


def _initial_step(f, y0, f0, direction, atol, rtol):
    scale = atol + rtol * np.abs(y0)
    d0 = np.max(np.abs(y0) / scale)
    d1 = np.max(np.abs(f0) / scale)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    y1 = y0 + direction * h0 * f0
    f1 = f(y1)
    d2 = np.max(np.abs(f1 - f0) / scale) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / (tab.ORDER + 1))
    return min(100 * h0, h1)


def _march(
    f: Callable[[np.ndarray], np.ndarray],
    y0: np.ndarray,
    t0: float,
    tf: float,
    cfg: IntegratorConfig,
    atol: np.ndarray,
) -> Iterator[tuple[float, np.ndarray, np.ndarray, float, np.ndarray, np.ndarray]]:
    """Yield accepted steps ``(t_old, y_old, f_old, t_new, y_new, f_new)``.

    Forward or backward in time; the last step lands exactly on ``tf``.
    """
    direction = 1.0 if tf >= t0 else -1.0
    span = abs(tf - t0)
    if span == 0.0:
        return
    rtol = cfg.rel_tol
    t, y = t0, y0
    fy = f(y)
    h = min(_initial_step(f, y, fy, direction, atol, rtol), cfg.max_step, span)
    steps = 0
    rejected_last = False
    while True:
        remaining = abs(tf - t)
        last = h >= remaining * (1.0 - 1e-14)
        if last:
            h = remaining
        y_new, err = _rk_step(f, y, fy, direction * h)
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        en = float(np.max(np.abs(err) / scale))
        if not math.isfinite(en):
            en = 1e10
        if en <= 1.0:
            t_new = tf if last else t + direction * h
            f_new = f(y_new)
            yield t, y, fy, t_new, y_new, f_new
            t, y, fy = t_new, y_new, f_new
            steps += 1
            if last:
                return
            if steps >= cfg.max_steps:
                raise IntegrationError(f"step budget of {cfg.max_steps} exhausted at t={t}")
            fac = 0.9 * en ** (-1.0 / tab.ORDER) if en > 0 else 4.0
            fac = min(4.0, max(0.2, fac))
            if rejected_last:
                fac = min(fac, 1.0)
            h = min(h * fac, cfg.max_step)
            rejected_last = False
        else:
            h = h * max(0.2, 0.9 * en ** (-1.0 / tab.ORDER))
            rejected_last = True
            if h < cfg.min_step:
                raise IntegrationError(f"step size underflow (h={h:.3e}) at t={t}")


def _state_rhs(p: SystemParams):
    return lambda y: cr3bp_derivative(y, p)


def integrate(
    s0,
    t_span,
    cfg: IntegratorConfig = DEFAULT_CONFIG,
    p: SystemParams = EARTH_MOON,
) -> Trajectory:
    """Propagate ``s0`` over ``t_span = (t0, tf)`` recording every accepted step."""
    y0 = as_state(s0)
    t0, tf = float(t_span[0]), float(t_span[1])
    f = _state_rhs(p)
    times, states, derivs = [t0], [y0], [f(y0)]
    atol = np.full(6, cfg.abs_tol)
    for _, _, _, t_new, y_new, f_new in _march(f, y0, t0, tf, cfg, atol):
        times.append(t_new)
        states.append(y_new)
        derivs.append(f_new)
    return Trajectory(np.array(times), np.array(states), np.array(derivs))


def propagate(s0, dt: float, cfg: IntegratorConfig = DEFAULT_CONFIG, p: SystemParams = EARTH_MOON) -> np.ndarray:
    """Flow map: state after ``dt`` TU (no sample storage)."""
    y = as_state(s0)
    f = _state_rhs(p)
    atol = np.full(6, cfg.abs_tol)
    for *_, y_new, _ in _march(f, y, 0.0, float(dt), cfg, atol):
        y = y_new
    return y


def _refine_crossing(f, event, t_old, y_old, f_old, t_new, y_new, g_old, g_new):
    """Locate the zero of ``event`` inside an accepted step (Illinois method)."""
    h = t_new - t_old
    a, b = 0.0, h
    ga, gb = g_old, g_new
    ya, yb = y_old, y_new
    side = 0
    for _ in range(100):
        if gb == ga:
            break
        tau = b - gb * (b - a) / (gb - ga)
        if not (min(a, b) < tau < max(a, b)):
            tau = 0.5 * (a + b)
        y_tau, _ = _rk_step(f, y_old, f_old, tau)
        g_tau = float(event(y_tau))
        if g_tau == 0.0:
            return t_old + tau, y_tau
        if (g_tau > 0) == (gb > 0):
            b, gb, yb = tau, g_tau, y_tau
            if side == -1:
                ga *= 0.5
            side = -1
        else:
            a, ga, ya = tau, g_tau, y_tau
            if side == 1:
                gb *= 0.5
            side = 1
        if abs(b - a) < 1e-14 * max(1.0, abs(t_old)):
            break
    ga_true = float(event(ya))
    gb_true = float(event(yb))
    if abs(ga_true) <= abs(gb_true):
        return t_old + a, ya
    return t_old + b, yb


def iter_crossings(
    s0,
    t_span,
    event: Callable[[np.ndarray], float],
    direction: int = 0,
    cfg: IntegratorConfig = DEFAULT_CONFIG,
    p: SystemParams = EARTH_MOON,
) -> Iterator[tuple[float, np.ndarray]]:
    """Lazily yield ``(t, state)`` at every zero of ``event`` along the flow.

    ``direction`` is +1 for increasing crossings, -1 for decreasing, 0 for both.
    A start exactly on the surface is not reported.
    """
    y0 = as_state(s0)
    t0, tf = float(t_span[0]), float(t_span[1])
    f = _state_rhs(p)
    atol = np.full(6, cfg.abs_tol)
    g_prev = float(event(y0))
    for t_old, y_old, f_old, t_new, y_new, f_new in _march(f, y0, t0, tf, cfg, atol):
        g_new = float(event(y_new))
        up = g_prev < 0.0 <= g_new
        down = g_prev > 0.0 >= g_new
        if (up and direction >= 0) or (down and direction <= 0):
            if g_new == 0.0:
                yield t_new, y_new
            else:
                yield _refine_crossing(f, event, t_old, y_old, f_old, t_new, y_new, g_prev, g_new)
        g_prev = g_new


def integrate_to_events(
    s0,
    t_span,
    event: Callable[[np.ndarray], float],
    direction: int = 0,
    cfg: IntegratorConfig = DEFAULT_CONFIG,
    p: SystemParams = EARTH_MOON,
) -> list[tuple[float, np.ndarray]]:
    """All crossings of ``event`` over ``t_span``; see :func:`iter_crossings`."""
    return list(iter_crossings(s0, t_span, event, direction, cfg, p))


def _stm_rhs(p: SystemParams):
    def f(Y):
        x = Y[:6]
        phi = Y[6:].reshape(6, 6)
        out = np.empty(42)
        out[:6] = cr3bp_derivative(x, p)
        out[6:] = (variational_jacobian(x, p) @ phi).ravel()
        return out

    return f


def propagate_with_stm(
    s0,
    T: float,
    cfg: IntegratorConfig = DEFAULT_CONFIG,
    p: SystemParams = EARTH_MOON,
) -> StmResult:
    """Integrate the state together with its 6x6 state transition matrix."""
    y = np.concatenate([as_state(s0), np.eye(6).ravel()])
    f = _stm_rhs(p)
    atol = np.concatenate([np.full(6, cfg.abs_tol), np.full(36, cfg.abs_tol * 1e3)])
    for *_, y_new, _ in _march(f, y, 0.0, float(T), cfg, atol):
        y = y_new
    return StmResult(y[:6].copy(), y[6:].reshape(6, 6).copy())
