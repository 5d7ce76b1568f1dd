"""State-feedback synthesis on the discovered linear map through an LMI.

The feasibility problem for a radius R and margin eps,

    Q >= eps I,   [[Q, (AQ + BY)^T], [AQ + BY, Q]] >= eps I,   ||(Q, Y)||_F < R,

is homogeneous in (Q, Y).  It is therefore solved once in normalized form,

    maximize s   subject to   Q >= s I,  block >= s I,  ||(Q, Y)||_F <= 1,

by a log-barrier path-following method.  The problem at radius R is
feasible exactly when the optimum s* satisfies s* >= eps / R, and the
returned interior point is the normalized optimum rescaled onto the ball.
Because the feasible set shrinks onto that point as R approaches eps / s*,
it is the only choice that is continuous down to the minimal radius; the
gain is consequently the same for every feasible radius.  When the target
exceeds the optimum, the barrier duality gap certifies infeasibility.

:func:`minimum_effort_gain` gives the cheapest gain that cancels the unstable
mode.  It leaves the neutral multiplier on the unit circle, so it is not
LMI-certifiable, and is provided as an uncertified reference.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .discovery import LinearizedMap
from .sections import SectionDef

log = logging.getLogger(__name__)

DEFAULT_MARGIN = 1e-12
# normalized robustness below which a certificate is no longer numerically meaningful
MIN_NORMALIZED_MARGIN = 1e-9


class LmiError(RuntimeError):
    pass


@dataclass(frozen=True)
class ActuationProjection:
    """6x3 matrix injecting an impulse (dvx, dvy, dvz) into the velocity states."""

    R: np.ndarray = field(default_factory=lambda: np.vstack([np.zeros((3, 3)), np.eye(3)]))

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float)
        if R.shape != (6, 3):
            raise ValueError("actuation projection must be 6x3")
        if not (np.all(np.isin(R, (0.0, 1.0))) and np.all(R.sum(axis=0) == 1) and np.all(R.sum(axis=1) <= 1)):
            raise ValueError("actuation projection must select distinct unit state directions")
        object.__setattr__(self, "R", R)

    @property
    def targets(self) -> list[int]:
        """State index driven by each actuation channel."""
        return [int(np.argmax(self.R[:, c])) for c in range(3)]


VELOCITY_ACTUATION = ActuationProjection()


@dataclass
class Controllability:
    matrix: np.ndarray
    rank: int
    full_rank: bool


def controllability(A: np.ndarray, B: np.ndarray) -> Controllability:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    n = A.shape[0]
    blocks, blk = [], B
    for _ in range(n):
        blocks.append(blk)
        blk = A @ blk
    C = np.hstack(blocks)
    sv = np.linalg.svd(C, compute_uv=False)
    tol = n * np.finfo(float).eps * (sv[0] if sv.size else 0.0)
    rank = int(np.sum(sv > tol)) if sv.size and sv[0] > 0 else 0
    return Controllability(C, rank, rank == n)


@dataclass
class LmiProblem:
    A_active: np.ndarray
    B_active: np.ndarray
    radius: float
    margin: float = DEFAULT_MARGIN

    def __post_init__(self):
        self.A_active = np.atleast_2d(np.asarray(self.A_active, dtype=float))
        n = self.A_active.shape[0]
        self.B_active = np.asarray(self.B_active, dtype=float).reshape(n, -1)
        if self.A_active.shape != (n, n) or n == 0:
            raise ValueError("A_active must be a non-empty square matrix")
        if not (self.radius > 0 and self.margin > 0):
            raise ValueError("radius and margin must be positive")

    @property
    def n(self) -> int:
        return self.A_active.shape[0]

    @property
    def k(self) -> int:
        return self.B_active.shape[1]

    def with_radius(self, radius: float) -> "LmiProblem":
        return LmiProblem(self.A_active, self.B_active, radius, self.margin)


def lmi_block(A: np.ndarray, B: np.ndarray, Q: np.ndarray, Y: np.ndarray) -> np.ndarray:
    M = A @ Q + B @ Y
    return np.block([[Q, M.T], [M, Q]])


@dataclass
class Certificate:
    min_eig_Q: float
    min_eig_block: float
    norm: float
    radius: float
    margin: float

    @property
    def ok(self) -> bool:
        return self.min_eig_Q >= self.margin and self.min_eig_block >= self.margin and self.norm < self.radius


def verify_certificate(prob: LmiProblem, Q: np.ndarray, Y: np.ndarray) -> Certificate:
    """Independent eigenvalue check of the three LMI conditions."""
    Qs = 0.5 * (Q + Q.T)
    blk = lmi_block(prob.A_active, prob.B_active, Qs, Y)
    blk = 0.5 * (blk + blk.T)
    return Certificate(
        float(np.linalg.eigvalsh(Qs)[0]),
        float(np.linalg.eigvalsh(blk)[0]),
        float(np.sqrt(np.sum(Q ** 2) + np.sum(Y ** 2))),
        prob.radius,
        prob.margin,
    )


@dataclass
class LmiSolution:
    Q: np.ndarray
    Y: np.ndarray
    K_active: np.ndarray
    certificate: Certificate
    normalized_margin: float
    K_full: np.ndarray | None = None


@dataclass
class Infeasible:
    """No point meets the margin inside the ball.

    ``best_normalized_margin`` is the best robustness found on the unit ball;
    ``upper_bound`` bounds the optimum from above (barrier duality gap), so
    ``upper_bound < required`` certifies infeasibility.
    """

    best_normalized_margin: float
    upper_bound: float
    required: float

    @property
    def best_min_eig(self) -> float:
        return self.best_normalized_margin


# --- normalized barrier solver -------------------------------------------------------------------------


class _Structure:
    """Coefficient matrices of the normalized problem in the stacked variable x = (Q, Y, s)."""

    def __init__(self, A: np.ndarray, B: np.ndarray):
        n, k = A.shape[0], B.shape[1]
        self.n, self.k = n, k
        self.q_index = [(i, j) for i in range(n) for j in range(i, n)]
        nq, ny = len(self.q_index), k * n
        self.N = nq + ny + 1
        F1 = np.zeros((self.N, n, n))
        F2 = np.zeros((self.N, 2 * n, 2 * n))
        w = np.zeros(self.N)
        for v, (i, j) in enumerate(self.q_index):
            S = np.zeros((n, n))
            S[i, j] = S[j, i] = 1.0
            F1[v] = S
            F2[v] = np.block([[S, (A @ S).T], [A @ S, S]])
            w[v] = 1.0 if i == j else 2.0
        for v in range(ny):
            p_, q_ = divmod(v, n)
            E = np.zeros((k, n))
            E[p_, q_] = 1.0
            BE = B @ E
            F2[nq + v] = np.block([[np.zeros((n, n)), BE.T], [BE, np.zeros((n, n))]])
            w[nq + v] = 1.0
        F1[-1] = -np.eye(n)
        F2[-1] = -np.eye(2 * n)
        self.F1, self.F2, self.w = F1, F2, w
        self.nq = nq
        self.nu = 3 * n + 1  # barrier parameter

    def unpack(self, x):
        n = self.n
        Q = np.zeros((n, n))
        for v, (i, j) in enumerate(self.q_index):
            Q[i, j] = Q[j, i] = x[v]
        Y = x[self.nq:self.nq + self.k * n].reshape(self.k, n)
        return Q, Y, x[-1]

    def pack(self, Q, Y, s):
        return np.concatenate([[Q[i, j] for i, j in self.q_index], np.ravel(Y), [s]])

    def mats(self, x):
        return np.tensordot(x, self.F1, 1), np.tensordot(x, self.F2, 1), 1.0 - self.w @ (x * x)


def _chol(M):
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        return None


def _barrier_terms(st: _Structure, x, t):
    F1, F2, h = st.mats(x)
    L1, L2 = _chol(F1), _chol(F2)
    if L1 is None or L2 is None or h <= 0:
        return None
    f = -t * x[-1] - 2 * np.sum(np.log(np.diag(L1))) - 2 * np.sum(np.log(np.diag(L2))) - np.log(h)
    return f, (L1, L2, h)


def _newton_system(st: _Structure, x, t, cache):
    L1, L2, h = cache
    g = np.zeros(st.N)
    g[-1] = -t
    H = np.zeros((st.N, st.N))
    for L, F in ((L1, st.F1), (L2, st.F2)):
        Linv = np.linalg.inv(L)
        G = Linv @ F @ Linv.T  # (N, m, m): L^-1 F_i L^-T
        Gf = G.reshape(st.N, -1)
        g -= np.trace(G, axis1=1, axis2=2)
        H += Gf @ Gf.T
    wx = st.w * x
    g += 2 * wx / h
    H += np.diag(2 * st.w / h) + 4 * np.outer(wx, wx) / h ** 2
    return g, H


def _solve_normalized(A, B, max_outer: int = 60, mu: float = 8.0, gap_tol: float = 1e-10):
    """Path-follow the normalized problem until the duality gap is below ``gap_tol``.

    Returns ``(x, structure, status, best_s, upper_bound)``.
    """
    st = _Structure(A, B)
    n = st.n
    Q0 = np.eye(n) / (2 * np.sqrt(n))
    Y0 = np.zeros((st.k, n))
    blk = lmi_block(A, B, Q0, Y0)
    s0 = min(np.linalg.eigvalsh(Q0)[0], np.linalg.eigvalsh(blk)[0]) - 1.0
    x = st.pack(Q0, Y0, s0)
    best_s, upper = s0, np.inf
    t = 1.0
    for _ in range(max_outer):
        for _ in range(100):
            f, cache = _barrier_terms(st, x, t)
            g, H = _newton_system(st, x, t, cache)
            try:
                dx = -np.linalg.solve(H, g)
            except np.linalg.LinAlgError:
                dx = -np.linalg.lstsq(H, g, rcond=None)[0]
            dec2 = float(-g @ dx)
            if dec2 / 2 < 1e-12:
                break
            step = 1.0
            while step > 1e-14:
                xn = x + step * dx
                tn = _barrier_terms(st, xn, t)
                if tn is not None and tn[0] <= f - 0.25 * step * dec2:
                    break
                step *= 0.5
            else:
                break
            x = xn
            best_s = max(best_s, x[-1])
        # near-centred point: the barrier duality gap bounds the optimum
        upper = min(upper, x[-1] + st.nu / t)
        if st.nu / t < gap_tol * max(1.0, abs(x[-1])):
            return x, st, "optimal", best_s, upper
        t *= mu
    return x, st, "stalled", best_s, upper


def max_normalized_margin(A_active, B_active) -> tuple[float, float]:
    """Optimal robustness ``s*`` on the unit ball as ``(lower, upper)`` bounds."""
    _, _, best, upper = _normalized_optimum(np.asarray(A_active, float), np.asarray(B_active, float))
    return float(best), float(upper)


def minimal_radius(prob: LmiProblem) -> float:
    """Smallest radius for which the problem is feasible, ``margin / s*``."""
    lo, _ = max_normalized_margin(prob.A_active, prob.B_active)
    if lo <= 0:
        return np.inf
    return prob.margin / lo


_OPTIMA: dict[bytes, tuple] = {}


def _normalized_optimum(A, B):
    """Cached ``(x, structure, best_s, upper)`` of the normalized problem."""
    key = np.ascontiguousarray(A).tobytes() + b"|" + np.ascontiguousarray(B).tobytes()
    if key not in _OPTIMA:
        x, st, status, best, upper = _solve_normalized(A, B)
        if status != "optimal":
            log.warning("LMI barrier iteration stopped with status %s at s = %.3e", status, best)
        _OPTIMA[key] = (x, st, best, upper)
    return _OPTIMA[key]


def solve_lmi(prob: LmiProblem, seed: int | None = None) -> LmiSolution | Infeasible:
    """Find (Q, Y) strictly satisfying the LMI inside the radius ball; ``K = Y Q^-1``.

    The barrier iteration is deterministic; ``seed`` is accepted for interface
    symmetry with randomized checks and does not influence the result.
    """
    shrink = 1e-6
    target = max(prob.margin / (prob.radius * (1 - shrink)), MIN_NORMALIZED_MARGIN)
    x, st, best, upper = _normalized_optimum(prob.A_active, prob.B_active)
    if x[-1] < target:
        return Infeasible(float(best), float(upper), float(target))
    Qn, Yn, s = st.unpack(x)
    norm = np.sqrt(np.sum(Qn ** 2) + np.sum(Yn ** 2))
    alpha = prob.radius * (1 - shrink) / norm
    Q, Y = alpha * Qn, alpha * Yn
    K = np.linalg.solve(Q.T, Y.T).T  # Y Q^-1
    cert = verify_certificate(prob, Q, Y)
    if not cert.ok:
        raise LmiError(f"solution failed independent verification: {cert}")
    return LmiSolution(Q, Y, K, cert, float(s))


def minimum_effort_gain(A_active, B_active) -> np.ndarray:
    """Smallest-Frobenius-norm K with ``w^T (A + B K) = 0`` for the unstable left eigenvector w.

    Every impulse ``K d`` is then the least-norm kick that removes the unstable
    component of ``d``.  Requires a single real dominant eigenvalue.
    """
    A = np.atleast_2d(np.asarray(A_active, dtype=float))
    B = np.asarray(B_active, dtype=float).reshape(A.shape[0], -1)
    lam, W = np.linalg.eig(A.T)
    i = int(np.argmax(np.abs(lam)))
    if abs(lam[i].imag) > 1e-12 * abs(lam[i]):
        raise ValueError("dominant eigenvalue is complex")
    w = W[:, i].real
    b = B.T @ w
    if np.linalg.norm(b) == 0:
        raise ValueError("unstable mode is not reachable by the actuation")
    return -lam[i].real * np.outer(b, w) / (b @ b)


def random_search_feasible(prob: LmiProblem, n_samples: int = 20000, seed: int = 0) -> bool:
    """Randomized feasibility probe: sample (Q, Y) on the radius sphere and test the LMI."""
    rng = np.random.default_rng(seed)
    n, k = prob.n, prob.k
    for _ in range(n_samples):
        G = rng.normal(size=(n, n))
        Q = G @ G.T + rng.uniform(0, 1) * np.eye(n)
        Y = rng.normal(size=(k, n)) * rng.uniform(0, 3)
        scale = prob.radius * rng.uniform(0.5, 1.0) / np.sqrt(np.sum(Q ** 2) + np.sum(Y ** 2))
        if verify_certificate(prob, scale * Q, scale * Y).ok:
            return True
    return False


# --- reduction to the active subspace -----------------------------------------------------------------


@dataclass
class Reduction:
    A_active: np.ndarray
    B_active: np.ndarray
    state_indices: tuple[int, ...]
    channels: tuple[int, ...]

    def embed(self, K_active: np.ndarray) -> np.ndarray:
        K = np.zeros((3, 6))
        K[np.ix_(list(self.channels), list(self.state_indices))] = K_active
        return K

    def reduce(self, K_full: np.ndarray) -> np.ndarray:
        return np.asarray(K_full)[np.ix_(list(self.channels), list(self.state_indices))]

    def problem(self, radius: float, margin: float = DEFAULT_MARGIN) -> LmiProblem:
        return LmiProblem(self.A_active, self.B_active, radius, margin)


def reduce_and_embed(A: LinearizedMap | np.ndarray, R: ActuationProjection = VELOCITY_ACTUATION,
                     sec: SectionDef | None = None) -> Reduction:
    """Restrict (A, B = A R) to the active coordinates and usable actuation channels."""
    if isinstance(A, LinearizedMap):
        active = tuple(A.active)
        A = A.A
    else:
        A = np.asarray(A, dtype=float)
        if sec is None:
            raise ValueError("a section is needed to define the active coordinates of a raw matrix")
        active = ()
    if sec is not None:
        active = sec.active
    if not active:
        raise ValueError("active block is empty")
    channels = tuple(c for c, tgt in enumerate(R.targets) if tgt in active)
    if not channels:
        raise ValueError("no actuation channel acts on an active coordinate")
    idx = list(active)
    B = A @ R.R
    return Reduction(A[np.ix_(idx, idx)], B[np.ix_(idx, list(channels))], tuple(active), channels)


def closed_loop_matrix(A: np.ndarray, R: ActuationProjection, K_full: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``A + A R K`` and its eigenvalues."""
    A = np.asarray(A, dtype=float)
    Acl = A + A @ R.R @ np.asarray(K_full, dtype=float)
    return Acl, np.linalg.eigvals(Acl)


def synthesize(A: LinearizedMap, radius: float, margin: float = DEFAULT_MARGIN,
               R: ActuationProjection = VELOCITY_ACTUATION, sec: SectionDef | None = None,
               seed: int | None = None) -> LmiSolution | Infeasible:
    """Reduce, solve and embed in one call."""
    red = reduce_and_embed(A, R, sec)
    sol = solve_lmi(red.problem(radius, margin), seed)
    if isinstance(sol, LmiSolution):
        sol.K_full = red.embed(sol.K_active)
    return sol
