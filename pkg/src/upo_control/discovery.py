"""Sparse polynomial return-map discovery (STLSQ), ensembling, linearization and validation."""

from __future__ import annotations

import itertools
import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import qr, solve_triangular

from .sections import STATE_LABELS, DatasetPair

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PolyLibrary:
    """All monomials of total degree <= ``degree`` in the active coordinates.

    Monomials are exponent tuples (one entry per active variable) in graded
    lexicographic order, constant first.
    """

    variable_indices: tuple[int, ...]
    degree: int = 5

    def __post_init__(self):
        object.__setattr__(self, "variable_indices", tuple(int(i) for i in self.variable_indices))
        if not self.variable_indices:
            raise ValueError("library needs at least one variable")
        if any(not 0 <= i < 6 for i in self.variable_indices) or len(set(self.variable_indices)) != len(
                self.variable_indices):
            raise ValueError(f"invalid variable indices {self.variable_indices}")
        if self.degree < 0:
            raise ValueError("degree must be non-negative")

    @property
    def monomials(self) -> list[tuple[int, ...]]:
        n = len(self.variable_indices)
        out = []
        for d in range(self.degree + 1):
            for combo in itertools.combinations_with_replacement(range(n), d):
                e = [0] * n
                for j in combo:
                    e[j] += 1
                out.append(tuple(e))
        return out

    def __len__(self) -> int:
        return len(self.monomials)

    def linear_rows(self) -> dict[int, int]:
        """Map state index -> row of its degree-1 monomial."""
        rows = {}
        for r, e in enumerate(self.monomials):
            if sum(e) == 1:
                rows[self.variable_indices[e.index(1)]] = r
        return rows

    def names(self) -> list[str]:
        labels = [STATE_LABELS[i] for i in self.variable_indices]
        out = []
        for e in self.monomials:
            parts = [lab if k == 1 else f"{lab}^{k}" for lab, k in zip(labels, e) if k]
            out.append("*".join(parts) or "1")
        return out


def build_library(X, lib: PolyLibrary, anchor=None) -> np.ndarray:
    """Evaluate the library on the deviations ``X - anchor`` (rows are states)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    dev = X if anchor is None else X - np.asarray(anchor, dtype=float)
    Z = dev[:, list(lib.variable_indices)]
    E = np.array(lib.monomials, dtype=int)
    return np.prod(Z[:, None, :] ** E[None, :, :], axis=2)


def _lstsq(A: np.ndarray, b: np.ndarray, method: str) -> tuple[np.ndarray, bool]:
    """Least squares solution and a rank-deficiency flag.

    ``"min_norm"`` returns the SVD minimum-norm solution.  ``"basic"`` returns
    the basic solution of a column-pivoted QR, which sets the coefficients of
    numerically dependent columns to exactly zero.
    """
    m, n = A.shape
    if n == 0:
        return np.zeros((0,) + b.shape[1:]), False
    if method == "min_norm":
        x, _, rank, _ = np.linalg.lstsq(A, b, rcond=None)
        return x, rank < n
    if method == "basic":
        Q, Rm, piv = qr(A, mode="economic", pivoting=True)
        d = np.abs(np.diag(Rm))
        tol = max(m, n) * np.finfo(float).eps * (d[0] if d.size else 0.0)
        r = int(np.sum(d > tol))
        x = np.zeros((n,) + b.shape[1:])
        if r:
            x[piv[:r]] = solve_triangular(Rm[:r, :r], (Q[:, :r].T @ b))
        return x, r < n
    raise ValueError(f"unknown least-squares method {method!r}")


@dataclass
class StlsqDiagnostics:
    iterations: int = 0
    rank_deficient: bool = False


def stlsq(theta: np.ndarray, Y: np.ndarray, lambda_sparse: float, max_iter: int = 25,
          method: str = "basic", diagnostics: StlsqDiagnostics | None = None) -> np.ndarray:
    """Sequentially thresholded least squares, one support per output column.

    Returns ``Xi`` with ``theta @ Xi ~ Y``; every surviving coefficient has
    magnitude at least ``lambda_sparse``.
    """
    theta = np.asarray(theta, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if theta.shape[0] != Y.shape[0]:
        raise ValueError("theta and Y must have the same number of rows")
    if not lambda_sparse > 0:
        raise ValueError("lambda_sparse must be positive")
    diag = diagnostics if diagnostics is not None else StlsqDiagnostics()
    D, k = theta.shape[1], Y.shape[1]
    Xi = np.zeros((D, k))
    for j in range(k):
        support = np.ones(D, dtype=bool)
        coef = np.zeros(D)
        for it in range(max_iter + 1):
            coef = np.zeros(D)
            sol, deficient = _lstsq(theta[:, support], Y[:, j], method)
            diag.rank_deficient |= deficient
            coef[support] = sol
            new_support = np.abs(coef) >= lambda_sparse
            coef[~new_support] = 0.0
            diag.iterations = max(diag.iterations, it + 1)
            if np.array_equal(new_support, support) or not new_support.any():
                break
            support = new_support
        else:
            log.warning("STLSQ support did not settle in %d iterations (output %d)", max_iter, j)
        Xi[:, j] = coef
    if diag.rank_deficient:
        log.debug("rank-deficient least-squares subproblem encountered (%s solution used)", method)
    return Xi


@dataclass
class DiscoveredMap:
    library: PolyLibrary
    coefficients: np.ndarray  # D x 6
    anchor: np.ndarray

    def __call__(self, X) -> np.ndarray:
        """Predicted next crossing(s) for state(s) ``X``."""
        X = np.asarray(X, dtype=float)
        out = self.anchor + build_library(X, self.library, self.anchor) @ self.coefficients
        return out[0] if X.ndim == 1 else out

    def to_dict(self) -> dict:
        names = self.library.names()
        terms = []
        for r, e in enumerate(self.library.monomials):
            for c in range(6):
                v = self.coefficients[r, c]
                if v != 0.0:
                    terms.append({"output": STATE_LABELS[c], "monomial": list(e), "name": names[r], "value": float(v)})
        return {
            "anchor": [float(v) for v in self.anchor],
            "active_variables": [STATE_LABELS[i] for i in self.library.variable_indices],
            "degree": self.library.degree,
            "monomials": [list(e) for e in self.library.monomials],
            "coefficients": terms,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DiscoveredMap":
        """Inverse of :meth:`to_dict`."""
        active = tuple(STATE_LABELS.index(c) for c in d["active_variables"])
        lib = PolyLibrary(active, int(d["degree"]))
        row = {tuple(e): r for r, e in enumerate(lib.monomials)}
        Xi = np.zeros((len(lib), 6))
        for t in d["coefficients"]:
            Xi[row[tuple(t["monomial"])], STATE_LABELS.index(t["output"])] = t["value"]
        return cls(lib, Xi, np.asarray(d["anchor"], dtype=float))


def fit_map(pairs: DatasetPair, lib: PolyLibrary, anchor, lambda_sparse: float, method: str = "basic",
            diagnostics: StlsqDiagnostics | None = None) -> DiscoveredMap:
    """Single STLSQ fit of the centred return map on the active coordinates."""
    anchor = np.asarray(anchor, dtype=float)
    active = list(lib.variable_indices)
    theta = build_library(pairs.X1, lib, anchor)
    Y = (pairs.X2 - anchor)[:, active]
    Xi = np.zeros((len(lib), 6))
    Xi[:, active] = stlsq(theta, Y, lambda_sparse, method=method, diagnostics=diagnostics)
    return DiscoveredMap(lib, Xi, anchor.copy())


@dataclass
class EnsembleResult:
    median_map: DiscoveredMap
    inclusion_probability: np.ndarray  # D x 6
    variance: np.ndarray  # D x 6
    n_models: int

    def linear_variance(self) -> float:
        """Summed variance of the coefficients that form the linearization."""
        rows = self.median_map.library.linear_rows()
        active = list(self.median_map.library.variable_indices)
        return float(sum(self.variance[rows[j], i] for j in active for i in active))

    def to_dict(self) -> dict:
        d = self.median_map.to_dict()
        d["n_models"] = self.n_models
        d["inclusion_probability"] = self.inclusion_probability.tolist()
        d["variance"] = self.variance.tolist()
        return d


def ensemble_discover(pairs: DatasetPair, lib: PolyLibrary, anchor, lambda_sparse: float, n_models: int = 100,
                      rho: float = 0.6, seed: int = 0, method: str = "basic") -> EnsembleResult:
    """Bootstrap-ensembled STLSQ.

    Each model is fitted on a same-size resample drawn with replacement.  The
    median model takes, per coefficient, the median of its nonzero draws and
    zeroes coefficients included in fewer than ``rho`` of the models.
    """
    if n_models < 2:
        raise ValueError("n_models must be at least 2")
    if not 0 <= rho < 1:
        raise ValueError("rho must lie in [0, 1)")
    n = len(pairs)
    if n == 0:
        raise ValueError("empty dataset")
    anchor = np.asarray(anchor, dtype=float)
    active = list(lib.variable_indices)
    theta = build_library(pairs.X1, lib, anchor)
    Y = (pairs.X2 - anchor)[:, active]
    rng = np.random.default_rng(seed)
    draws = np.empty((n_models, len(lib), len(active)))
    for k in range(n_models):
        idx = rng.integers(0, n, size=n)
        draws[k] = stlsq(theta[idx], Y[idx], lambda_sparse, method=method)
    nonzero = draws != 0.0
    prob = nonzero.mean(axis=0)
    masked = np.where(nonzero, draws, np.nan)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN columns: never included
        med = np.nanmedian(masked, axis=0) if nonzero.any() else np.zeros(draws.shape[1:])
    med = np.where(nonzero.any(axis=0), med, 0.0)
    med[prob < rho] = 0.0
    D = len(lib)
    full = lambda a: _embed_columns(a, active, D)  # noqa: E731
    return EnsembleResult(DiscoveredMap(lib, full(med), anchor.copy()), full(prob), full(draws.var(axis=0)), n_models)


def _embed_columns(a: np.ndarray, active: list[int], D: int) -> np.ndarray:
    out = np.zeros((D, 6))
    out[:, active] = a
    return out


@dataclass
class LinearizedMap:
    A: np.ndarray
    anchor: np.ndarray
    active: tuple[int, ...] = field(default=tuple(range(6)))

    @property
    def active_block(self) -> np.ndarray:
        idx = list(self.active)
        return self.A[np.ix_(idx, idx)]


def linearize_at(m: DiscoveredMap) -> LinearizedMap:
    """Jacobian of the polynomial map at the anchor (A[i, j] = d out_i / d x_j)."""
    A = np.zeros((6, 6))
    for j, r in m.library.linear_rows().items():
        A[:, j] = m.coefficients[r, :]
    return LinearizedMap(A, m.anchor.copy(), m.library.variable_indices)


@dataclass
class ValidationReport:
    map_eigenvalues: np.ndarray
    monodromy_eigenvalues: np.ndarray
    pairs: list[tuple[str, complex, complex]]
    total_error: float
    det: float

    def to_dict(self) -> dict:
        c = lambda z: [float(np.real(z)), float(np.imag(z))]  # noqa: E731
        return {
            "total_error": self.total_error,
            "det": self.det,
            "pairs": [{"class": k, "monodromy": c(a), "map": c(b)} for k, a, b in self.pairs],
            "map_eigenvalues": [c(z) for z in self.map_eigenvalues],
            "monodromy_eigenvalues": [c(z) for z in self.monodromy_eigenvalues],
        }


def _classify(w: np.ndarray) -> tuple[complex, complex, complex]:
    """(unstable, neutral, stable) representatives of a spectrum."""
    w = np.asarray(w, dtype=complex)
    mags = np.abs(w)
    iu, is_ = int(np.argmax(mags)), int(np.argmin(mags))
    rest = [i for i in range(len(w)) if i not in (iu, is_)]
    if rest:
        i_n = min(rest, key=lambda i: abs(mags[i] - 1.0))
        neutral = w[i_n]
    else:
        neutral = np.nan
    return w[iu], neutral, w[is_]


def _class_gap(a: complex, b: complex) -> float:
    if abs(np.imag(a)) > 0 or abs(np.imag(b)) > 0:
        return abs(abs(a) - abs(b))
    return abs(np.real(a) - np.real(b))


def validate_map(A: LinearizedMap, M: np.ndarray, planar: bool | None = None) -> ValidationReport:
    """Compare the map's linearization with the monodromy matrix.

    Both spectra are reduced to the classified triple (unstable, neutral,
    stable); the total error sums the absolute differences, comparing
    magnitudes whenever either member is complex.  For planar maps only the
    in-plane block of M is used.
    """
    active = list(A.active)
    if planar is None:
        planar = 2 not in active and 5 not in active
    M = np.asarray(M, dtype=float)
    if planar:
        idx = [0, 1, 3, 4]
        wm = np.linalg.eigvals(M[np.ix_(idx, idx)])
    else:
        wm = np.linalg.eigvals(M)
    block = A.active_block
    wa = np.linalg.eigvals(block)
    order = lambda w: w[np.argsort(-np.abs(w), kind="stable")]  # noqa: E731
    wm, wa = order(wm), order(wa)
    cm, ca = _classify(wm), _classify(wa)
    pairs = list(zip(("unstable", "neutral", "stable"), cm, ca))
    total = float(sum(_class_gap(a, b) for _, a, b in pairs))
    return ValidationReport(wa, wm, pairs, total, float(np.linalg.det(block)))


def save_json(obj: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialize {type(o)}")
