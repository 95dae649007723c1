"""Truncated power basis, tensor-product splines and least-squares fitting.

This is the plain-numpy reference that the compiled networks are checked
against.  Basis functions of degree ``M`` with knots ``u_1 < ... < u_{K-1}``::

    B_j(x) = x**j               j = 0, ..., M
    B_j(x) = (x - u_{j-M})_+**M  j = M+1, ..., M+K-1
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

__all__ = [
    "SplineFitError",
    "TruncPowerBasis",
    "equidistant_basis",
    "eval_basis_1d",
    "eval_tensor_basis",
    "tensor_indices",
    "tensor_grid",
    "SplineFit",
    "fit_spline_ls",
    "sup_error",
]

COND_LIMIT = 1e12


class SplineFitError(RuntimeError):
    """Least-squares design matrix is rank deficient."""

    def __init__(self, msg: str, condition: float, rank: int, n_coef: int):
        super().__init__(f"{msg} (condition number {condition:.3e}, rank {rank} of {n_coef})")
        self.condition = condition
        self.rank = rank
        self.n_coef = n_coef


@dataclass(frozen=True)
class TruncPowerBasis:
    degree: int
    knots: tuple[float, ...]
    lo: float
    hi: float

    def __post_init__(self):
        object.__setattr__(self, "knots", tuple(float(u) for u in self.knots))
        if self.degree < 1:
            raise ValueError("degree must be >= 1")
        if not self.lo < self.hi:
            raise ValueError(f"empty domain [{self.lo}, {self.hi}]")
        if any(b <= a for a, b in zip(self.knots, self.knots[1:])):
            raise ValueError("knots must be strictly increasing")
        if self.knots and not (self.lo <= self.knots[0] and self.knots[-1] <= self.hi):
            raise ValueError("knots must lie inside the domain")

    @property
    def size(self) -> int:
        return self.degree + 1 + len(self.knots)

    def kind(self, j: int) -> tuple[str, float]:
        """('monomial', j) or ('truncated', knot) for basis index j."""
        self._check(j)
        if j <= self.degree:
            return "monomial", float(j)
        return "truncated", self.knots[j - self.degree - 1]

    def _check(self, j: int) -> None:
        if not 0 <= j < self.size:
            raise IndexError(f"basis index {j} outside 0..{self.size - 1}")

    def matrix(self, x) -> np.ndarray:
        """All basis functions at the points ``x``: shape (len(x), size)."""
        x = np.asarray(x, dtype=np.float64).ravel()
        cols = [x**j for j in range(self.degree + 1)]
        cols += [np.maximum(x - u, 0.0) ** self.degree for u in self.knots]
        return np.stack(cols, axis=1)


def equidistant_basis(degree: int, size: int, lo: float, hi: float) -> TruncPowerBasis:
    """Basis with ``size`` functions: ``size - degree - 1`` equidistant interior knots."""
    n_knots = size - degree - 1
    if n_knots < 0:
        raise ValueError(f"size {size} too small for degree {degree}")
    step = (hi - lo) / (n_knots + 1)
    return TruncPowerBasis(degree, tuple(lo + step * k for k in range(1, n_knots + 1)), lo, hi)


def eval_basis_1d(basis: TruncPowerBasis, j: int, x):
    basis._check(j)
    xa = np.asarray(x, dtype=np.float64)
    if j <= basis.degree:
        out = xa**j
    else:
        out = np.maximum(xa - basis.knots[j - basis.degree - 1], 0.0) ** basis.degree
    return float(out) if out.ndim == 0 else out


def _bases(basis, dim: int) -> list[TruncPowerBasis]:
    if isinstance(basis, TruncPowerBasis):
        return [basis] * dim
    if len(basis) != dim:
        raise ValueError(f"{len(basis)} bases for {dim} dimensions")
    return list(basis)


def eval_tensor_basis(basis, idx: Sequence[int], x) -> float:
    """prod_k B_{idx_k}(x^(k)); ``basis`` is one basis or one per dimension."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if len(idx) != x.shape[-1]:
        raise ValueError(f"index of length {len(idx)} for a point of dimension {x.shape[-1]}")
    bases = _bases(basis, len(idx))
    out = 1.0
    for k, (b, j) in enumerate(zip(bases, idx)):
        out = out * eval_basis_1d(b, int(j), x[..., k])
    return out


def tensor_indices(sizes: Sequence[int]) -> np.ndarray:
    """All multi-indices in lexicographic order, shape (prod(sizes), len(sizes))."""
    return np.array(list(itertools.product(*[range(s) for s in sizes])), dtype=int).reshape(-1, len(sizes))


def tensor_grid(lo: float, hi: float, points: int, dim: int) -> np.ndarray:
    axis = np.linspace(lo, hi, points)
    mesh = np.meshgrid(*([axis] * dim), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


@dataclass
class SplineFit:
    bases: list[TruncPowerBasis]
    indices: np.ndarray  # (n_coef, K)
    coefficients: np.ndarray  # (n_coef,)
    condition: float = float("nan")
    solver: str = ""

    @property
    def dim(self) -> int:
        return len(self.bases)

    def design(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64).reshape(-1, self.dim)
        per_dim = [b.matrix(X[:, k]) for k, b in enumerate(self.bases)]
        Phi = np.ones((X.shape[0], len(self.indices)))
        for k, E in enumerate(per_dim):
            Phi *= E[:, self.indices[:, k]]
        return Phi

    def __call__(self, X) -> np.ndarray:
        return self.design(X) @ self.coefficients

    def to_json(self) -> dict:
        return {
            "bases": [{"degree": b.degree, "knots": list(b.knots), "lo": b.lo, "hi": b.hi} for b in self.bases],
            "indices": self.indices.tolist(),
            "coefficients": self.coefficients.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SplineFit":
        bases = [TruncPowerBasis(b["degree"], tuple(b["knots"]), b["lo"], b["hi"]) for b in doc["bases"]]
        return cls(bases, np.asarray(doc["indices"], dtype=int).reshape(-1, len(bases)),
                   np.asarray(doc["coefficients"], dtype=np.float64))


def _as_vector_fn(g: Callable, dim: int) -> Callable[[np.ndarray], np.ndarray]:
    def call(X):
        X = np.asarray(X, dtype=np.float64).reshape(-1, dim)
        return np.asarray(g(X[:, 0] if dim == 1 else X), dtype=np.float64).reshape(-1)

    return call


def solve_least_squares(Phi: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, float, str]:
    """min ||Phi c - y||: Cholesky on the normal equations, QR/SVD when ill-conditioned.

    Columns are scaled to unit norm first; the condition number reported is that
    of the scaled Gram matrix.
    """
    norms = np.linalg.norm(Phi, axis=0)
    norms[norms == 0] = 1.0
    A = Phi / norms
    G = A.T @ A
    cond = float(np.linalg.cond(G))
    if np.isfinite(cond) and cond <= COND_LIMIT:
        c = scipy.linalg.cho_solve(scipy.linalg.cho_factor(G), A.T @ y)
        solver = "cholesky"
    else:
        c, _, rank, sv = scipy.linalg.lstsq(A, y, lapack_driver="gelsd")
        if rank < A.shape[1]:
            raise SplineFitError("rank-deficient design matrix", cond, int(rank), A.shape[1])
        solver = "gelsd"
    return c / norms, cond, solver


def normal_equation_residual(Phi: np.ndarray, y: np.ndarray, c: np.ndarray) -> float:
    """max |Phi^T (Phi c - y)| relative to the Cauchy-Schwarz scale of Phi^T y."""
    grad = Phi.T @ (Phi @ c - y)
    scale = np.linalg.norm(Phi, axis=0).max() * max(np.linalg.norm(y), 1.0)
    return float(np.abs(grad).max() / scale)


def fit_spline_ls(g: Callable, basis, grid_points_per_dim: int, dim: int | None = None) -> SplineFit:
    """Least-squares tensor spline fit of ``g`` on an equidistant grid over the basis domain.

    ``g`` is vectorised: it receives an (m, K) array (an (m,) array when K == 1).
    """
    if dim is None:
        dim = 1 if isinstance(basis, TruncPowerBasis) else len(basis)
    bases = _bases(basis, dim)
    if any(grid_points_per_dim < b.size for b in bases):
        raise ValueError(f"{grid_points_per_dim} grid points per dimension is fewer than the basis size")
    axes = [np.linspace(b.lo, b.hi, grid_points_per_dim) for b in bases]
    X = np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=1)
    fit = SplineFit(bases, tensor_indices([b.size for b in bases]), np.zeros(0))
    Phi = fit.design(X)
    y = _as_vector_fn(g, dim)(X)
    fit.coefficients, fit.condition, fit.solver = solve_least_squares(Phi, y)
    return fit


def sup_error(fit: SplineFit, g: Callable, test_grid) -> float:
    grid = np.asarray(test_grid, dtype=np.float64).reshape(-1, fit.dim)
    if grid.shape[0] == 0:
        raise ValueError("empty test grid")
    return float(np.max(np.abs(fit(grid) - _as_vector_fn(g, fit.dim)(grid))))
