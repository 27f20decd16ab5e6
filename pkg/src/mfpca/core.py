"""Grid-based function and operator algebra on [0, 1].

Functions are stored as values on a :class:`Grid` and operators as symmetric
kernels sampled on ``Grid x Grid``. Integrals are realized with trapezoid
weights, so an operator ``A`` acts on ``f`` as ``(A f)(s_i) = sum_j w_j A(s_i, t_j) f(t_j)``.
All spectral quantities are computed from the symmetric matrix
``M = D^{1/2} K D^{1/2}`` with ``D = diag(weights)``, whose eigenvalues are those
of the discretized integral operator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Grid",
    "GridFunction",
    "DiscretizedOperator",
    "EigenSystem",
    "GridMismatchError",
    "uniform_grid",
    "weighted_inner",
    "compose",
    "op_norm",
    "hs_norm",
    "eigendecompose",
    "outer",
]

SYMMETRY_RTOL = 1e-10


class GridMismatchError(ValueError):
    """Raised when two objects living on different grids are combined."""


def _readonly(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def trapezoid_weights(points):
    """Trapezoid quadrature weights for a strictly increasing point set."""
    points = np.asarray(points, dtype=float)
    gaps = np.diff(points)
    w = np.zeros_like(points)
    w[:-1] += gaps / 2
    w[1:] += gaps / 2
    return w


@dataclass(frozen=True, eq=False)
class Grid:
    """Discretization of [0, 1] with trapezoid weights.

    Parameters
    ----------
    points : array-like
        Strictly increasing points with ``points[0] == 0`` and ``points[-1] == 1``.
    """

    points: np.ndarray
    weights: np.ndarray = field(init=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or pts.size < 3:
            raise ValueError("a grid needs at least 3 points")
        if pts[0] != 0.0 or pts[-1] != 1.0:
            raise ValueError("grid must start at 0 and end at 1")
        if np.any(np.diff(pts) <= 0):
            raise ValueError("grid points must be strictly increasing")
        object.__setattr__(self, "points", _readonly(pts))
        object.__setattr__(self, "weights", _readonly(trapezoid_weights(pts)))

    def __len__(self):
        return self.points.size

    def same_as(self, other: "Grid") -> bool:
        return self is other or (
            len(self) == len(other) and np.array_equal(self.points, other.points)
        )

    @property
    def sqrt_weights(self):
        return np.sqrt(self.weights)


def uniform_grid(size: int = 101) -> Grid:
    """Equally spaced grid of ``size`` points on [0, 1]."""
    return Grid(np.linspace(0.0, 1.0, int(size)))


def _check_same_grid(a, b):
    if not a.grid.same_as(b.grid):
        raise GridMismatchError("objects live on different grids")


@dataclass(frozen=True, eq=False)
class GridFunction:
    """A function on [0, 1] represented by its values at the grid points."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (len(self.grid),):
            raise ValueError(
                f"expected {len(self.grid)} values, got shape {v.shape}"
            )
        object.__setattr__(self, "values", _readonly(v))

    def __call__(self, t):
        """Linear interpolation at arbitrary times in [0, 1]."""
        return np.interp(t, self.grid.points, self.values)

    def norm(self) -> float:
        return float(np.sqrt(weighted_inner(self, self)))


@dataclass(frozen=True, eq=False)
class DiscretizedOperator:
    """Integral operator with kernel values ``kernel[i, j] = A(s_i, t_j)``."""

    grid: Grid
    kernel: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.kernel, dtype=float)
        g = len(self.grid)
        if k.shape != (g, g):
            raise ValueError(f"kernel must be {g}x{g}, got {k.shape}")
        object.__setattr__(self, "kernel", _readonly(k))

    def __add__(self, other):
        _check_same_grid(self, other)
        return DiscretizedOperator(self.grid, self.kernel + other.kernel)

    def __sub__(self, other):
        _check_same_grid(self, other)
        return DiscretizedOperator(self.grid, self.kernel - other.kernel)

    def __mul__(self, scalar):
        return DiscretizedOperator(self.grid, float(scalar) * self.kernel)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return DiscretizedOperator(self.grid, self.kernel / float(scalar))

    def apply(self, f: GridFunction) -> GridFunction:
        _check_same_grid(self, f)
        return GridFunction(self.grid, self.kernel @ (self.grid.weights * f.values))

    def symmetrized(self) -> "DiscretizedOperator":
        return DiscretizedOperator(self.grid, (self.kernel + self.kernel.T) / 2)

    def is_symmetric(self, rtol: float = SYMMETRY_RTOL) -> bool:
        k = self.kernel
        scale = max(np.max(np.abs(k)), 1.0)
        return bool(np.max(np.abs(k - k.T)) <= rtol * scale)

    def weighted_matrix(self) -> np.ndarray:
        """The symmetric matrix ``D^{1/2} K D^{1/2}`` sharing this operator's spectrum."""
        r = self.grid.sqrt_weights
        return r[:, None] * self.kernel * r[None, :]

    @classmethod
    def zeros(cls, grid: Grid) -> "DiscretizedOperator":
        return cls(grid, np.zeros((len(grid), len(grid))))


@dataclass(frozen=True, eq=False)
class EigenSystem:
    """Descending eigenvalues with quadrature-orthonormal eigenfunctions.

    ``eigenfunctions`` is stored as a matrix with one function per row.
    """

    grid: Grid
    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.eigenvalues, dtype=float)
        funcs = np.atleast_2d(np.asarray(self.eigenfunctions, dtype=float))
        if funcs.shape != (vals.size, len(self.grid)):
            raise ValueError("need one eigenfunction (row) per eigenvalue")
        if np.any(np.diff(vals) > 1e-12 * max(1.0, np.max(np.abs(vals), initial=0))):
            raise ValueError("eigenvalues must be non-increasing")
        object.__setattr__(self, "eigenvalues", _readonly(vals))
        object.__setattr__(self, "eigenfunctions", _readonly(funcs))

    def __len__(self):
        return self.eigenvalues.size

    def function(self, index: int) -> GridFunction:
        return GridFunction(self.grid, self.eigenfunctions[index])

    def gram(self) -> np.ndarray:
        phi = self.eigenfunctions
        return (phi * self.grid.weights) @ phi.T


def weighted_inner(f: GridFunction, g: GridFunction) -> float:
    """Trapezoid approximation of the L2 inner product on [0, 1]."""
    _check_same_grid(f, g)
    return float(np.sum(f.grid.weights * f.values * g.values))


def outer(f, g=None, grid: Grid | None = None) -> DiscretizedOperator:
    """Rank-one kernel ``f(s) g(t)``; symmetric when ``g`` is omitted.

    Accepts GridFunctions or raw value arrays (then ``grid`` is required).
    """
    if g is None:
        g = f
    if isinstance(f, GridFunction):
        grid = f.grid
        f, g = f.values, (g.values if isinstance(g, GridFunction) else g)
    if grid is None:
        raise ValueError("grid is required for raw value arrays")
    return DiscretizedOperator(grid, np.outer(f, g))


def compose(A: DiscretizedOperator, B: DiscretizedOperator) -> DiscretizedOperator:
    """Kernel of the operator product ``A B``: ``sum_u w_u A(s, u) B(u, t)``."""
    _check_same_grid(A, B)
    return DiscretizedOperator(A.grid, (A.kernel * A.grid.weights) @ B.kernel)


def _symmetric_spectrum(A: DiscretizedOperator) -> np.ndarray:
    if not A.is_symmetric():
        raise ValueError("operator kernel is not symmetric")
    M = A.weighted_matrix()
    return np.linalg.eigvalsh((M + M.T) / 2)


def op_norm(A: DiscretizedOperator) -> float:
    """Operator norm of a symmetric discretized operator."""
    return float(np.max(np.abs(_symmetric_spectrum(A))))


def hs_norm(A: DiscretizedOperator) -> float:
    """Hilbert-Schmidt norm of a symmetric discretized operator."""
    return float(np.sqrt(np.sum(_symmetric_spectrum(A) ** 2)))


def eigendecompose(A: DiscretizedOperator, m: int) -> EigenSystem:
    """Leading ``m`` eigenpairs of a symmetric discretized operator.

    Each eigenfunction is rescaled to unit quadrature norm and its sign is fixed
    so that its largest-magnitude value is positive.
    """
    g = len(A.grid)
    if not 1 <= int(m) <= g:
        raise ValueError(f"m must lie in [1, {g}], got {m}")
    m = int(m)
    if not A.is_symmetric(rtol=1e-6):
        raise ValueError("operator kernel is not symmetric")
    M = A.weighted_matrix()
    vals, vecs = np.linalg.eigh((M + M.T) / 2)
    vals = vals[::-1][:m]
    vecs = vecs[:, ::-1][:, :m]

    funcs = (vecs / A.grid.sqrt_weights[:, None]).T
    norms = np.sqrt(np.sum(funcs**2 * A.grid.weights, axis=1))
    funcs = funcs / norms[:, None]
    peak = np.argmax(np.abs(funcs), axis=1)
    signs = np.sign(funcs[np.arange(m), peak])
    signs[signs == 0] = 1.0
    funcs = funcs * signs[:, None]
    return EigenSystem(A.grid, vals, funcs)
