"""Finite-difference semilinear models on the unit square.

Both benchmark problems are semi-discretizations of 2D PDEs on (0,1)^2 with
homogeneous Dirichlet boundary conditions, written in the parametrized
state-dependent form

    x'(t) = sum_j mu_j * A_j(x(t)) x(t) + B u(t).

Boundary nodes are eliminated from the state, so the state dimension ``d``
counts interior nodes only.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

__all__ = [
    "GridSpec",
    "RegionMask",
    "LowRankQ",
    "OperatorTerm",
    "ConstantTerm",
    "DiagonalTerm",
    "UpwindAdvectionTerm",
    "SemilinearModel",
    "build_dirichlet_laplacian",
    "build_actuator",
    "build_cost_matrix",
    "allen_cahn_model",
    "advection_model",
    "initial_condition",
    "CONTROL_BOXES",
    "COST_BOXES",
    "TEST1_MU",
    "TEST2_MU",
]

# Geometry of the control and observation regions used by both benchmarks.
CONTROL_BOXES = (
    (0.1, 0.3, 0.1, 0.3),
    (0.7, 0.9, 0.7, 0.9),
    (0.1, 0.3, 0.7, 0.9),
    (0.7, 0.9, 0.1, 0.3),
)
COST_BOXES = (
    (0.1, 0.3, 0.4, 0.6),
    (0.4, 0.6, 0.1, 0.3),
    (0.4, 0.6, 0.7, 0.9),
    (0.7, 0.9, 0.4, 0.6),
)

TEST1_MU = (0.5, 11.0, -11.0)
TEST2_MU = (0.2, 1.0, 5.5)


@dataclass(frozen=True)
class GridSpec:
    """Uniform tensor grid on (0,1)^2 with Dirichlet boundary eliminated.

    ``n1``/``n2`` count nodes including the boundary; the retained state
    holds the ``d = (n1-2)*(n2-2)`` interior nodes, ordered row-major with
    the xi1 index fastest.
    """

    n1: int
    n2: int

    def __post_init__(self):
        if self.n1 < 3 or self.n2 < 3:
            raise ValueError("grid needs at least 3 nodes per direction")

    @property
    def h1(self) -> float:
        return 1.0 / (self.n1 - 1)

    @property
    def h2(self) -> float:
        return 1.0 / (self.n2 - 1)

    @property
    def m1(self) -> int:
        """Interior node count along xi1."""
        return self.n1 - 2

    @property
    def m2(self) -> int:
        return self.n2 - 2

    @property
    def d(self) -> int:
        return self.m1 * self.m2

    def interior_coords(self):
        """Coordinates of the interior nodes, shape (d, 2)."""
        x1 = (np.arange(1, self.n1 - 1)) * self.h1
        x2 = (np.arange(1, self.n2 - 1)) * self.h2
        X1, X2 = np.meshgrid(x1, x2, indexing="xy")
        return np.column_stack([X1.ravel(), X2.ravel()])

    def index(self, i: int, j: int) -> int:
        """Linear index of interior node (i, j), 0-based interior offsets."""
        if not (0 <= i < self.m1 and 0 <= j < self.m2):
            raise IndexError("interior index out of range")
        return j * self.m1 + i


@dataclass(frozen=True)
class RegionMask:
    """Union of closed axis-aligned boxes with per-node membership.

    Nodes exactly on a box edge belong to the region. ``area`` is the
    analytic area of the union assuming disjoint boxes, used for the
    1/|Omega| weights in the cost.
    """

    boxes: tuple
    membership: np.ndarray
    area: float

    @classmethod
    def from_boxes(cls, grid: GridSpec, boxes) -> "RegionMask":
        boxes = tuple(tuple(float(v) for v in b) for b in boxes)
        coords = grid.interior_coords()
        member = np.zeros(grid.d, dtype=bool)
        for a1, b1, a2, b2 in boxes:
            inside = (
                (coords[:, 0] >= a1)
                & (coords[:, 0] <= b1)
                & (coords[:, 1] >= a2)
                & (coords[:, 1] <= b2)
            )
            member |= inside
        area = sum((b1 - a1) * (b2 - a2) for a1, b1, a2, b2 in boxes)
        if area <= 0:
            raise ValueError("region has zero area")
        return cls(boxes=boxes, membership=member, area=area)

    @property
    def node_count(self) -> int:
        return int(self.membership.sum())


@dataclass(frozen=True)
class LowRankQ:
    """State cost Q = sum_i w_i q_i q_i^T kept as weighted rank-1 factors."""

    factors: np.ndarray  # d x z
    weights: np.ndarray  # z

    def __post_init__(self):
        if np.any(self.weights < 0):
            raise ValueError("cost weights must be nonnegative")

    @property
    def dim(self) -> int:
        return self.factors.shape[0]

    @property
    def rank(self) -> int:
        return self.factors.shape[1]

    def dense(self) -> np.ndarray:
        return (self.factors * self.weights) @ self.factors.T

    def quad(self, x: np.ndarray) -> float:
        """x^T Q x without forming Q."""
        return float(self.weights @ (self.factors.T @ x) ** 2)

    def project(self, psi: np.ndarray) -> "LowRankQ":
        """Galerkin projection psi^T Q psi, exact in factored form."""
        return LowRankQ(psi.T @ self.factors, self.weights.copy())


def build_dirichlet_laplacian(grid: GridSpec) -> sp.csr_matrix:
    """5-point Laplacian on interior nodes, homogeneous Dirichlet boundary.

    Symmetric negative definite; boundary values are eliminated so rows next
    to the wall simply lose the corresponding neighbor entries.
    """
    m1, m2 = grid.m1, grid.m2
    e1 = np.ones(m1)
    e2 = np.ones(m2)
    T1 = sp.diags([e1[:-1], -2.0 * e1, e1[:-1]], [-1, 0, 1]) / grid.h1**2
    T2 = sp.diags([e2[:-1], -2.0 * e2, e2[:-1]], [-1, 0, 1]) / grid.h2**2
    lap = sp.kron(sp.identity(m2), T1) + sp.kron(T2, sp.identity(m1))
    return lap.tocsr()


def build_actuator(grid: GridSpec, mask: RegionMask) -> np.ndarray:
    """Indicator-function actuator: d x 1 matrix, 1 on nodes inside the mask."""
    if mask.node_count == 0:
        raise ValueError("actuator support empty")
    return mask.membership.astype(float)[:, None]


def build_cost_matrix(grid: GridSpec, regions) -> LowRankQ:
    """Assemble Q = sum_i (1/|Omega_i|) q_i q_i^T.

    Each q_i is the piecewise-constant quadrature vector of the integral of
    the state over region i (entry h1*h2 on member nodes), so x^T Q x
    approximates sum_i (integral over Omega_i of y)^2 / |Omega_i|.
    """
    regions = list(regions)
    if not regions:
        raise ValueError("need at least one cost region")
    cell = grid.h1 * grid.h2
    factors = np.zeros((grid.d, len(regions)))
    weights = np.zeros(len(regions))
    for i, reg in enumerate(regions):
        if reg.node_count == 0:
            raise ValueError(f"cost region {i} contains no grid nodes")
        factors[reg.membership, i] = cell
        weights[i] = 1.0 / reg.area
    return LowRankQ(factors, weights)


class OperatorTerm:
    """One term A_j(x) of the state-dependent operator library.

    Subclasses provide the full matrix, the action A_j(x) x, the Jacobian of
    that action (for implicit integrators), and row sampling used by DEIM:
    ``row_support`` lists the full-state indices a row's evaluation touches,
    ``row_values`` returns the row coefficients aligned with that support.
    """

    kind = "abstract"

    def matrix(self, x: np.ndarray) -> sp.spmatrix:
        raise NotImplementedError

    def action(self, x: np.ndarray) -> np.ndarray:
        return self.matrix(x) @ x

    def jacobian(self, x: np.ndarray) -> sp.spmatrix:
        """d(A_j(x) x)/dx as a sparse matrix."""
        raise NotImplementedError

    def linear_matrix(self, d: int) -> sp.spmatrix:
        """A_j(0); the term's contribution to the linearization at x = 0."""
        zero = np.zeros(d)
        return self.matrix(zero)

    @property
    def is_constant(self) -> bool:
        return False

    def row_support(self, rows: np.ndarray) -> list:
        raise NotImplementedError

    def row_values(self, rows: np.ndarray, supports: list, xsup: list) -> list:
        """Coefficients of the selected rows of A_j(x).

        ``xsup[k]`` holds the state values at ``supports[k]``; the returned
        arrays are aligned with the support index arrays.
        """
        raise NotImplementedError


class ConstantTerm(OperatorTerm):
    kind = "constant-matrix"

    def __init__(self, matrix: sp.spmatrix, name: str = "constant"):
        self._matrix = sp.csr_matrix(matrix)
        self.name = name

    def matrix(self, x):
        return self._matrix

    def action(self, x):
        return self._matrix @ x

    def jacobian(self, x):
        return self._matrix

    def linear_matrix(self, d):
        return self._matrix

    @property
    def is_constant(self):
        return True

    def row_support(self, rows):
        return [self._matrix[int(p)].indices.copy() for p in rows]

    def row_values(self, rows, supports, xsup):
        return [self._matrix[int(p)].data.copy() for p in rows]


class DiagonalTerm(OperatorTerm):
    """A_j(x) = diag(g(x)) for a pointwise function g."""

    kind = "diagonal-of-state-function"

    def __init__(self, g, dg, name: str = "diagonal"):
        self.g = g
        self.dg = dg
        self.name = name

    def matrix(self, x):
        return sp.diags(self.g(x)).tocsr()

    def action(self, x):
        return self.g(x) * x

    def jacobian(self, x):
        # d(g(x) * x)/dx = diag(g + g' * x)
        return sp.diags(self.g(x) + self.dg(x) * x).tocsr()

    def row_support(self, rows):
        return [np.array([int(p)]) for p in rows]

    def row_values(self, rows, supports, xsup):
        return [self.g(xs) for xs in xsup]


class UpwindAdvectionTerm(OperatorTerm):
    """First-order upwind discretization of y * (y_xi1 + y_xi2).

    Assembled as A(x) = diag(x) D(x) where D(x) applies one-sided
    differences in each direction: backward where the local speed x_k >= 0,
    forward where x_k < 0. Off-grid neighbors are Dirichlet zeros.
    """

    kind = "state-dependent-assembler"
    name = "upwind-advection"

    def __init__(self, grid: GridSpec):
        self.grid = grid
        m1, m2 = grid.m1, grid.m2
        d = grid.d
        idx = np.arange(d)
        i = idx % m1
        j = idx // m1
        # neighbor linear indices, -1 where the neighbor is a boundary node
        self._west = np.where(i > 0, idx - 1, -1)
        self._east = np.where(i < m1 - 1, idx + 1, -1)
        self._south = np.where(j > 0, idx - m1, -1)
        self._north = np.where(j < m2 - 1, idx + m1, -1)

    def _difference_matrix(self, x):
        """Upwind sum D(x) of one-sided differences in both directions."""
        g = self.grid
        d = g.d
        back = x >= 0
        rows, cols, vals = [], [], []

        def add(r, c, v):
            keep = c >= 0
            rows.append(r[keep])
            cols.append(c[keep])
            vals.append(v[keep] if isinstance(v, np.ndarray) else np.full(keep.sum(), v))

        idx = np.arange(d)
        for h, lo, hi in ((g.h1, self._west, self._east), (g.h2, self._south, self._north)):
            diag = np.where(back, 1.0 / h, -1.0 / h)
            rows.append(idx)
            cols.append(idx)
            vals.append(diag)
            add(idx[back], lo[back], -1.0 / h)
            add(idx[~back], hi[~back], 1.0 / h)
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
        return sp.csr_matrix((vals, (rows, cols)), shape=(d, d))

    def matrix(self, x):
        return sp.diags(x) @ self._difference_matrix(x)

    def action(self, x):
        return x * (self._difference_matrix(x) @ x)

    def jacobian(self, x):
        # direction frozen: d(x * D(x) x)/dx = diag(D x) + diag(x) D
        D = self._difference_matrix(x)
        return (sp.diags(D @ x) + sp.diags(x) @ D).tocsr()

    def linear_matrix(self, d):
        return sp.csr_matrix((d, d))

    def row_support(self, rows):
        out = []
        for p in rows:
            p = int(p)
            neigh = [p] + [
                int(q)
                for q in (self._west[p], self._east[p], self._south[p], self._north[p])
                if q >= 0
            ]
            out.append(np.array(sorted(set(neigh))))
        return out

    def row_values(self, rows, supports, xsup):
        g = self.grid
        out = []
        for p, sup, xs in zip(rows, supports, xsup):
            p = int(p)
            pos = {int(q): k for k, q in enumerate(sup)}
            val = np.zeros(len(sup))
            xp = xs[pos[p]]
            for h, lo, hi in ((g.h1, self._west[p], self._east[p]), (g.h2, self._south[p], self._north[p])):
                if xp >= 0:
                    val[pos[p]] += xp / h
                    if lo >= 0:
                        val[pos[int(lo)]] -= xp / h
                else:
                    val[pos[p]] -= xp / h
                    if hi >= 0:
                        val[pos[int(hi)]] += xp / h
            out.append(val)
        return out


@dataclass
class SemilinearModel:
    """Operator library sum_j mu_j A_j(x), actuator and cost data."""

    grid: GridSpec
    terms: list
    B: np.ndarray
    Q: LowRankQ
    R: np.ndarray
    name: str = "semilinear"
    control_region: RegionMask | None = None
    cost_regions: list = field(default_factory=list)

    def __post_init__(self):
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        if self.B.shape[0] != self.d:
            self.B = self.B.T
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        if not np.allclose(self.R, self.R.T, atol=1e-12):
            raise ValueError("R must be symmetric")
        if np.any(np.linalg.eigvalsh(self.R) <= 0):
            raise ValueError("R must be positive definite")

    @property
    def d(self) -> int:
        return self.grid.d

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def n_terms(self) -> int:
        return len(self.terms)

    def system_matrix(self, x: np.ndarray, mu) -> sp.csr_matrix:
        """A(x; mu) = sum_j mu_j A_j(x)."""
        mu = np.asarray(mu, dtype=float)
        out = None
        for c, term in zip(mu, self.terms):
            if c == 0.0:
                continue
            part = c * term.matrix(x)
            out = part if out is None else out + part
        if out is None:
            out = sp.csr_matrix((self.d, self.d))
        return out.tocsr()

    def action(self, x: np.ndarray, mu) -> np.ndarray:
        mu = np.asarray(mu, dtype=float)
        out = np.zeros_like(x)
        for c, term in zip(mu, self.terms):
            if c != 0.0:
                out += c * term.action(x)
        return out

    def jacobian(self, x: np.ndarray, mu) -> sp.csr_matrix:
        mu = np.asarray(mu, dtype=float)
        out = None
        for c, term in zip(mu, self.terms):
            if c == 0.0:
                continue
            part = c * term.jacobian(x)
            out = part if out is None else out + part
        if out is None:
            out = sp.csr_matrix((self.d, self.d))
        return out.tocsr()

    def linear_matrix(self, mu) -> sp.csr_matrix:
        """Linearization at the origin, sum_j mu_j A_j(0)."""
        mu = np.asarray(mu, dtype=float)
        out = None
        for c, term in zip(mu, self.terms):
            if c == 0.0:
                continue
            part = c * term.linear_matrix(self.d)
            out = part if out is None else out + part
        if out is None:
            out = sp.csr_matrix((self.d, self.d))
        return out.tocsr()

    def regression_columns(self, x: np.ndarray) -> np.ndarray:
        """d x n matrix whose column j is A_j(x) x."""
        return np.column_stack([term.action(x) for term in self.terms])


def _paper_geometry(grid, control_boxes, cost_boxes, R):
    control = RegionMask.from_boxes(grid, control_boxes or CONTROL_BOXES)
    regions = [RegionMask.from_boxes(grid, [b]) for b in (cost_boxes or COST_BOXES)]
    B = build_actuator(grid, control)
    Q = build_cost_matrix(grid, regions)
    return control, regions, B, Q, np.atleast_2d(float(R))


def allen_cahn_model(grid: GridSpec, *, R=1.0, control_boxes=None, cost_boxes=None) -> SemilinearModel:
    """Allen-Cahn benchmark: terms [Laplacian, identity, diag(x^2)]."""
    control, regions, B, Q, Rm = _paper_geometry(grid, control_boxes, cost_boxes, R)
    terms = [
        ConstantTerm(build_dirichlet_laplacian(grid), name="laplacian"),
        ConstantTerm(sp.identity(grid.d, format="csr"), name="identity"),
        DiagonalTerm(lambda x: x**2, lambda x: 2.0 * x, name="cubic-reaction"),
    ]
    return SemilinearModel(grid, terms, B, Q, Rm, name="allen-cahn",
                           control_region=control, cost_regions=regions)


def advection_model(grid: GridSpec, *, R=1.0, control_boxes=None, cost_boxes=None) -> SemilinearModel:
    """Nonlinear-advection benchmark: [Laplacian, upwind y*(y_x1+y_x2), diag(e^{-0.1 x})]."""
    control, regions, B, Q, Rm = _paper_geometry(grid, control_boxes, cost_boxes, R)
    terms = [
        ConstantTerm(build_dirichlet_laplacian(grid), name="laplacian"),
        UpwindAdvectionTerm(grid),
        DiagonalTerm(
            lambda x: np.exp(-0.1 * x),
            lambda x: -0.1 * np.exp(-0.1 * x),
            name="damped-source",
        ),
    ]
    return SemilinearModel(grid, terms, B, Q, Rm, name="advection",
                           control_region=control, cost_regions=regions)


def initial_condition(grid: GridSpec) -> np.ndarray:
    """0.2 sin(pi xi1) sin(pi xi2) sampled at interior nodes."""
    coords = grid.interior_coords()
    return 0.2 * np.sin(np.pi * coords[:, 0]) * np.sin(np.pi * coords[:, 1])
