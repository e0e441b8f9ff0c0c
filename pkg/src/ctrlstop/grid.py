"""Tensor-product space-time lattices, nodal fields and the shared
finite-difference discretization of the generator L = 0.5 tr(a D^2) + <b, grad>.

The same stencils (centered second differences, centered first differences
with one-sided upwinding where the cell Peclet number |b| hx / a exceeds 2)
back both the penalized solver and the obstacle-problem oracle, so field
comparisons are free of stencil mismatch.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .model import ProblemSpec

__all__ = ["Grid", "GridField", "Operator", "build_operator"]

PECLET_SWITCH = 2.0


@dataclass(frozen=True)
class Grid:
    """Uniform lattice on [0,T] x [-m, m]^d (d = 1 or 2).

    In d=2 the ball of radius m is approximated by masking the square:
    nodes with |x| > m are Dirichlet nodes carrying boundary data.
    """

    d: int
    m: float
    nx: int  # nodes per spatial axis
    nt: int  # time steps (nt+1 levels)
    T: float

    def __post_init__(self):
        if self.d not in (1, 2):
            raise ValueError("grid supports d = 1 or 2")
        if self.nx < 5 or self.nt < 1:
            raise ValueError("grid too small")

    @property
    def hx(self) -> float:
        return 2.0 * self.m / (self.nx - 1)

    @property
    def ht(self) -> float:
        return self.T / self.nt

    @property
    def axis(self) -> np.ndarray:
        return np.linspace(-self.m, self.m, self.nx)

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.nt + 1)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.nx,) * self.d

    @property
    def n_nodes(self) -> int:
        return self.nx**self.d

    def points(self) -> np.ndarray:
        """Node coordinates, shape (d, n_nodes), C-order raveled."""
        if self.d == 1:
            return self.axis[None, :]
        xx, yy = np.meshgrid(self.axis, self.axis, indexing="ij")
        return np.stack([xx.ravel(), yy.ravel()], axis=0)

    def dirichlet_mask(self) -> np.ndarray:
        """Boundary nodes: outside the open ball of radius m, or the box edge."""
        pts = self.points()
        mask = np.sum(pts**2, axis=0) >= self.m**2 * (1.0 - 1e-12)
        if self.d == 1:
            mask[0] = mask[-1] = True
        else:
            idx = np.arange(self.n_nodes).reshape(self.shape)
            mask = mask.copy()
            mask[idx[0, :].ravel()] = True
            mask[idx[-1, :].ravel()] = True
            mask[idx[:, 0].ravel()] = True
            mask[idx[:, -1].ravel()] = True
        return mask

    def cfl_diagnostic(self, spec: ProblemSpec) -> float:
        """ht * (max diffusion coefficient) / hx^2 (reported, not enforced)."""
        pts = self.points()
        amax = 0.0
        for k in range(0, pts.shape[1], max(1, pts.shape[1] // 512)):
            a = spec.a_matrix(pts[:, k])
            amax = max(amax, float(np.max(np.abs(np.diag(a)))))
        return self.ht * amax / self.hx**2


@dataclass
class GridField:
    """Nodal values over the full lattice: values[k] is the slice at times[k]."""

    grid: Grid
    values: np.ndarray  # shape (nt+1, n_nodes)

    def __post_init__(self):
        expected = (self.grid.nt + 1, self.grid.n_nodes)
        if self.values.shape != expected:
            raise ValueError(f"field shape {self.values.shape} != {expected}")

    def slice_at(self, k: int) -> np.ndarray:
        return self.values[k].reshape(self.grid.shape)

    def nodal_gradient(self, k: int) -> np.ndarray:
        """Centered-difference spatial gradient of slice k, shape (d, *shape)."""
        u = self.slice_at(k)
        grads = np.gradient(u, self.grid.hx)
        if self.grid.d == 1:
            return np.asarray(grads)[None, :]
        return np.stack(grads, axis=0)

    def gradient_norm(self, k: int) -> np.ndarray:
        g = self.nodal_gradient(k)
        return np.sqrt(np.sum(g**2, axis=0)).ravel()

    def interp_time_index(self, t: float) -> tuple[int, float]:
        tt = np.clip(t, 0.0, self.grid.T)
        pos = tt / self.grid.ht
        k = int(min(np.floor(pos), self.grid.nt - 1))
        return k, pos - k

    def sample(self, t: float, x: np.ndarray) -> np.ndarray:
        """Field value at time t and spatial points x (d, n): linear in t,
        linear/bilinear in space; queries outside the box are clamped."""
        k, w = self.interp_time_index(t)
        lo = _space_interp(self.grid, self.values[k], x)
        hi = _space_interp(self.grid, self.values[k + 1], x)
        return (1.0 - w) * lo + w * hi

    def sample_gradient(self, t: float, x: np.ndarray) -> np.ndarray:
        """Interpolated nodal centered-difference gradient at (t, x)."""
        k, w = self.interp_time_index(t)
        g_lo = self.nodal_gradient(k)
        g_hi = self.nodal_gradient(k + 1)
        out = np.empty((self.grid.d,) + x.shape[1:])
        for i in range(self.grid.d):
            lo = _space_interp(self.grid, g_lo[i].ravel(), x)
            hi = _space_interp(self.grid, g_hi[i].ravel(), x)
            out[i] = (1.0 - w) * lo + w * hi
        return out

    def restrict_common(self, other: "GridField") -> tuple[np.ndarray, np.ndarray]:
        """Values of self and other on their common nodes (other interpolated)."""
        radius = min(self.grid.m, other.grid.m)
        pts = self.grid.points()
        keep = np.sum(pts**2, axis=0) <= radius**2 * (1.0 + 1e-12)
        if not np.any(keep):
            raise ValueError("grids have no common nodes")
        mine = []
        theirs = []
        for k, t in enumerate(self.grid.times):
            mine.append(self.values[k][keep])
            theirs.append(other.sample(float(t), pts[:, keep]))
        return np.asarray(mine), np.asarray(theirs)


def _space_interp(grid: Grid, flat_values: np.ndarray, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    axis = grid.axis
    pos = np.clip((x - axis[0]) / grid.hx, 0.0, grid.nx - 1 - 1e-12)
    i0 = pos.astype(int)
    frac = pos - i0
    if grid.d == 1:
        v = flat_values
        return (1 - frac[0]) * v[i0[0]] + frac[0] * v[i0[0] + 1]
    v = flat_values.reshape(grid.shape)
    fx, fy = frac[0], frac[1]
    ix, iy = i0[0], i0[1]
    return (
        (1 - fx) * (1 - fy) * v[ix, iy]
        + fx * (1 - fy) * v[ix + 1, iy]
        + (1 - fx) * fy * v[ix, iy + 1]
        + fx * fy * v[ix + 1, iy + 1]
    )


@dataclass
class Operator:
    """Discrete generator data on a grid for a given problem spec.

    L_matrix applies (L - r) on interior rows (Dirichlet rows are zero);
    the implicit factor solves (I/ht - (L - r)) restricted to interior rows
    with identity on Dirichlet rows.  a_nodal/b_nodal hold the coefficient
    fields so callers can assemble modified-drift level systems.
    """

    grid: Grid
    spec: ProblemSpec
    L_matrix: sp.csr_matrix
    dirichlet: np.ndarray
    upwind_fraction: float
    a_nodal: np.ndarray = field(default=None, repr=False)  # (d, d, n)
    b_nodal: np.ndarray = field(default=None, repr=False)  # (d, n)
    _solver: object = field(default=None, repr=False)

    def implicit_solve(self, rhs: np.ndarray) -> np.ndarray:
        return self._solver(rhs)

    def apply_generator(self, flat_values: np.ndarray) -> np.ndarray:
        """(L - r) u on interior nodes (zeros on Dirichlet rows)."""
        return self.L_matrix @ flat_values

    def level_solver(self, extra_drift: np.ndarray | None, extra_diag: np.ndarray | None):
        """Solver for (I/ht - (L - r) - <extra_drift, grad .> + diag(extra_diag))
        with Dirichlet rows identity.

        The base generator keeps its static stencil; the extra drift (the
        penalty linearization) is discretized with CENTERED differences so
        the linear model is the exact Gateaux derivative of the frozen-source
        residual, whose gradients are also centered.

        d=1 assembles a tridiagonal system solved with solve_banded;
        d=2 assembles a sparse matrix factorized per call.
        """
        grid = self.grid
        hx, ht = grid.hx, grid.ht
        n = grid.n_nodes
        diag_extra = np.zeros(n) if extra_diag is None else extra_diag
        dirichlet = self.dirichlet
        interior = ~dirichlet

        if grid.d == 1:
            a = self.a_nodal[0, 0]
            b1 = self.b_nodal[0]
            with np.errstate(divide="ignore", invalid="ignore"):
                peclet = np.where(a > 0, np.abs(b1) * hx / a, np.inf)
            centered = peclet <= PECLET_SWITCH
            diff = 0.5 * a / hx**2
            e1 = np.zeros(n) if extra_drift is None else extra_drift[0]
            lower = (
                -diff
                + np.where(centered, b1 / (2 * hx), np.where(b1 < 0, b1 / hx, 0.0))
                + e1 / (2 * hx)
            )
            upper = (
                -diff
                - np.where(centered, b1 / (2 * hx), np.where(b1 > 0, b1 / hx, 0.0))
                - e1 / (2 * hx)
            )
            diag = (
                1.0 / ht
                + self.spec.r
                + diag_extra
                + 2.0 * diff
                + np.where(centered, 0.0, np.abs(b1) / hx)
            )
            diag[dirichlet] = 1.0
            ab = np.zeros((3, n))
            ab[0, 1:] = np.where(interior[:-1], upper[:-1], 0.0)
            ab[1] = diag
            ab[2, :-1] = np.where(interior[1:], lower[1:], 0.0)
            from scipy.linalg import solve_banded

            def solve(rhs):
                return solve_banded((1, 1), ab, rhs)

            return solve

        # d == 2: generic sparse assembly with the shared stencil rules
        idx_all = np.arange(n)
        interior_idx = idx_all[interior]
        rows, cols, vals = [], [], []

        def neighbor(idx, axis, step):
            stride = grid.nx if axis == 0 else 1
            return idx + step * stride

        for axis in range(2):
            a_diag = self.a_nodal[axis, axis][interior]
            b_ax = self.b_nodal[axis][interior]
            e_ax = (
                np.zeros(interior_idx.shape)
                if extra_drift is None
                else extra_drift[axis][interior]
            )
            ip = neighbor(interior_idx, axis, +1)
            im = neighbor(interior_idx, axis, -1)
            coef = 0.5 * a_diag / hx**2
            with np.errstate(divide="ignore", invalid="ignore"):
                peclet = np.where(a_diag > 0, np.abs(b_ax) * hx / a_diag, np.inf)
            centered = peclet <= PECLET_SWITCH
            c_half = np.where(centered, b_ax / (2.0 * hx), 0.0) + e_ax / (2.0 * hx)
            up_pos = ~centered & (b_ax > 0)
            up_neg = ~centered & (b_ax < 0)
            rows.extend([interior_idx] * 3)
            cols.extend([ip, im, interior_idx])
            vals.extend([-(coef) - c_half, -(coef) + c_half, 2.0 * coef])
            rows.extend([interior_idx[up_pos]] * 2)
            cols.extend([ip[up_pos], interior_idx[up_pos]])
            vals.extend([-b_ax[up_pos] / hx, b_ax[up_pos] / hx])
            rows.extend([interior_idx[up_neg]] * 2)
            cols.extend([im[up_neg], interior_idx[up_neg]])
            vals.extend([b_ax[up_neg] / hx, -b_ax[up_neg] / hx])
        a12 = self.a_nodal[0, 1][interior]
        if np.any(a12 != 0.0):
            for sx, sy, sign in ((+1, +1, +1), (-1, -1, +1), (+1, -1, -1), (-1, +1, -1)):
                nb = neighbor(neighbor(interior_idx, 0, sx), 1, sy)
                rows.append(interior_idx)
                cols.append(nb)
                vals.append(np.full(interior_idx.shape, -sign) * a12 / (4.0 * hx**2))
        rows.append(idx_all)
        cols.append(idx_all)
        diag0 = np.where(
            interior, 1.0 / ht + self.spec.r + diag_extra, 1.0
        )
        vals.append(diag0)
        rows = np.concatenate([np.atleast_1d(r) for r in rows])
        cols = np.concatenate([np.atleast_1d(c) for c in cols])
        vals = np.concatenate([np.atleast_1d(v) for v in vals])
        M = sp.csc_matrix((vals, (rows, cols)), shape=(n, n))
        lu = sp.linalg.splu(M)
        return lu.solve


def build_operator(grid: Grid, spec: ProblemSpec) -> Operator:
    """Assemble the stencil matrix for L - r and factorize the implicit system."""
    if spec.d != grid.d:
        raise ValueError("spec and grid dimension mismatch")
    n = grid.n_nodes
    pts = grid.points()
    dirichlet = grid.dirichlet_mask()
    hx = grid.hx

    bvals = spec.drift(pts)  # (d, n)
    avals = np.empty((grid.d, grid.d, n))
    svals = spec.diffusion(pts)  # (d, d', n)
    for i in range(grid.d):
        for j in range(grid.d):
            avals[i, j] = np.sum(svals[i] * svals[j], axis=0)

    rows, cols, vals = [], [], []
    interior = ~dirichlet
    idx_all = np.arange(n)

    def neighbor(idx, axis, step):
        if grid.d == 1:
            return idx + step
        stride = grid.nx if axis == 0 else 1
        return idx + step * stride

    upwind_nodes = 0
    interior_idx = idx_all[interior]
    for axis in range(grid.d):
        a_diag = avals[axis, axis][interior]
        b_ax = bvals[axis][interior]
        ip = neighbor(interior_idx, axis, +1)
        im = neighbor(interior_idx, axis, -1)
        # diffusion: 0.5 * a_ii * (u_+ - 2u + u_-)/hx^2
        coef = 0.5 * a_diag / hx**2
        rows.extend([interior_idx, interior_idx, interior_idx])
        cols.extend([ip, im, interior_idx])
        vals.extend([coef, coef, -2.0 * coef])
        # convection: centered unless the cell Peclet number exceeds the switch
        with np.errstate(divide="ignore", invalid="ignore"):
            peclet = np.where(a_diag > 0, np.abs(b_ax) * hx / a_diag, np.inf)
        centered = peclet <= PECLET_SWITCH
        upwind_nodes += int(np.sum(~centered))
        c_half = np.where(centered, b_ax / (2.0 * hx), 0.0)
        rows.extend([interior_idx, interior_idx])
        cols.extend([ip, im])
        vals.extend([c_half, -c_half])
        up = ~centered
        if np.any(up):
            pos = up & (b_ax > 0)
            neg = up & (b_ax < 0)
            # b>0: forward difference, b<0: backward difference (M-matrix signs)
            rows.extend([interior_idx[pos], interior_idx[pos]])
            cols.extend([ip[pos], interior_idx[pos]])
            vals.extend([b_ax[pos] / hx, -b_ax[pos] / hx])
            rows.extend([interior_idx[neg], interior_idx[neg]])
            cols.extend([im[neg], interior_idx[neg]])
            vals.extend([-b_ax[neg] / hx, b_ax[neg] / hx])
    if grid.d == 2:
        # cross term a12 * u_xy with the centered 4-corner stencil
        a12 = avals[0, 1][interior]
        if np.any(a12 != 0.0):
            for sx, sy, sign in ((+1, +1, +1), (-1, -1, +1), (+1, -1, -1), (-1, +1, -1)):
                nb = neighbor(neighbor(interior_idx, 0, sx), 1, sy)
                rows.append(interior_idx)
                cols.append(nb)
                vals.append(sign * a12 / (4.0 * hx**2))
    # zero-order term -r on interior rows
    rows.append(interior_idx)
    cols.append(interior_idx)
    vals.append(np.full(interior_idx.shape, -spec.r))

    rows = np.concatenate([np.atleast_1d(r) for r in rows])
    cols = np.concatenate([np.atleast_1d(c) for c in cols])
    vals = np.concatenate([np.atleast_1d(v) for v in vals])
    L = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))

    ht = grid.ht
    M = sp.identity(n, format="csr") / ht - L
    # Dirichlet rows: identity
    M = M.tolil()
    dir_idx = idx_all[dirichlet]
    M.rows[dir_idx] = [[int(i)] for i in dir_idx]
    M.data[dir_idx] = [[1.0] for _ in dir_idx]
    M = M.tocsc()
    lu = sp.linalg.splu(M)

    op = Operator(
        grid=grid,
        spec=spec,
        L_matrix=L,
        dirichlet=dirichlet,
        upwind_fraction=upwind_nodes / max(1, interior_idx.size * grid.d),
        a_nodal=avals,
        b_nodal=bvals,
    )
    op._solver = lu.solve
    return op
