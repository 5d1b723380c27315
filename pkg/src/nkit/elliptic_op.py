# Copyright (c) 2026 The nkit developers
#
# Permission is hereby granted, free of charge, to any person obtaining a copy
# of this software and associated documentation files (the "Software"), to deal
# in the Software without restriction, including without limitation the rights
# to use, copy, modify, merge, publish, distribute, sublicense, and/or sell
# copies of the Software, and to permit persons to whom the Software is
# furnished to do so, subject to the following conditions:
#
# The above copyright notice and this permission notice shall be included in
# all copies or substantial portions of the Software.
#
# THE SOFTWARE IS PROVIDED "AS IS", WITHOUT WARRANTY OF ANY KIND, EXPRESS OR
# IMPLIED, INCLUDING BUT NOT LIMITED TO THE WARRANTIES OF MERCHANTABILITY,
# FITNESS FOR A PARTICULAR PURPOSE AND NONINFRINGEMENT. IN NO EVENT SHALL THE
# AUTHORS OR COPYRIGHT HOLDERS BE LIABLE FOR ANY CLAIM, DAMAGES OR OTHER
# LIABILITY, WHETHER IN AN ACTION OF CONTRACT, TORT OR OTHERWISE, ARISING FROM,
# OUT OF OR IN CONNECTION WITH THE SOFTWARE OR THE USE OR OTHER DEALINGS IN THE
# SOFTWARE.

"""Discrete operator for L = div(gamma grad) - ik with natural (zero conormal)
boundary conditions, and complex symmetric linear solvers.

The code solves -L u = f. Discretization is vertex centered: every node owns
the dual cell of its surrounding half cells, so boundary nodes own half,
quarter or eighth cells (``weights``). The stored matrix is the complex
symmetric ``K = W (-L_h)``::

    K = sum_a G_a^T diag(tau_a) G_a + ik W (+ W diag(absorption))

where ``G_a`` differences neighbouring nodes along axis ``a`` and ``tau_a`` is
the face mean of gamma times the dual face area fraction divided by h_a**2.
Interior rows are the classical 7-point flux stencil.
"""

import functools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import (Callable, List, Mapping, NamedTuple, Optional, Sequence,
                    Tuple)

import numpy as np

from scipy import sparse
from scipy.sparse import linalg as spla

from .grid_core import (CoefficientField, Constant, Domain, ScalarField,
                        generate_coefficient, make_domain)

logger = logging.getLogger(__name__)

K_FLOOR = 1e-6
MIN_TOL = 1e-14
MAX_TOL = 1e-2
MAX_ITERATION_FACTOR = 20
FACE_MEANS = ("harmonic", "arithmetic")
SOLVER_METHODS = ("cocg", "bicgstab", "gmres", "direct")
GMRES_RESTART = 50


@functools.lru_cache(maxsize=8)
def _difference_matrices(n: int) -> Tuple[sparse.csr_matrix, ...]:
    """Forward difference matrices along the three axes (faces x nodes)."""
    d1 = sparse.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1],
                      shape=(n - 1, n), format="csr")
    eye = sparse.identity(n, format="csr")
    return (sparse.kron(sparse.kron(d1, eye), eye, format="csr"),
            sparse.kron(sparse.kron(eye, d1), eye, format="csr"),
            sparse.kron(sparse.kron(eye, eye), d1, format="csr"))


@functools.lru_cache(maxsize=8)
def _axis_weights(n: int) -> np.ndarray:
    weights = np.ones(n)
    weights[0] = weights[-1] = 0.5
    weights.setflags(write=False)
    return weights


def node_weights(domain: Domain) -> np.ndarray:
    """Dual cell volume of every node as a fraction of a full cell."""
    w1 = _axis_weights(domain.n)
    return (w1[:, None, None] * w1[None, :, None] * w1[None, None, :]).ravel()


def _face_means(values: np.ndarray, axis: int, mean: str) -> np.ndarray:
    low = np.delete(values, -1, axis=axis)
    high = np.delete(values, 0, axis=axis)
    if mean == "harmonic":
        return 2 * low * high / (low + high)
    return 0.5 * (low + high)


def _transmissibilities(gamma: CoefficientField, mean: str
                        ) -> Tuple[np.ndarray, ...]:
    domain = gamma.domain
    w1 = _axis_weights(domain.n)
    transverse = (w1[None, :, None] * w1[None, None, :],
                  w1[:, None, None] * w1[None, None, :],
                  w1[:, None, None] * w1[None, :, None])
    result = []
    for axis, h in enumerate(domain.h):
        tau = _face_means(gamma.values, axis, mean) * transverse[axis] / h ** 2
        tau = np.ascontiguousarray(tau).ravel()
        tau.setflags(write=False)
        result.append(tau)
    return tuple(result)


class SolveReport(NamedTuple):
    iterations: int
    residual: float
    converged: bool
    method: str = "cocg"


@dataclass(frozen=True, eq=False)
class DiscreteOperator:
    domain: Domain
    matrix: sparse.csr_matrix
    k: float
    gamma: CoefficientField
    adjoint: bool
    weights: np.ndarray
    transmissibilities: Tuple[np.ndarray, np.ndarray, np.ndarray]
    mean: str = "harmonic"
    absorption: Optional[np.ndarray] = None

    @property
    def shift(self) -> complex:
        """The zeroth order coefficient of -L: ik, or -ik for L*."""
        return -1j * self.k if self.adjoint else 1j * self.k

    def flux(self, u: np.ndarray) -> np.ndarray:
        """The gamma part of K applied to flat node values."""
        result = np.zeros(self.domain.size, dtype=np.result_type(u, float))
        for g, tau in zip(_difference_matrices(self.domain.n),
                          self.transmissibilities):
            result += g.T @ (tau * (g @ u))
        return result

    def apply(self, u: ScalarField) -> ScalarField:
        """L_h u, evaluated in flux form (constants give exactly -ik u)."""
        if u.domain != self.domain:
            raise ValueError("Field and operator live on different domains")
        values = u.flat
        result = -self.flux(values) / self.weights - self.shift * values
        if self.absorption is not None:
            result = result - self.absorption * values
        return ScalarField(self.domain, result)

    def bilinear(self, u: np.ndarray, v: np.ndarray,
                 transmissibilities: Optional[Sequence[np.ndarray]] = None
                 ) -> complex:
        """Unconjugated discrete pairing h^3 sum tau (G u)(G v).

        ``transmissibilities`` replaces the operator's own face values, e.g.
        by a coefficient contrast.
        """
        if transmissibilities is None:
            transmissibilities = self.transmissibilities
        total = 0j
        for g, tau in zip(_difference_matrices(self.domain.n),
                          transmissibilities):
            total += np.sum(tau * (g @ np.ravel(u)) * (g @ np.ravel(v)))
        return complex(self.domain.cell_volume * total)

    def system_rhs(self, rhs: ScalarField,
                   boundary_load: Optional[np.ndarray] = None) -> np.ndarray:
        if rhs.domain != self.domain:
            raise ValueError("Field and operator live on different domains")
        b = self.weights * rhs.flat
        if boundary_load is not None:
            b = b + np.asarray(boundary_load).ravel()
        return b


def assemble(gamma: CoefficientField, k: float, *, adjoint: bool = False,
             mean: str = "harmonic", k_floor: float = K_FLOOR,
             absorption: Optional[np.ndarray] = None) -> DiscreteOperator:
    """Assemble -L_h for the coefficient ``gamma`` and shift ``k``.

    ``adjoint=True`` gives the operator of L* = div(gamma grad) + ik. The
    shift itself must stay above ``k_floor``; a negative shift is not the
    way to get the adjoint.
    """
    if not k >= k_floor:
        raise ValueError(
            "Shift k should be at least {}, got {}".format(k_floor, k))
    if mean not in FACE_MEANS:
        raise ValueError("Face mean should be one of {}, got {!r}".format(
            FACE_MEANS, mean))
    if gamma.nu <= 0:
        raise ValueError("Coefficient is not elliptic")
    domain = gamma.domain
    weights = node_weights(domain)
    weights.setflags(write=False)
    transmissibilities = _transmissibilities(gamma, mean)

    flux = sum(g.T @ sparse.diags(tau) @ g for g, tau in
               zip(_difference_matrices(domain.n), transmissibilities))
    diagonal = (-1j * k if adjoint else 1j * k) * weights
    if absorption is not None:
        absorption = np.array(absorption, dtype=np.float64).ravel()
        if absorption.size != domain.size:
            raise ValueError(
                "Absorption has {} values, domain has {} nodes".format(
                    absorption.size, domain.size))
        absorption.setflags(write=False)
        diagonal = diagonal + absorption * weights
    matrix = (flux + sparse.diags(diagonal)).tocsr()
    matrix.sort_indices()
    logger.debug("Assembled operator with %d unknowns and %d nonzeros "
                 "(k=%g, adjoint=%s, mean=%s)", domain.size, matrix.nnz, k,
                 adjoint, mean)
    return DiscreteOperator(domain, matrix, float(k), gamma, adjoint,
                            weights, transmissibilities, mean, absorption)


FACES = {"x-": (0, 0), "x+": (0, -1), "y-": (1, 0), "y+": (1, -1),
         "z-": (2, 0), "z+": (2, -1)}


def boundary_load(domain: Domain, g: Mapping[str, complex]) -> np.ndarray:
    """Conormal data ``g`` (one value per named face) integrated against
    the nodal basis, per node and divided by the cell volume."""
    w1 = _axis_weights(domain.n)
    transverse = w1[:, None] * w1[None, :]
    load = np.zeros(domain.shape, dtype=np.complex128)
    for face, value in g.items():
        if face not in FACES:
            raise ValueError("Face should be one of {}, got {!r}".format(
                tuple(FACES), face))
        axis, index = FACES[face]
        plane = [slice(None)] * 3
        plane[axis] = index
        load[tuple(plane)] += value * transverse / domain.h[axis]
    return load.ravel()


def _check_tol(tol: float):
    if not MIN_TOL < tol < MAX_TOL:
        raise ValueError(
            "Tolerance should be between {} and {}, got {}".format(
                MIN_TOL, MAX_TOL, tol))


def _relative_residual(matrix, x, b, b_norm) -> float:
    return float(np.linalg.norm(b - matrix @ x) / b_norm)


def _cocg_cycle(matrix, inv_diag, x, r, b_norm, target, budget):
    """Preconditioned COCG from x with residual r. Returns (x, steps)."""
    x = x.copy()
    z = inv_diag * r
    p = z.copy()
    rho = np.dot(r, z)
    steps = 0
    while steps < budget:
        q = matrix @ p
        pq = np.dot(p, q)
        if pq == 0 or rho == 0:
            logger.debug("COCG breakdown after %d steps", steps)
            break
        alpha = rho / pq
        x += alpha * p
        r = r - alpha * q
        steps += 1
        if np.linalg.norm(r) / b_norm <= target:
            break
        z = inv_diag * r
        rho_next = np.dot(r, z)
        p = z + (rho_next / rho) * p
        rho = rho_next
    return x, steps


def _cocg(matrix, b, tol, max_iterations):
    """Jacobi preconditioned conjugate orthogonal conjugate gradient.

    Uses unconjugated inner products, valid for complex symmetric matrices.
    The recursive residual is checked against the true residual; on a
    mismatch the iteration restarts from the current iterate.
    """
    inv_diag = 1.0 / matrix.diagonal()
    b_norm = np.linalg.norm(b)
    x = np.zeros_like(b)
    best_x, best_residual = x, 1.0
    iterations = 0
    previous = np.inf
    while True:
        r = b - matrix @ x
        residual = float(np.linalg.norm(r) / b_norm)
        if residual < best_residual:
            best_x, best_residual = x, residual
        if (residual <= tol or iterations >= max_iterations or
                residual >= previous):
            break
        previous = residual
        x, steps = _cocg_cycle(matrix, inv_diag, x, r, b_norm, 0.5 * tol,
                               max_iterations - iterations)
        if steps == 0:
            break
        iterations += steps
    return best_x, iterations


def _scipy_krylov(matrix, b, tol, max_iterations, method):
    counter = [0]

    def callback(_):
        counter[0] += 1

    preconditioner = sparse.diags(1.0 / matrix.diagonal())
    if method == "bicgstab":
        x, info = spla.bicgstab(matrix, b, rtol=0.5 * tol, atol=0.0,
                                maxiter=max_iterations, M=preconditioner,
                                callback=callback)
    else:
        x, info = spla.gmres(matrix, b, rtol=0.5 * tol, atol=0.0,
                             restart=GMRES_RESTART,
                             maxiter=max(1, max_iterations // GMRES_RESTART),
                             M=preconditioner, callback=callback,
                             callback_type="pr_norm")
    if info < 0:
        logger.warning("%s reported illegal input or breakdown (%d)",
                       method, info)
    return x, counter[0]


def _solve_system(op: DiscreteOperator, b: np.ndarray, tol: float,
                  method: str, max_iterations: Optional[int],
                  factor: Optional[Callable] = None
                  ) -> Tuple[np.ndarray, SolveReport]:
    if not np.all(np.isfinite(b)):
        raise ValueError("Right hand side should be finite")
    b = np.asarray(b, dtype=np.complex128)
    b_norm = np.linalg.norm(b)
    if b_norm == 0:
        return np.zeros_like(b), SolveReport(0, 0.0, True, method)
    if max_iterations is None or max_iterations <= 0:
        max_iterations = MAX_ITERATION_FACTOR * op.domain.size
    if method == "cocg":
        x, iterations = _cocg(op.matrix, b, tol, max_iterations)
    elif method in ("bicgstab", "gmres"):
        x, iterations = _scipy_krylov(op.matrix, b, tol, max_iterations,
                                      method)
    elif method == "direct":
        if factor is None:
            factor = _factorize(op)
        x, iterations = factor(b), 1
    else:
        raise ValueError("Solver method should be one of {}, got {!r}".format(
            SOLVER_METHODS, method))
    residual = _relative_residual(op.matrix, x, b, b_norm)
    report = SolveReport(iterations, residual, residual <= tol, method)
    if report.converged:
        logger.debug("%s converged in %d iterations, residual %.3e",
                     method, iterations, residual)
    else:
        logger.warning("%s did not converge: residual %.3e after %d "
                       "iterations (tol %.1e)", method, residual,
                       iterations, tol)
    return x, report


def _factorize(op: DiscreteOperator) -> Callable:
    return spla.splu(op.matrix.tocsc()).solve


def solve(op: DiscreteOperator, rhs: ScalarField, tol: float = 1e-8, *,
          method: str = "cocg", max_iterations: Optional[int] = None,
          boundary_load: Optional[np.ndarray] = None
          ) -> Tuple[ScalarField, SolveReport]:
    """Solve -L_h u = rhs.

    ``boundary_load`` holds integrated conormal boundary data per node,
    already divided by the cell volume; it is added to the system right
    hand side. A failed solve returns the best iterate with
    ``converged=False``.
    """
    _check_tol(tol)
    x, report = _solve_system(op, op.system_rhs(rhs, boundary_load), tol,
                              method, max_iterations)
    return ScalarField(op.domain, x), report


def solve_batch(op: DiscreteOperator, rhs_list: Sequence[ScalarField],
                tol: float = 1e-8, *, threads: int = 1, method: str = "cocg",
                max_iterations: Optional[int] = None
                ) -> List[Tuple[ScalarField, SolveReport]]:
    """Solve independent systems; output order follows ``rhs_list``."""
    _check_tol(tol)
    systems = [op.system_rhs(rhs) for rhs in rhs_list]
    factor = _factorize(op) if method == "direct" and systems else None

    def work(b):
        x, report = _solve_system(op, b, tol, method, max_iterations,
                                  factor)
        return ScalarField(op.domain, x), report

    if threads <= 1 or len(systems) <= 1 or method == "direct":
        return [work(b) for b in systems]
    with ThreadPoolExecutor(max_workers=threads) as executor:
        return list(executor.map(work, systems))


def cosine_mode(domain: Domain) -> ScalarField:
    """prod(cos(pi x_i / L_i)), a Neumann eigenfunction of the Laplacian."""
    values = np.ones(domain.shape)
    for dim, (axis, length) in enumerate(zip(domain.axes, domain.extent)):
        shape = [1, 1, 1]
        shape[dim] = -1
        values = values * np.cos(np.pi * axis / length).reshape(shape)
    return ScalarField(domain, values)


def cosine_eigenvalue(domain: Domain) -> float:
    return float(np.pi ** 2 * sum(1 / length ** 2
                                  for length in domain.extent))


class ManufacturedRun(NamedTuple):
    n: int
    h: float
    error: float
    report: SolveReport


def manufactured_convergence(ns: Sequence[int] = (17, 33, 65),
                             k: float = 1.0, tol: float = 1e-10,
                             extent: float = 1.0, method: str = "cocg"
                             ) -> Tuple[List[ManufacturedRun], List[float]]:
    """L-infinity errors for the cosine solution with gamma = 1.

    Returns the runs and the observed orders between consecutive grids.
    """
    runs = []
    for n in ns:
        domain = make_domain(extent, n)
        gamma = generate_coefficient(domain, Constant(1.0))
        op = assemble(gamma, k)
        exact = cosine_mode(domain)
        rhs = exact * (cosine_eigenvalue(domain) + 1j * k)
        u, report = solve(op, rhs, tol, method=method)
        error = float(np.max(np.abs(u.values - exact.values)))
        logger.info("Manufactured solution n=%d: L-inf error %.3e", n, error)
        runs.append(ManufacturedRun(n, max(domain.h), error, report))
    orders = [float(np.log(coarse.error / fine.error) /
                    np.log(coarse.h / fine.h))
              for coarse, fine in zip(runs, runs[1:])]
    return runs, orders
