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

"""The Laplace fundamental solution and the Newtonian and single layer
potentials of reference anomaly shapes, in closed form where known and by
quadrature otherwise."""

import functools
import logging
import math
import warnings
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

SHAPE_KINDS = ("ball", "ellipsoid", "cube")
DEFAULT_RESOLUTION = 16
CUBE_POINTS = 2

Quadrature = Tuple[np.ndarray, np.ndarray]
Panels = Tuple[np.ndarray, np.ndarray, np.ndarray]


def gamma_fund(x: Sequence[float]) -> float:
    """Gamma(x) = -1 / (4 pi |x|)."""
    norm = float(np.linalg.norm(x))
    if norm == 0:
        raise ValueError("The fundamental solution is singular at x = 0")
    return -1.0 / (4 * math.pi * norm)


def gamma_kernel(r: np.ndarray) -> np.ndarray:
    return -1.0 / (4 * np.pi * np.asarray(r))


def ball_average_kernel(d: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Average of Gamma(x - y) over y in a ball of radius a at distance d.

    Equals Gamma(d) outside the ball and -(3a^2 - d^2) / (8 pi a^3) inside.
    """
    d = np.asarray(d, dtype=np.float64)
    a = np.broadcast_to(np.asarray(a, dtype=np.float64), d.shape)
    inside = d < a
    result = np.empty_like(d)
    result[~inside] = gamma_kernel(d[~inside])
    result[inside] = -(3 * a[inside] ** 2 - d[inside] ** 2) / (
        8 * np.pi * a[inside] ** 3)
    return result


def _gauss(count: int) -> Tuple[np.ndarray, np.ndarray]:
    return np.polynomial.legendre.leggauss(count)


def _sphere_directions(resolution: int):
    """Gauss-Legendre in cos(theta), uniform in phi. Weights sum to 4 pi."""
    cos_theta, w_theta = _gauss(resolution)
    n_phi = 2 * resolution
    phi = 2 * np.pi * (np.arange(n_phi) + 0.5) / n_phi
    sin_theta = np.sqrt(1 - cos_theta ** 2)
    directions = np.stack([
        np.outer(sin_theta, np.cos(phi)),
        np.outer(sin_theta, np.sin(phi)),
        np.outer(cos_theta, np.ones(n_phi))], axis=-1).reshape(-1, 3)
    weights = np.outer(w_theta, np.full(n_phi, 2 * np.pi / n_phi)).ravel()
    return directions, weights


@functools.lru_cache(maxsize=32)
def _volume_rule(kind: str, size: Tuple[float, ...],
                 resolution: int) -> Quadrature:
    if kind == "cube":
        half = size[0]
        nodes, weights = _gauss(CUBE_POINTS)
        edges = np.linspace(-half, half, resolution + 1)
        width = edges[1] - edges[0]
        centers = (edges[:-1] + edges[1:]) / 2
        axis = (centers[:, None] + nodes[None, :] * width / 2).ravel()
        axis_w = np.tile(weights * width / 2, resolution)
        grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"),
                        axis=-1).reshape(-1, 3)
        grid_w = np.einsum("i,j,k->ijk", axis_w, axis_w, axis_w).ravel()
        return grid, grid_w
    semi_axes = np.asarray(size)
    r_nodes, r_weights = _gauss(resolution)
    r = (r_nodes + 1) / 2
    r_w = r_weights / 2
    directions, d_weights = _sphere_directions(resolution)
    points = (r[:, None, None] * directions[None, :, :]).reshape(-1, 3)
    weights = np.outer(r ** 2 * r_w, d_weights).ravel()
    return points * semi_axes, weights * float(np.prod(semi_axes))


@functools.lru_cache(maxsize=32)
def _surface_rule(kind: str, size: Tuple[float, ...],
                  resolution: int) -> Panels:
    if kind == "cube":
        half = size[0]
        nodes, weights = _gauss(CUBE_POINTS)
        edges = np.linspace(-half, half, resolution + 1)
        width = edges[1] - edges[0]
        centers = (edges[:-1] + edges[1:]) / 2
        axis = (centers[:, None] + nodes[None, :] * width / 2).ravel()
        axis_w = np.tile(weights * width / 2, resolution)
        u, v = (grid.ravel() for grid in np.meshgrid(axis, axis,
                                                     indexing="ij"))
        face_w = np.outer(axis_w, axis_w).ravel()
        points, normals, areas = [], [], []
        for dim in range(3):
            others = [d for d in range(3) if d != dim]
            for sign in (-1.0, 1.0):
                face = np.empty((u.size, 3))
                face[:, dim] = sign * half
                face[:, others[0]] = u
                face[:, others[1]] = v
                normal = np.zeros((u.size, 3))
                normal[:, dim] = sign
                points.append(face)
                normals.append(normal)
                areas.append(face_w)
        return (np.concatenate(points), np.concatenate(normals),
                np.concatenate(areas))
    semi_axes = np.asarray(size)
    directions, d_weights = _sphere_directions(resolution)
    # Nanson: n dS = det(A) A^-T u dS0 for the map A = diag(semi_axes).
    scaled = directions / semi_axes
    lengths = np.linalg.norm(scaled, axis=1)
    normals = scaled / lengths[:, None]
    areas = float(np.prod(semi_axes)) * lengths * d_weights
    return directions * semi_axes, normals, areas


@dataclass(frozen=True)
class ReferenceShape:
    """A reference anomaly shape B centered at the origin.

    ``size`` is (radius,) for a ball, the three semi-axes for an ellipsoid
    and (half_width,) for a cube.
    """
    kind: str
    size: Tuple[float, ...]
    resolution: int = DEFAULT_RESOLUTION

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValueError("Shape kind should be one of {}, got {!r}".format(
                SHAPE_KINDS, self.kind))
        expected = 3 if self.kind == "ellipsoid" else 1
        size = tuple(float(s) for s in self.size)
        if len(size) != expected or min(size) <= 0:
            raise ValueError("A {} needs {} positive size value(s), got "
                             "{}".format(self.kind, expected, self.size))
        if self.resolution < 2:
            raise ValueError("Quadrature resolution should be at least 2")
        object.__setattr__(self, "size", size)

    @classmethod
    def ball(cls, radius: float = 0.5,
             resolution: int = DEFAULT_RESOLUTION) -> "ReferenceShape":
        return cls("ball", (radius,), resolution)

    @classmethod
    def ellipsoid(cls, semi_axes: Sequence[float],
                  resolution: int = DEFAULT_RESOLUTION) -> "ReferenceShape":
        return cls("ellipsoid", tuple(semi_axes), resolution)

    @classmethod
    def cube(cls, half_width: float = 0.5,
             resolution: int = DEFAULT_RESOLUTION) -> "ReferenceShape":
        return cls("cube", (half_width,), resolution)

    def refined(self, factor: int = 2) -> "ReferenceShape":
        return ReferenceShape(self.kind, self.size, self.resolution * factor)

    @property
    def semi_axes(self) -> Tuple[float, float, float]:
        if self.kind == "ellipsoid":
            return self.size  # type: ignore
        return (self.size[0],) * 3  # type: ignore

    @property
    def volume(self) -> float:
        if self.kind == "cube":
            return (2 * self.size[0]) ** 3
        return 4 * math.pi / 3 * float(np.prod(self.semi_axes))

    @property
    def diameter(self) -> float:
        if self.kind == "cube":
            return 2 * math.sqrt(3) * self.size[0]
        return 2 * max(self.semi_axes)

    @property
    def inradius(self) -> float:
        return min(self.semi_axes)

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        if self.kind == "cube":
            return np.all(np.abs(points) <= self.size[0], axis=-1)
        scaled = points / np.asarray(self.semi_axes)
        return np.sum(scaled ** 2, axis=-1) <= 1

    def volume_quadrature(self) -> Quadrature:
        """Points and weights over B."""
        return _volume_rule(self.kind, self.size, self.resolution)

    def surface_quadrature(self) -> Panels:
        """Panel centers, outward unit normals and areas over the boundary."""
        return _surface_rule(self.kind, self.size, self.resolution)


def _ball_closed_form(radius: float, x: np.ndarray) -> float:
    rho = float(np.linalg.norm(x))
    if rho <= radius:
        return -(3 * radius ** 2 - rho ** 2) / 6
    return -radius ** 3 / (3 * rho)


def newtonian_potential(shape: ReferenceShape, x: Sequence[float] = (0, 0, 0),
                        method: Optional[str] = None) -> float:
    """N_B(x) = integral over B of Gamma(x - y) dy.

    ``method`` is None (closed form for balls, volume quadrature
    otherwise), ``"volume"`` or ``"surface"``. The volume rule replaces the
    kernel near x by its average over the equal-volume ball of each
    quadrature cell; the surface rule uses
    N_B(x) = -1/(8 pi) * integral over dB of (y - x).nu / |y - x|.
    """
    x = np.asarray(x, dtype=np.float64)
    if method is None:
        if shape.kind == "ball":
            return _ball_closed_form(shape.size[0], x)
        method = "volume"
    if method == "volume":
        points, weights = shape.volume_quadrature()
        distance = np.linalg.norm(points - x, axis=1)
        equal_radius = (3 * weights / (4 * np.pi)) ** (1 / 3)
        return float(np.sum(weights * ball_average_kernel(distance,
                                                          equal_radius)))
    if method == "surface":
        centers, normals, areas = shape.surface_quadrature()
        offset = centers - x
        distance = np.linalg.norm(offset, axis=1)
        projection = np.sum(offset * normals, axis=1)
        return float(-np.sum(projection / distance * areas) / (8 * np.pi))
    raise ValueError("Method should be None, 'volume' or 'surface', got "
                     "{!r}".format(method))


def single_layer_normal(shape: ReferenceShape,
                        x: Sequence[float] = (0, 0, 0)) -> np.ndarray:
    """S_B[nu](x) = integral over dB of Gamma(x - y) nu(y), a 3-vector."""
    x = np.asarray(x, dtype=np.float64)
    centers, normals, areas = shape.surface_quadrature()
    distance = np.linalg.norm(centers - x, axis=1)
    if np.any(distance == 0):
        raise ValueError("Evaluation point lies on a panel center")
    panel_diameter = math.sqrt(float(np.max(areas)))
    if distance.min() < panel_diameter:
        message = ("Evaluation point is {:.3g} from the surface, closer than "
                   "the panel diameter {:.3g}".format(distance.min(),
                                                      panel_diameter))
        logger.warning(message)
        warnings.warn(message, RuntimeWarning)
    return np.sum((gamma_kernel(distance) * areas)[:, None] * normals, axis=0)


def gauss_flux(shape: ReferenceShape,
               x: Sequence[float] = (0, 0, 0)) -> float:
    """Flux of grad_y Gamma(x - y) through the boundary: 1 inside B, 0
    outside."""
    x = np.asarray(x, dtype=np.float64)
    centers, normals, areas = shape.surface_quadrature()
    offset = centers - x
    distance = np.linalg.norm(offset, axis=1)
    projection = np.sum(offset * normals, axis=1)
    return float(np.sum(projection / (4 * np.pi * distance ** 3) * areas))


def surface_closure(shape: ReferenceShape) -> float:
    """max |sum(area * normal)|, zero for a closed surface."""
    _, normals, areas = shape.surface_quadrature()
    return float(np.abs((areas[:, None] * normals).sum(axis=0)).max())


def quadrature_rows(shape: ReferenceShape
                    ) -> Tuple[List[Tuple[float, ...]],
                               List[Tuple[float, ...]]]:
    """Volume rows (x, y, z, w) and surface rows (x, y, z, nx, ny, nz, a)."""
    points, weights = shape.volume_quadrature()
    volume = [tuple(map(float, p)) + (float(w),)
              for p, w in zip(points, weights)]
    centers, normals, areas = shape.surface_quadrature()
    surface = [tuple(map(float, c)) + tuple(map(float, n)) + (float(a),)
               for c, n, a in zip(centers, normals, areas)]
    return volume, surface
