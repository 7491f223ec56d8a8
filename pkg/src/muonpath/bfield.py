"""Magnetic field service: point -> (B, dB/dx).

Two sources are provided: an analytic air-core toroid with a 1/r azimuthal
field and an optional coil ripple, and a regular grid map interpolated
trilinearly.  ``UniformField`` exists for closure tests against helices.
Field in tesla, lengths in metres.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAP_HEADER = "muonpath-fmap/1"
DEFAULT_NODE_BUDGET = 20_000_000

KIND_NONE, KIND_TOROID, KIND_UNIFORM, KIND_MAP = 0, 1, 2, 3
_EMPTY_GRID = np.zeros((2, 2, 2, 3))


@dataclass(frozen=True)
class FieldSample:
    b: np.ndarray
    grad: np.ndarray  # grad[i, j] = dB_i / dx_j

    @property
    def magnitude(self) -> float:
        return float(np.linalg.norm(self.b))


def _zero_sample() -> FieldSample:
    return FieldSample(np.zeros(3), np.zeros((3, 3)))


@dataclass(frozen=True)
class ToroidModel:
    inner_radius: float = 5.0
    outer_radius: float = 9.0
    half_length: float = 12.0
    b_peak: float = 1.0
    n_coils: int = 8
    ripple: float = 0.0

    def __post_init__(self):
        if not 0 < self.inner_radius < self.outer_radius:
            raise ValueError("toroid: need 0 < inner_radius < outer_radius")
        if self.b_peak <= 0:
            raise ValueError("toroid: b_peak must be > 0")
        if not 0.0 <= self.ripple <= 0.2:
            raise ValueError("toroid: ripple must lie in [0, 0.2]")

    def evaluate(self, point) -> FieldSample:
        return eval_analytic(self, point)

    def kernel(self):
        params = np.array([self.inner_radius, self.outer_radius, self.half_length,
                           self.b_peak, float(self.n_coils), self.ripple])
        return KIND_TOROID, params, _EMPTY_GRID


@dataclass(frozen=True)
class UniformField:
    b: tuple[float, float, float] = (0.0, 0.0, 1.0)

    def evaluate(self, point) -> FieldSample:
        return FieldSample(np.array(self.b, dtype=float), np.zeros((3, 3)))

    def kernel(self):
        return KIND_UNIFORM, np.array(self.b, dtype=float), _EMPTY_GRID


class NoField:
    def evaluate(self, point) -> FieldSample:
        return _zero_sample()

    def kernel(self):
        return KIND_NONE, np.zeros(1), _EMPTY_GRID


def field_kernel(field):
    """(kind, params, grid) triple consumed by the compiled propagator."""
    if field is None:
        return NoField().kernel()
    return field.kernel()


def eval_analytic(model: ToroidModel, point) -> FieldSample:
    """Toroid field with its exact gradient.

    Inside the annulus B is azimuthal with magnitude
    ``b_peak * inner_radius / r * (1 + ripple * cos(n_coils * phi))``.
    """
    x, y, z = (float(c) for c in point)
    r2 = x * x + y * y
    r = math.sqrt(r2)
    if not (model.inner_radius <= r <= model.outer_radius and abs(z) <= model.half_length):
        return _zero_sample()
    phi = math.atan2(y, x)
    c = model.b_peak * model.inner_radius
    n = model.n_coils
    g = c * (1.0 + model.ripple * math.cos(n * phi))
    g_phi = -c * model.ripple * n * math.sin(n * phi)
    g_x = g_phi * (-y / r2)
    g_y = g_phi * (x / r2)
    r4 = r2 * r2
    b = np.array([-g * y / r2, g * x / r2, 0.0])
    grad = np.array([
        [-y * g_x / r2 + 2.0 * g * x * y / r4, -y * g_y / r2 - g / r2 + 2.0 * g * y * y / r4, 0.0],
        [x * g_x / r2 + g / r2 - 2.0 * g * x * x / r4, x * g_y / r2 - 2.0 * g * x * y / r4, 0.0],
        [0.0, 0.0, 0.0],
    ])
    return FieldSample(b, grad)


@dataclass(frozen=True, eq=False)
class FieldMap:
    origin: np.ndarray
    spacing: np.ndarray
    dims: tuple[int, int, int]
    samples: np.ndarray  # shape dims + (3,)

    def __post_init__(self):
        origin = np.asarray(self.origin, dtype=float)
        spacing = np.asarray(self.spacing, dtype=float)
        if np.any(spacing <= 0):
            raise ValueError("field map: spacing must be > 0")
        if any(d < 2 for d in self.dims):
            raise ValueError("field map: dims must be >= 2 per axis")
        samples = np.ascontiguousarray(self.samples, dtype=float)
        if samples.shape != tuple(self.dims) + (3,):
            raise ValueError("field map: samples shape does not match dims")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "samples", samples)

    def evaluate(self, point) -> FieldSample:
        return eval_map(self, point)

    def kernel(self):
        params = np.concatenate([self.origin, self.spacing, np.array(self.dims, dtype=float)])
        return KIND_MAP, params, self.samples

    def node(self, i: int, j: int, k: int) -> np.ndarray:
        return self.origin + self.spacing * np.array([i, j, k])


def build_map(model: ToroidModel, origin, spacing, dims, node_budget: int = DEFAULT_NODE_BUDGET):
    """Sample the analytic model on a regular grid (vectorised)."""
    dims = tuple(int(d) for d in dims)
    if any(d < 2 for d in dims):
        raise ValueError("field map: dims must be >= 2 per axis")
    n_nodes = dims[0] * dims[1] * dims[2]
    if n_nodes > node_budget:
        raise MemoryError(f"field map: {n_nodes} nodes exceeds budget {node_budget}")
    origin = np.asarray(origin, dtype=float)
    spacing = np.broadcast_to(np.asarray(spacing, dtype=float), (3,)).copy()
    axes = [origin[a] + spacing[a] * np.arange(dims[a]) for a in range(3)]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    r2 = x * x + y * y
    r = np.sqrt(r2)
    inside = ((r >= model.inner_radius) & (r <= model.outer_radius)
              & (np.abs(z) <= model.half_length))
    phi = np.arctan2(y, x)
    g = model.b_peak * model.inner_radius * (1.0 + model.ripple * np.cos(model.n_coils * phi))
    with np.errstate(divide="ignore", invalid="ignore"):
        bx = np.where(inside, -g * y / r2, 0.0)
        by = np.where(inside, g * x / r2, 0.0)
    samples = np.stack([bx, by, np.zeros_like(bx)], axis=-1)
    return FieldMap(origin, spacing, dims, samples)


def eval_map(fmap: FieldMap, point) -> FieldSample:
    """Trilinear interpolation; the gradient is that of the interpolant itself."""
    p = np.asarray(point, dtype=float)
    rel = (p - fmap.origin) / fmap.spacing
    upper = np.array(fmap.dims) - 1
    if np.any(rel < 0) or np.any(rel > upper):
        return _zero_sample()
    idx = np.minimum(np.floor(rel).astype(int), upper - 1)
    t = rel - idx
    i, j, k = idx
    cube = fmap.samples[i:i + 2, j:j + 2, k:k + 2]  # (2,2,2,3)
    wx = np.array([1.0 - t[0], t[0]])
    wy = np.array([1.0 - t[1], t[1]])
    wz = np.array([1.0 - t[2], t[2]])
    dw = np.array([-1.0, 1.0])
    b = np.einsum("i,j,k,ijkc->c", wx, wy, wz, cube)
    grad = np.empty((3, 3))
    grad[:, 0] = np.einsum("i,j,k,ijkc->c", dw, wy, wz, cube) / fmap.spacing[0]
    grad[:, 1] = np.einsum("i,j,k,ijkc->c", wx, dw, wz, cube) / fmap.spacing[1]
    grad[:, 2] = np.einsum("i,j,k,ijkc->c", wx, wy, dw, cube) / fmap.spacing[2]
    return FieldSample(b, grad)


def save_map(fmap: FieldMap, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(MAP_HEADER + "\n")
        fh.write(" ".join(repr(float(v)) for v in fmap.origin) + "\n")
        fh.write(" ".join(repr(float(v)) for v in fmap.spacing) + "\n")
        fh.write(" ".join(str(d) for d in fmap.dims) + "\n")
        np.savetxt(fh, fmap.samples.reshape(-1, 3), fmt="%.17g")


def load_map(path) -> FieldMap:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != MAP_HEADER:
        raise ValueError(f"field map: expected header {MAP_HEADER!r}")
    origin = np.array(lines[1].split(), dtype=float)
    spacing = np.array(lines[2].split(), dtype=float)
    dims = tuple(int(v) for v in lines[3].split())
    values = np.array(" ".join(lines[4:]).split(), dtype=float)
    if values.size != 3 * dims[0] * dims[1] * dims[2]:
        raise ValueError("field map: sample count does not match dims")
    return FieldMap(origin, spacing, dims, values.reshape(dims + (3,)))
