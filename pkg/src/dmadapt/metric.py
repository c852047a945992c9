"""Metric tensors, analytic/discrete metric fields and metric-space measures.

A metric tensor is a symmetric positive-definite 3x3 matrix. Internally it is
kept as six numbers in the order ``(m11, m21, m22, m31, m32, m33)``, which is
also the component order of the ``.sol`` files written by :mod:`dmadapt.report`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels as K


class InvalidMetricError(ValueError):
    """A tensor is not symmetric positive definite."""


class AlignmentError(ValueError):
    """A discrete field does not match the mesh it is used with."""


@dataclass(frozen=True)
class MetricTensor:
    m11: float
    m21: float
    m22: float
    m31: float
    m32: float
    m33: float

    def __post_init__(self):
        if not is_spd(self.as_array()):
            raise InvalidMetricError(f"tensor is not positive definite: {self.as_array()}")

    @classmethod
    def from_array(cls, a) -> "MetricTensor":
        a = np.asarray(a, dtype=float)
        if a.shape == (3, 3):
            a = np.array([a[0, 0], a[1, 0], a[1, 1], a[2, 0], a[2, 1], a[2, 2]])
        return cls(*(float(x) for x in a))

    @classmethod
    def diag(cls, a: float, b: float, c: float) -> "MetricTensor":
        return cls(a, 0.0, b, 0.0, 0.0, c)

    def as_array(self) -> np.ndarray:
        return np.array([self.m11, self.m21, self.m22, self.m31, self.m32, self.m33])

    def matrix(self) -> np.ndarray:
        return six_to_matrix(self.as_array())

    def det(self) -> float:
        return float(np.linalg.det(self.matrix()))


def six_to_matrix(m) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    out = np.empty(m.shape[:-1] + (3, 3))
    out[..., 0, 0] = m[..., 0]
    out[..., 1, 0] = out[..., 0, 1] = m[..., 1]
    out[..., 1, 1] = m[..., 2]
    out[..., 2, 0] = out[..., 0, 2] = m[..., 3]
    out[..., 2, 1] = out[..., 1, 2] = m[..., 4]
    out[..., 2, 2] = m[..., 5]
    return out


def matrix_to_six(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return np.stack([a[..., 0, 0], a[..., 1, 0], a[..., 1, 1],
                     a[..., 2, 0], a[..., 2, 1], a[..., 2, 2]], axis=-1)


def is_spd(m) -> bool:
    m = np.asarray(m, dtype=float)
    if not np.all(np.isfinite(m)):
        return False
    return bool(np.all(np.linalg.eigvalsh(six_to_matrix(m)) > 0.0))


def _as6(t) -> np.ndarray:
    if isinstance(t, MetricTensor):
        return t.as_array()
    a = np.asarray(t, dtype=float)
    if a.shape == (3, 3):
        return matrix_to_six(a)
    return a


def log_metric(m) -> np.ndarray:
    """Matrix logarithm of one or many tensors (6-vector form)."""
    m = np.atleast_2d(np.asarray(m, dtype=float))
    out = np.empty_like(m)
    K.log_rows(np.ascontiguousarray(m), out)
    return out


def exp_metric(lm) -> np.ndarray:
    lm = np.atleast_2d(np.asarray(lm, dtype=float))
    out = np.empty_like(lm)
    K.exp_rows(np.ascontiguousarray(lm), out)
    return out


# --------------------------------------------------------------------------
# analytic fields

class AnalyticMetricField:
    """Base for fields defined by a formula; ``scale`` multiplies every tensor."""

    scale: float = 1.0

    def evaluate(self, points) -> np.ndarray:
        raise NotImplementedError

    def scaled(self, factor: float) -> "AnalyticMetricField":
        raise NotImplementedError


@dataclass(frozen=True)
class UniformMetric(AnalyticMetricField):
    h: float
    scale: float = 1.0

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("uniform metric needs h > 0")

    def evaluate(self, points) -> np.ndarray:
        points = np.atleast_2d(points)
        out = np.zeros((len(points), 6))
        v = self.scale / self.h ** 2
        out[:, 0] = out[:, 2] = out[:, 5] = v
        return out

    def scaled(self, factor: float) -> "UniformMetric":
        return UniformMetric(self.h, self.scale * factor)


@dataclass(frozen=True)
class Polar2Metric(AnalyticMetricField):
    """Curved shear layer around the cylinder r = 0.5 (r measured from the z axis).

    ``clamp_tangential`` caps d = 10(0.6 - r) at 1, so the tangential spacing
    stays at 0.025 for r < 0.5. Without it the tangential spacing reaches zero at
    r = 0.4667 and the field is singular there.
    """

    h_z: float = 0.1
    h_0: float = 0.001
    clamp_tangential: bool = True
    scale: float = 1.0

    def evaluate(self, points) -> np.ndarray:
        points = np.ascontiguousarray(np.atleast_2d(np.asarray(points, dtype=float)))
        out = np.empty((len(points), 6))
        K.polar2_rows(points, self.h_0, self.h_z, self.clamp_tangential, self.scale, out)
        return out

    def scaled(self, factor: float) -> "Polar2Metric":
        return Polar2Metric(self.h_z, self.h_0, self.clamp_tangential, self.scale * factor)


def eval_polar2(x: float, y: float, z: float, *, clamp_tangential: bool = True) -> MetricTensor:
    m = Polar2Metric(clamp_tangential=clamp_tangential).evaluate([[x, y, z]])[0]
    return MetricTensor.from_array(m)


@dataclass
class DiscreteMetricField:
    """One tensor per mesh vertex, index aligned with the vertex array."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(np.asarray(self.values, dtype=float).reshape(-1, 6))
        bad = np.linalg.eigvalsh(six_to_matrix(self.values))[:, 0] <= 0.0
        if np.any(bad) or not np.all(np.isfinite(self.values)):
            raise InvalidMetricError(
                f"{int(bad.sum())} tensors are not positive definite "
                f"(first: {int(np.argmax(bad))})")

    def __len__(self):
        return len(self.values)

    def scaled(self, factor: float) -> "DiscreteMetricField":
        return DiscreteMetricField(self.values * factor)


# --------------------------------------------------------------------------
# pointwise measures

def metric_interpolate(tensors: Sequence, weights: Sequence[float]) -> MetricTensor:
    """Log-Euclidean weighted mean: exp(sum_i w_i log M_i)."""
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
        raise ValueError("weights must be nonnegative and sum to 1")
    m = np.array([_as6(t) for t in tensors])
    for row in m:
        if not is_spd(row):
            raise InvalidMetricError(f"tensor is not positive definite: {row}")
    lm = (w[:, None] * log_metric(m)).sum(axis=0)
    return MetricTensor.from_array(exp_metric(lm)[0])


def edge_length_metric(pa, pb, Ma, Mb) -> float:
    """Metric length of segment pa-pb with geometric interpolation of the end lengths."""
    coords = np.array([pa, pb], dtype=float)
    metric = np.array([_as6(Ma), _as6(Mb)])
    return float(K.edge_len(coords, metric, 0, 1))


def signed_tet_volume(p0, p1, p2, p3) -> float:
    coords = np.array([p0, p1, p2, p3], dtype=float)
    return float(K.vol6(coords, 0, 1, 2, 3)) / 6.0


def mean_ratio(points, tensors) -> float:
    """Mean ratio shape measure in [0, 1]; zero for degenerate or inverted tets."""
    coords = np.ascontiguousarray(np.asarray(points, dtype=float).reshape(4, 3))
    m = np.array([_as6(t) for t in tensors])
    return float(K.tet_quality(coords, log_metric(m), 0, 1, 2, 3))


# --------------------------------------------------------------------------
# complexity

def vertex_dual_volumes(mesh) -> np.ndarray:
    """Quarter of the attached tet volume for every vertex slot (0 for dead/isolated)."""
    tets = mesh.tet_array()
    vols = mesh.tet_volumes(tets)
    out = np.zeros(mesh.n_slots)
    np.add.at(out, tets.ravel(), np.repeat(vols / 4.0, 4))
    return out


def vertex_dual_volume(mesh, vertex: int) -> float:
    total = 0.0
    for t in mesh.vtets[vertex]:
        total += mesh.tet_volume(t)
    return total / 4.0


def _field_values(mesh, field) -> np.ndarray:
    if isinstance(field, AnalyticMetricField):
        return field.evaluate(mesh.coords[:mesh.n_slots])
    values = field.values if isinstance(field, DiscreteMetricField) else np.asarray(field)
    if len(values) != mesh.n_slots:
        raise AlignmentError(f"field has {len(values)} tensors, mesh has {mesh.n_slots} vertices")
    return values


def discrete_complexity(mesh, field) -> float:
    values = _field_values(mesh, field)
    alive = mesh.vertex_alive_mask()
    dets = np.linalg.det(six_to_matrix(values[alive]))
    return float(np.sum(np.sqrt(np.maximum(dets, 0.0)) * vertex_dual_volumes(mesh)[alive]))


def complexity_factor(current: float, target: float) -> float:
    """Tensor multiplier that moves complexity ``current`` to ``target``."""
    if not target > 0:
        raise ValueError("target complexity must be positive")
    if not current > 0:
        raise ValueError("current complexity must be positive")
    return (target / current) ** (2.0 / 3.0)


def scale_to_complexity(field, mesh, target: float):
    factor = complexity_factor(discrete_complexity(mesh, field), target)
    return field.scaled(factor)


__all__ = [
    "MetricTensor", "AnalyticMetricField", "UniformMetric", "Polar2Metric",
    "DiscreteMetricField", "InvalidMetricError", "AlignmentError",
    "eval_polar2", "metric_interpolate", "edge_length_metric", "signed_tet_volume",
    "mean_ratio", "vertex_dual_volume", "vertex_dual_volumes", "discrete_complexity",
    "scale_to_complexity", "complexity_factor", "log_metric", "exp_metric",
    "six_to_matrix", "matrix_to_six", "is_spd",
]
