"""Objectives and constraints evaluated on converged solves.

Each function returning a value also has a companion that yields the
terminal cotangent needed by the adjoint sweep or the direct design
gradient.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateDesignError


@dataclass
class ObjectiveSpec:
    kind: str
    f_in: np.ndarray
    f_out: np.ndarray = None

    def __post_init__(self):
        if self.kind not in ("compliance", "mechanism"):
            raise ConfigError("objective.kind", f"unknown objective {self.kind!r}")
        self.f_in = np.asarray(self.f_in, dtype=float)
        if self.kind == "mechanism":
            if self.f_out is None:
                raise ConfigError("objective.output", "mechanism objective needs an output port")
            self.f_out = np.asarray(self.f_out, dtype=float)
            if np.array_equal(np.any(self.f_in != 0, axis=1), np.any(self.f_out != 0, axis=1)):
                raise ConfigError("objective.output", "input and output ports must differ")


@dataclass
class ConstraintSpec:
    kind: str
    limit: float

    def __post_init__(self):
        if self.kind not in ("volume", "mass"):
            raise ConfigError("constraint.kind", f"unknown constraint {self.kind!r}")
        if not self.limit > 0:
            raise ConfigError("constraint.limit", "limit must be positive")


def _displacement(record):
    return record.final.x - record.initial.x


def compliance(record, f_ext):
    """Work of the point loads on the converged particle displacements."""
    return float(np.sum(np.asarray(f_ext) * _displacement(record)))


def compliance_seed(record, f_ext):
    return np.asarray(f_ext, dtype=float).copy()


def _mechanism_terms(record_u, record_v, spec):
    a = float(np.sum(spec.f_in * _displacement(record_v)))
    b = float(np.sum(spec.f_in * _displacement(record_u)))
    c = float(np.sum(spec.f_out * _displacement(record_v)))
    return a, b, c


def mechanism_objective(record_u, record_v, spec: ObjectiveSpec, tol=1e-300):
    """``-(f_in . v*) / (f_in . u* + f_out . v*)``."""
    a, b, c = _mechanism_terms(record_u, record_v, spec)
    if abs(b + c) <= tol:
        raise DegenerateDesignError("mechanism objective denominator vanished")
    return -a / (b + c)


def mechanism_seeds(record_u, record_v, spec: ObjectiveSpec):
    """Terminal position cotangents of the input-load and pseudo-load solves."""
    a, b, c = _mechanism_terms(record_u, record_v, spec)
    s = b + c
    if s == 0:
        raise DegenerateDesignError("mechanism objective denominator vanished")
    seed_u = (a / s ** 2) * spec.f_in
    seed_v = -spec.f_in / s + (a / s ** 2) * spec.f_out
    return seed_u, seed_v


def volume_constraint(gamma, V0, V_star):
    return float(np.dot(V0, gamma) / V_star - 1.0)


def volume_constraint_grad(V0, V_star):
    return np.asarray(V0, dtype=float) / V_star


def mass_constraint(rho, V0, M_star):
    """``sum V0 rho / M* - 1`` with the interpolated particle densities."""
    return float(np.dot(V0, rho) / M_star - 1.0)


def mass_constraint_grad_rho(V0, M_star):
    return np.asarray(V0, dtype=float) / M_star


def log_barrier(g, tau):
    """Relaxed log barrier: ``-log(-g) / tau`` extended linearly past ``-1/tau^2``."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    if g <= -1.0 / tau ** 2:
        return -np.log(-g) / tau
    return tau * g - np.log(1.0 / tau ** 2) / tau + 1.0 / tau


def log_barrier_grad(g, tau):
    if g <= -1.0 / tau ** 2:
        return -1.0 / (tau * g)
    return tau


def log_barrier_aggregate(J, g, tau):
    return J + log_barrier(g, tau)
