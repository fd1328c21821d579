"""Reference large-deflection solutions for a tip-loaded cantilever.

A plane beam clamped at ``s = 0`` carries a dead transverse force ``P`` at
its free end. With ``theta(s)`` the cross-section rotation the moment
balance reads ``EI theta'' = -P x'(s)`` with ``theta(0) = 0`` and
``theta'(L) = 0``. The extensible, shear-deformable variant lets
``x' = (1 + N/EA) cos(theta) - (Q/GA) sin(theta)`` with axial force
``N = P sin(theta)`` and shear force ``Q = P cos(theta)``; the inextensible
elastica drops both corrections. The two-point problem is solved by
shooting on the root curvature.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq


@dataclass(frozen=True)
class BeamSection:
    E: float
    nu: float
    length: float
    depth: float
    thickness: float = 1.0
    shear_factor: float = 5.0 / 6.0

    @property
    def EI(self):
        return self.E * self.thickness * self.depth ** 3 / 12.0

    @property
    def EA(self):
        return self.E * self.thickness * self.depth

    @property
    def GA(self):
        return self.shear_factor * self.E / (2.0 * (1.0 + self.nu)) * self.thickness * self.depth


def _rhs(P, sec: BeamSection, extensible):
    EI, EA, GA = sec.EI, sec.EA, sec.GA

    def f(s, y):
        th, k = y[0], y[1]
        c, sn = np.cos(th), np.sin(th)
        if extensible:
            eps, gam = P * sn / EA, P * c / GA
            xp = (1 + eps) * c - gam * sn
            yp = (1 + eps) * sn + gam * c
        else:
            xp, yp = c, sn
        return [k, -P * xp / EI, xp, yp]
    return f


def _shoot(P, sec, extensible, k0, rtol):
    return solve_ivp(_rhs(P, sec, extensible), (0.0, sec.length), [0.0, k0, 0.0, 0.0],
                     rtol=rtol, atol=1e-12 * sec.length)


def cantilever_tip(P, sec: BeamSection, extensible=True, rtol=1e-10):
    """Tip shortening ``u`` and deflection ``v`` (both positive) under force ``P``.

    The end moment is negative for a vanishing root curvature and positive
    beyond ``P L (1 + P / EA) / EI``, which brackets the unique root.
    """
    if P == 0:
        return 0.0, 0.0
    end_moment = lambda k0: _shoot(P, sec, extensible, k0, rtol).y[1, -1]
    hi = 1.05 * P * sec.length * (1.0 + P / sec.EA) / sec.EI
    k0 = brentq(end_moment, 0.0, hi, xtol=1e-14 * hi)
    y = _shoot(P, sec, extensible, k0, rtol).y[:, -1]
    return sec.length - y[2], y[3]


def load_deflection_curve(P_max, sec: BeamSection, fractions, extensible=True):
    """Rows ``(f / f_max, u / L, v / L)`` for each load fraction."""
    rows = []
    for fr in fractions:
        u, v = cantilever_tip(fr * P_max, sec, extensible)
        rows.append((float(fr), u / sec.length, v / sec.length))
    return np.array(rows)
