"""Sixth-order central finite-difference stencils shared by residual checks."""

import numpy as np

_C1 = np.array([-1.0, 9.0, -45.0, 0.0, 45.0, -9.0, 1.0]) / 60.0
_C2 = np.array([2.0, -27.0, 270.0, -490.0, 270.0, -27.0, 2.0]) / 180.0


def d1(f, h):
    """First derivative; ``f(k)`` evaluates the function at offset ``k h``."""
    return sum(c * f(k) for k, c in zip(range(-3, 4), _C1) if c) / h


def d2(f, f0, h):
    """Second derivative; ``f0`` is the centre value."""
    return sum(c * (f0 if k == 0 else f(k)) for k, c in zip(range(-3, 4), _C2)) / (h * h)
