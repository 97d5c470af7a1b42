"""Adaptive embedded Runge-Kutta stepping for batches of scalar initial
value problems.

The radial flows integrated here are one scalar equation per point (the
fields preserve slices and radial rays), so the state is a vector of
independent scalars advanced with per-element step sizes and acceptance.
Cash-Karp 4(5) coefficients.
"""

from __future__ import annotations

import numpy as np

from .errors import IntegrationError, ValidationError

__all__ = ["time_one_map"]

_A = [
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (3 / 10, -9 / 10, 6 / 5),
    (-11 / 54, 5 / 2, -70 / 27, 35 / 27),
    (1631 / 55296, 175 / 512, 575 / 13824, 44275 / 110592, 253 / 4096),
]
_B5 = (37 / 378, 0.0, 250 / 621, 125 / 594, 0.0, 512 / 1771)
_B4 = (2825 / 27648, 0.0, 18575 / 48384, 13525 / 55296, 277 / 14336, 1 / 4)

MIN_STEP = 1e-14


def time_one_map(rhs, y0, tol, t_final=1.0):
    """Integrate dy/dt = rhs(y) from t = 0 to t_final for a batch of
    independent scalars, to local error tolerance ``tol`` per unit scale.

    ``rhs`` must accept and return an array of shape (N,).  Raises
    IntegrationError when the required step size underflows.
    """
    if not (1e-10 <= tol <= 1e-4):
        raise ValidationError("tolerance must lie in [1e-10, 1e-4]")
    y = np.array(y0, dtype=float)
    t = np.zeros_like(y)
    h = np.full_like(y, t_final * 0.1)
    active = np.ones(y.shape, dtype=bool)
    for _ in range(100000):
        if not active.any():
            return y
        h[active] = np.minimum(h[active], t_final - t[active])
        k = []
        for stage in range(6):
            ys = y.copy()
            for coeff, kj in zip(_A[stage], k):
                ys = ys + h * coeff * kj
            k.append(np.where(active, rhs(ys), 0.0))
        y5 = y.copy()
        y4 = y.copy()
        for b5, b4, kj in zip(_B5, _B4, k):
            y5 = y5 + h * b5 * kj
            y4 = y4 + h * b4 * kj
        scale = np.maximum(np.abs(y), 1e-30)
        err = np.abs(y5 - y4) / (tol * scale)
        accept = active & (err <= 1.0)
        y = np.where(accept, y5, y)
        t = np.where(accept, t + h, t)
        done = accept & (t >= t_final * (1.0 - 1e-15))
        active = active & ~done
        with np.errstate(divide="ignore"):
            factor = np.where(err > 0.0, 0.9 * err**-0.2, 5.0)
        h = h * np.clip(factor, 0.2, 5.0)
        if np.any(active & (h < MIN_STEP)):
            raise IntegrationError("step size underflow in the radial flow")
    raise IntegrationError("step budget exhausted in the radial flow")
