"""Central-difference verification of analytic gradients."""
from __future__ import annotations

import numpy as np


class NumericError(ArithmeticError):
    pass


def gradient_check(f, params, h=1e-5):
    """Max over all parameter entries of |analytic - numeric| / max(1, |numeric|).

    ``f`` maps the ParameterSet to a scalar Tensor and must be deterministic.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError("step h must lie in [1e-6, 1e-4]")
    params.zero_grad()
    out = f(params)
    if not np.isfinite(out.data).all():
        raise NumericError("objective is not finite")
    out.backward()
    analytic = {k: t.grad.copy() for k, t in params.items()}
    worst = 0.0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = float(f(params).data)
            flat[i] = keep - h
            down = float(f(params).data)
            flat[i] = keep
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"objective not finite near {name}[{i}]")
            num = (up - down) / (2.0 * h)
            worst = max(worst, abs(ga[i] - num) / max(1.0, abs(num)))
    params.clear_grad()
    return worst
