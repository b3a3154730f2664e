"""Robust kernels applied to squared residuals.

Both kernels accept scalars or arrays. `cost` is the kernelized cost
rho(r^2); `weight` is the IRLS multiplier such that weight * J^T J and
weight * J^T r assemble the Gauss-Newton system of the robust cost.
"""

from dataclasses import dataclass

import numpy as np


@dataclass
class KernelEval:
    cost: np.ndarray
    weight: np.ndarray


def huber(r_sq, delta) -> KernelEval:
    """Huber kernel on a squared residual, quadratic up to |r| = delta.

    cost = r^2 inside, 2*delta*|r| - delta^2 outside (C1-continuous);
    weight = 1 inside, delta/|r| outside.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    r_sq = np.asarray(r_sq, dtype=float)
    if np.any(r_sq < 0):
        raise ValueError("squared residual must be non-negative")
    r = np.sqrt(r_sq)
    outside = r > delta
    cost = np.where(outside, 2.0 * delta * r - delta * delta, r_sq)
    with np.errstate(divide="ignore", invalid="ignore"):
        weight = np.where(outside, delta / np.where(r > 0, r, 1.0), 1.0)
    return KernelEval(cost=cost[()], weight=weight[()])


def tls(r_sq, tau) -> KernelEval:
    """Truncated least squares: beyond |r| = tau the cost saturates at tau^2
    and the weight drops to zero, removing the residual's influence entirely.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    r_sq = np.asarray(r_sq, dtype=float)
    if np.any(r_sq < 0):
        raise ValueError("squared residual must be non-negative")
    truncated = r_sq > tau * tau
    cost = np.where(truncated, tau * tau, r_sq)
    weight = np.where(truncated, 0.0, 1.0)
    return KernelEval(cost=cost[()], weight=weight[()])
