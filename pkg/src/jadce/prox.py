"""MCP sparseness measure, its proximal activation, and the group soft threshold.

The MCP activation is applied elementwise to the lifted real matrix:

    P(u) = 0                                  |u| <= theta
         = (u - theta*sign(u)) / (1 - 2*theta*eta)   theta < |u| <= 1/(2*eta)
         = u                                  |u| > 1/(2*eta)

which is well defined and continuous only while ``2*theta*eta < 1``.
``eta = 0`` is admitted and reduces to plain soft thresholding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from jadce.errors import ParameterError

# slope of g_eta at the origin: lim_{z->0+} g_eta(z)/z
MCP_ALPHA = 1.0


@dataclass(frozen=True)
class McpParams:
    theta: float
    eta: float

    def __post_init__(self):
        check_mcp(self.theta, self.eta)


def check_mcp(theta: float, eta: float) -> None:
    if not (np.isfinite(theta) and np.isfinite(eta)):
        raise ParameterError(f"non-finite MCP parameters theta={theta}, eta={eta}")
    if theta < 0 or eta < 0:
        raise ParameterError(f"MCP parameters must be >= 0, got theta={theta}, eta={eta}")
    if 2.0 * theta * eta >= 1.0:
        raise ParameterError(
            f"eta={eta} violates eta < 1/(2 theta) = {0.5 / theta if theta else np.inf}")


def mcp_penalty(x, eta: float):
    """MCP sparseness measure ``g_eta``: ``|x| - eta x^2`` up to ``1/(2 eta)``, then ``1/(4 eta)``."""
    if not eta > 0:
        raise ParameterError(f"mcp_penalty needs eta > 0, got {eta}")
    return _mcp_value(x, eta)


def _mcp_value(x, eta):
    a = np.abs(np.asarray(x, dtype=float))
    if eta == 0:
        return a
    return np.where(a <= 0.5 / eta, a - eta * a * a, 0.25 / eta)


def mcp_prox(U, theta: float, eta: float):
    """Closed-form proximal operator of ``theta * g_eta``, elementwise."""
    check_mcp(theta, eta)
    U = np.asarray(U, dtype=float)
    a = np.abs(U)
    scale = 1.0 / (1.0 - 2.0 * theta * eta)
    hi = 0.5 / eta if eta > 0 else np.inf
    shrunk = (U - theta * np.sign(U)) * scale
    return np.where(a <= theta, 0.0, np.where(a <= hi, shrunk, U))


def mcp_prox_backward(U, theta: float, eta: float, G):
    """Vector-Jacobian products of :func:`mcp_prox` for upstream gradient ``G``.

    Returns ``(dU, dtheta, deta)``.  At ``|u| = theta`` the dead-zone branch is
    used (zero derivative); at ``|u| = 1/(2 eta)`` the pass-through branch.
    """
    U = np.asarray(U, dtype=float)
    a = np.abs(U)
    c = 1.0 - 2.0 * theta * eta
    scale = 1.0 / c
    hi = 0.5 / eta if eta > 0 else np.inf
    mid = (a > theta) & (a < hi)
    passthru = a >= hi
    dU = G * (mid * scale + passthru)
    s = np.sign(U)
    excess = U - theta * s
    Gm = np.where(mid, G, 0.0)
    dtheta = float(np.sum(Gm * (-s * scale + 2.0 * eta * excess * scale * scale)))
    deta = float(np.sum(Gm * (2.0 * theta * excess * scale * scale)))
    return dU, dtheta, deta


def prox_oracle(u: float, theta: float, eta: float, grid_halfwidth: float | None = None,
                grid_step: float | None = None) -> float:
    """Brute-force grid minimiser of ``theta * g_eta(x) + (x - u)^2 / 2``.

    The default grid is centred on ``u``, has step ``1e-4 * max(1, |u|)`` and
    reaches past the origin.  Independent of :func:`mcp_prox`; used to test it.
    """
    u = float(u)
    if grid_step is None:
        grid_step = 1e-4 * max(1.0, abs(u))
    if grid_halfwidth is None:
        grid_halfwidth = abs(u) + 2 * grid_step
    n = int(np.ceil(grid_halfwidth / grid_step))
    x = u + grid_step * np.arange(-n, n + 1)
    obj = theta * _mcp_value(x, eta) + 0.5 * (x - u) ** 2
    return float(x[np.argmin(obj)])


def _row_norms(X):
    return np.sqrt(np.sum(X * X, axis=-1, keepdims=True))


def group_soft_threshold(X, theta: float):
    """Row-wise l2 shrinkage: ``max(0, 1 - theta/||x_n||) * x_n`` along the last axis."""
    if theta < 0:
        raise ParameterError(f"theta must be >= 0, got {theta}")
    X = np.asarray(X, dtype=float)
    nrm = _row_norms(X)
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = np.where(nrm > theta, 1.0 - theta / nrm, 0.0)
    return factor * X


def group_soft_threshold_backward(U, theta: float, G):
    """VJP of :func:`group_soft_threshold`; returns ``(dU, dtheta)``.

    Rows with ``||u|| <= theta`` are in the dead zone and receive zero gradient.
    """
    U = np.asarray(U, dtype=float)
    nrm = _row_norms(U)
    live = nrm > theta
    safe = np.where(live, nrm, 1.0)
    inner = np.sum(U * G, axis=-1, keepdims=True)
    dU = np.where(live, G - theta * (G / safe - U * inner / safe**3), 0.0)
    dtheta = -float(np.sum(np.where(live, inner / safe, 0.0)))
    return dU, dtheta
