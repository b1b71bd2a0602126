"""Non-learned machinery: step-size estimation, ISTA-GS, the analytic weight
problem and generalized-coherence diagnostics.

Shapes follow the lifted model: ``S_lift`` is ``2L x 2N``, estimates are
``2N x M``.  Batched right-hand sides ``(T, 2L, M)`` are accepted by
:func:`ista_gs`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from jadce.errors import (
    ConvergenceError,
    InfeasibleConstraintError,
    ParameterError,
    RankDeficiencyError,
)
from jadce.prox import group_soft_threshold, mcp_prox

log = logging.getLogger(__name__)


def spectral_norm_sq(S_lift: np.ndarray, tol: float = 1e-8, max_iters: int = 10000,
                     seed: int = 0) -> float:
    """Largest eigenvalue of ``S^T S`` by power iteration.

    Stops once the Rayleigh quotient changes by less than ``tol`` (relative)
    and the eigen-residual ``||A v - rho v||`` is below ``10 tol rho``; the
    returned value is the quotient inflated by that residual.
    """
    S = np.asarray(S_lift, dtype=float)
    if S.ndim != 2 or not np.any(S):
        raise ParameterError("spectral_norm_sq needs a nonzero 2-D matrix")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(S.shape[1])
    v /= np.linalg.norm(v)
    rho = 0.0
    for _ in range(max_iters):
        w = S.T @ (S @ v)
        rho_new = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            # v in the null space; restart from a fresh direction
            v = rng.standard_normal(S.shape[1])
            v /= np.linalg.norm(v)
            continue
        resid = float(np.linalg.norm(w - rho_new * v))
        v = w / nw
        if abs(rho_new - rho) <= tol * abs(rho_new) and resid <= 10 * tol * rho_new:
            # Krylov-Weinstein: some eigenvalue lies within resid of rho_new
            return rho_new + resid
        rho = rho_new
    raise ConvergenceError(f"power iteration did not converge in {max_iters} steps", rho)


@dataclass
class IstaConfig:
    lam: float
    max_iters: int = 500
    step: float | None = None  # None -> 1/D
    shrinkage: str = "group"   # "group" (l2,1) or "elementwise" (l1)

    def __post_init__(self):
        if self.lam < 0:
            raise ParameterError(f"lambda must be >= 0, got {self.lam}")
        if self.max_iters < 0:
            raise ParameterError("max_iters must be >= 0")
        if self.shrinkage not in ("group", "elementwise"):
            raise ParameterError(f"unknown shrinkage {self.shrinkage!r}")


@dataclass
class SolverTrajectory:
    """Iterates of a classical solver; ``estimates[k]`` is ``X^(k * stride)``."""

    estimates: list
    objective: np.ndarray
    stride: int = 1
    step: float = 0.0

    @property
    def final(self) -> np.ndarray:
        return self.estimates[-1]


def group_objective(S_lift, Y_lift, X, lam: float, shrinkage: str = "group") -> float:
    R = Y_lift - np.matmul(S_lift, X)
    fit = 0.5 * float(np.sum(R * R))
    if shrinkage == "group":
        pen = float(np.sum(np.sqrt(np.sum(X * X, axis=-1))))
    else:
        pen = float(np.sum(np.abs(X)))
    return fit + lam * pen


def ista_gs(S_lift, Y_lift, cfg: IstaConfig, D: float | None = None,
            store_limit: int = 64, stride: int | None = None) -> SolverTrajectory:
    """ISTA with row-wise (group) or elementwise soft thresholding, from ``X^0 = 0``.

    ``Y_lift`` may be ``(2L, M)`` or a batch ``(T, 2L, M)``; a batch is solved
    as independent problems and the objective is summed over the batch.
    Iterates are stored every ``stride`` steps (all of them when
    ``max_iters <= store_limit``); the final iterate is always kept.
    """
    S = np.asarray(S_lift, dtype=float)
    Y = np.asarray(Y_lift, dtype=float)
    if Y.shape[-2] != S.shape[0]:
        raise ParameterError(f"Y has {Y.shape[-2]} rows, S has {S.shape[0]}")
    if cfg.step is None:
        if D is None:
            D = spectral_norm_sq(S)
        step = 1.0 / D
    else:
        step = float(cfg.step)
    if step <= 0:
        raise ParameterError("step must be positive")
    if stride is None:
        stride = 1 if cfg.max_iters <= store_limit else int(np.ceil(cfg.max_iters / store_limit))
    thr = cfg.lam * step
    if cfg.shrinkage == "group":
        shrink = lambda U: group_soft_threshold(U, thr)  # noqa: E731
    else:
        shrink = lambda U: mcp_prox(U, thr, 0.0)  # noqa: E731

    X = np.zeros(Y.shape[:-2] + (S.shape[1], Y.shape[-1]))
    StY = np.matmul(S.T, Y)
    StS = S.T @ S
    estimates = [X]
    objective = [group_objective(S, Y, X, cfg.lam, cfg.shrinkage)]
    for k in range(1, cfg.max_iters + 1):
        X = shrink(X + step * (StY - np.matmul(StS, X)))
        objective.append(group_objective(S, Y, X, cfg.lam, cfg.shrinkage))
        if k % stride == 0 or k == cfg.max_iters:
            estimates.append(X)
    return SolverTrajectory(estimates, np.array(objective), stride, step)


def row_inf_norm(S_lift, Y_lift) -> float:
    """``||S^T Y||_{inf,row}``: largest row l2 norm, averaged over a batch."""
    G = np.matmul(np.asarray(S_lift).T, np.asarray(Y_lift))
    return float(np.mean(np.max(np.sqrt(np.sum(G * G, axis=-1)), axis=-1)))


def select_lambda(S_lift, Y_val, X_val, iters: int, grid=(0.01, 0.05, 0.1, 0.5),
                  D: float | None = None, shrinkage: str = "group") -> float:
    """Pick ``lambda = c * ||S^T Y||_{inf,row}`` with ``c`` from ``grid`` by validation NMSE
    after ``iters`` ISTA iterations."""
    if D is None:
        D = spectral_norm_sq(S_lift)
    base = row_inf_norm(S_lift, Y_val)
    ref = float(np.sum(X_val * X_val))
    best, best_err = None, np.inf
    for c in grid:
        lam = c * base
        traj = ista_gs(S_lift, Y_val, IstaConfig(lam, iters, shrinkage=shrinkage), D=D,
                       stride=max(iters, 1))
        err = float(np.sum((traj.final - X_val) ** 2)) / ref
        if err < best_err:
            best, best_err = lam, err
    return best


def _check_columns(S):
    col = np.linalg.norm(S, axis=0)
    if np.any(col == 0):
        raise InfeasibleConstraintError(
            f"columns {np.flatnonzero(col == 0).tolist()} of S are zero; B_i S_i = 1 is infeasible")
    return col


def _project_unit_diag(B, S, col_sq):
    """Per-row projection of B onto {b : b^T s_i = 1}."""
    d = np.einsum("ij,ji->i", B, S)
    return B + ((1.0 - d) / col_sq)[:, None] * S.T


def analytic_weight_pgd(S_lift, steps: int = 2000, lr: float | None = None,
                        B0: np.ndarray | None = None) -> np.ndarray:
    """Projected gradient descent on ``min ||B S||_F^2  s.t.  B_i,: S_:,i = 1``.

    Gradient step ``B <- B - lr * 2 B S S^T`` followed by the affine projection
    of every row.  The default step ``1 / (2 ||S S^T||_2)`` is the reciprocal
    Lipschitz constant of the gradient.
    """
    S = np.asarray(S_lift, dtype=float)
    col = _check_columns(S)
    col_sq = col * col
    G = S @ S.T
    if lr is None:
        lr = 1.0 / (2.0 * spectral_norm_sq(S))
    B = S.T / col_sq[:, None] if B0 is None else np.array(B0, dtype=float)
    B = _project_unit_diag(B, S, col_sq)
    for _ in range(steps):
        B = _project_unit_diag(B - lr * 2.0 * (B @ G), S, col_sq)
    return B


def analytic_weight_closed_form(S_lift, cond_limit: float = 1e12) -> np.ndarray:
    """Row-wise Lagrangian solution ``b_i = G^{-1} s_i / (s_i^T G^{-1} s_i)``, ``G = S S^T``."""
    S = np.asarray(S_lift, dtype=float)
    _check_columns(S)
    G = S @ S.T
    c = np.linalg.cond(G)
    if not np.isfinite(c) or c > cond_limit:
        raise RankDeficiencyError(f"S S^T is singular to working precision (cond = {c:.3g})")
    V = np.linalg.solve(G, S)  # columns G^{-1} s_i
    denom = np.einsum("ij,ij->j", S, V)
    B = (V / denom).T
    # one refinement pass pins the constraint to rounding level
    d = np.einsum("ij,ji->i", B, S)
    return B / d[:, None]


def weight_objective(B, S_lift) -> float:
    P = B @ S_lift
    return float(np.sum(P * P))


@dataclass
class CoherenceReport:
    phi_hat: float
    diag_max_dev: float
    mu_B: float
    extra: dict = field(default_factory=dict)


def coherence_report(B, S_lift) -> CoherenceReport:
    """Generalized coherence of ``B S``: off-diagonal max, diagonal deviation from 1, ``||B||_{2,1}``."""
    B = np.asarray(B, dtype=float)
    S = np.asarray(S_lift, dtype=float)
    if B.shape[1] != S.shape[0]:
        raise ParameterError(f"B {B.shape} and S {S.shape} do not compose")
    P = B @ S
    n = min(P.shape)
    diag = np.diagonal(P)[:n].copy()
    off = np.abs(P)
    off[np.arange(n), np.arange(n)] = 0.0
    mu_B = float(np.sum(np.linalg.norm(B, axis=1)))
    return CoherenceReport(float(off.max()) if off.size else 0.0,
                           float(np.max(np.abs(diag - 1.0))) if n else 0.0, mu_B)
