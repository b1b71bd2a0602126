"""Recovery metrics and empirical probes of the support/convergence guarantees.

Batched estimates are ``(T, 2N, M)`` arrays; single estimates ``(2N, M)``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from jadce.errors import InsufficientDataError, ParameterError, UndefinedMetricError
from jadce.nets import NetworkParams, Trajectory, forward
from jadce.solvers import SolverTrajectory, coherence_report

ZERO_ROW_TOL = 1e-12
NMSE_FLOOR_DB = -300.0
CSV_SCHEMA = 1
CSV_COLUMNS = ("variant", "snr_db", "L", "N", "M", "kappa", "seed", "layer",
               "nmse_db", "error_rate", "support_ok", "miss", "false_alarm")


def _batch(X):
    X = np.asarray(X, dtype=float)
    return X[None] if X.ndim == 2 else X


def nmse_db(X_hat, X_star) -> float:
    """``10 log10(E||X_hat - X*||_F^2 / E||X*||_F^2)`` with batch means as expectations.

    Exact recovery returns ``-300`` dB instead of ``-inf``.
    """
    X_hat, X_star = _batch(X_hat), _batch(X_star)
    if X_hat.shape != X_star.shape:
        raise ParameterError(f"shape mismatch {X_hat.shape} vs {X_star.shape}")
    ref = float(np.sum(X_star * X_star))
    if ref == 0.0:
        raise UndefinedMetricError("NMSE is undefined for an all-zero ground-truth batch")
    err = float(np.sum((X_hat - X_star) ** 2))
    if err == 0.0:
        return NMSE_FLOOR_DB
    return max(10.0 * math.log10(err / ref), NMSE_FLOOR_DB)


def psi(X) -> np.ndarray:
    """Row l2 norms of the lifted estimate (last axis reduced)."""
    X = np.asarray(X, dtype=float)
    return np.sqrt(np.sum(X * X, axis=-1))


def error_rate(X_hat, X_star) -> float:
    """``1/(2VN) sum_i ||psi(X_hat_i) - psi(X*_i)||_1`` over ``V`` samples of ``2N`` rows."""
    X_hat, X_star = _batch(X_hat), _batch(X_star)
    if X_hat.shape != X_star.shape:
        raise ParameterError(f"shape mismatch {X_hat.shape} vs {X_star.shape}")
    V, two_n = X_hat.shape[:2]
    return float(np.sum(np.abs(psi(X_hat) - psi(X_star)))) / (V * two_n)


def device_norms(X_lift) -> np.ndarray:
    """Per-device norm combining lifted rows ``n`` and ``n + N``."""
    X = np.asarray(X_lift, dtype=float)
    n = X.shape[-2] // 2
    sq = np.sum(X * X, axis=-1)
    return np.sqrt(sq[..., :n] + sq[..., n:])


def detect_activity(X_lift, tau: float) -> np.ndarray:
    """Device ``n`` is declared active iff its combined row norm exceeds ``tau``."""
    if tau < 0:
        raise ParameterError(f"tau must be >= 0, got {tau}")
    return (device_norms(X_lift) > tau).astype(np.int8)


def default_tau(X_star_batch) -> float:
    """``0.1 sqrt(M) * median`` nonzero combined-row norm of the ground truth."""
    X = _batch(X_star_batch)
    norms = device_norms(X).ravel()
    nz = norms[norms > 0]
    if nz.size == 0:
        return 0.0
    return 0.1 * math.sqrt(X.shape[-1]) * float(np.median(nz))


def _estimates(traj):
    if isinstance(traj, Trajectory):
        return traj.estimates
    if isinstance(traj, SolverTrajectory):
        return traj.estimates
    return list(traj)


def check_support_containment(traj, X_star, tol: float = ZERO_ROW_TOL) -> list[bool]:
    """Per-layer flag: every row with norm above ``tol`` is a nonzero row of ``X*``.

    Batched input is reduced with "all samples".
    """
    truth = psi(_batch(X_star)) > 0
    flags = []
    for X in _estimates(traj):
        live = psi(_batch(X)) > tol
        flags.append(bool(not np.any(live & ~truth)))
    return flags


def fit_linear_rate(nmse_curve, noise_floor_db: float | None = None, min_points: int = 4):
    """Least-squares slope of NMSE (dB) against layer, above the noise floor.

    Only layers with ``NMSE >= floor + 3 dB`` enter the fit; the floor
    defaults to the final-layer NMSE.  Returns ``(c1, r_squared)`` with
    ``c1 = -slope ln(10) / 20`` the exponential rate of ``||X^k - X*||_F``.
    """
    y = np.asarray(nmse_curve, dtype=float)
    if noise_floor_db is None:
        noise_floor_db = float(y[-1])
    k = np.arange(y.size)
    mask = y >= noise_floor_db + 3.0
    if mask.sum() < min_points:
        raise InsufficientDataError(
            f"only {int(mask.sum())} layers above the {noise_floor_db:.2f} dB floor + 3 dB; need {min_points}")
    kk, yy = k[mask], y[mask]
    slope, intercept = np.polyfit(kk, yy, 1)
    resid = yy - (slope * kk + intercept)
    ss_tot = float(np.sum((yy - yy.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - float(np.sum(resid * resid)) / ss_tot
    return -slope * math.log(10.0) / 20.0, r2


@dataclass
class TheoremProbe:
    """Constants of the support and linear-rate guarantees measured on a batch.

    ``rate_condition`` is ``phi s sqrt(M) + phi s - phi``; the linear-rate
    bound is only guaranteed when it is below 1, which typically fails at
    realistic sizes, so it is reported rather than asserted.
    """

    mu_x: float
    s: int
    epsilon: float
    mu_B: float
    phi_hat: float
    c1_fit: float = 0.0
    c2_fit: float = 0.0
    rate_condition: float = math.nan

    def __post_init__(self):
        for name in ("mu_x", "epsilon", "mu_B", "phi_hat", "c1_fit", "c2_fit"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0")
        if self.s < 0:
            raise ParameterError("s must be >= 0")


def theorem_constants(X_star, Z_lift, B, S_lift) -> TheoremProbe:
    """Batch constants: ``mu_x`` (max row norm), ``s`` (max support), ``epsilon``
    (max noise norm), plus ``mu_B`` and ``phi_hat`` of ``B`` against ``S``."""
    X = _batch(X_star)
    Z = _batch(Z_lift)
    rows = psi(X)
    rep = coherence_report(B, S_lift)
    s = int(np.max(np.sum(rows > 0, axis=-1)))
    phi, M = rep.phi_hat, X.shape[-1]
    return TheoremProbe(mu_x=float(rows.max()), s=s,
                        epsilon=float(np.max(np.sqrt(np.sum(Z * Z, axis=(-2, -1))))),
                        mu_B=rep.mu_B, phi_hat=phi,
                        rate_condition=phi * s * math.sqrt(M) + phi * s - phi)


def l21_err(X, X_star) -> np.ndarray:
    """``||X - X*||_{2,1}`` per sample."""
    return np.sum(psi(_batch(X) - _batch(X_star)), axis=-1)


def theorem1_probe(S_lift, B, Y_lift, X_star, Z_lift, K: int, alpha: float = 1.0,
                   eta_fraction: float = 0.5):
    """Run the coupled network with ``B^k = B`` and the worst-case thresholds

        theta_k = (phi_hat * max_batch ||X^k - X*||_{2,1} + mu_B * epsilon) / alpha

    chosen layer by layer.  ``eta_k`` is ``eta_fraction / (2 theta_k)``.
    Returns ``(trajectory, thetas, containment_flags, probe)``.
    """
    probe = theorem_constants(X_star, Z_lift, B, S_lift)
    layers = []
    thetas = []
    X_k = np.zeros_like(_batch(X_star))
    for _ in range(K):
        sup_err = float(np.max(l21_err(X_k, X_star)))
        theta = (probe.phi_hat * sup_err + probe.mu_B * probe.epsilon) / alpha
        eta = eta_fraction / (2.0 * theta) if theta > 0 else 0.0
        layers.append({"B": np.asarray(B, dtype=float), "theta": theta, "eta": eta})
        thetas.append(theta)
        traj = forward(NetworkParams("lpomcp_gs", layers), Y_lift, S_lift)
        X_k = _batch(traj.final)
    if not layers:
        raise ParameterError("K must be >= 1")
    return traj, thetas, check_support_containment(traj, X_star), probe


def fit_theorem2(errors_fro, probe: TheoremProbe, c1: float) -> float:
    """Smallest ``c2`` with ``err_k <= s mu_x exp(-c1 k) + epsilon c2`` for all ``k``."""
    if probe.epsilon == 0.0:
        return 0.0
    k = np.arange(len(errors_fro))
    gap = np.asarray(errors_fro) - probe.s * probe.mu_x * np.exp(-c1 * k)
    return float(max(0.0, gap.max()) / probe.epsilon)


@dataclass
class MetricsRecord:
    """Per-layer metrics for one method in one experiment cell."""

    variant: str
    cell: dict
    nmse_db: list
    error_rate: list
    support_ok: list
    miss: list
    false_alarm: list

    def __post_init__(self):
        n = len(self.nmse_db)
        for name in ("error_rate", "support_ok", "miss", "false_alarm"):
            if len(getattr(self, name)) != n:
                raise ParameterError(f"{name} has {len(getattr(self, name))} entries, expected {n}")

    @property
    def K(self) -> int:
        return len(self.nmse_db) - 1

    def rows(self):
        c = self.cell
        for k in range(len(self.nmse_db)):
            yield {
                "variant": self.variant, "snr_db": c.get("snr_db"), "L": c.get("L"),
                "N": c.get("N"), "M": c.get("M"), "kappa": c.get("kappa"), "seed": c.get("seed"),
                "layer": k, "nmse_db": self.nmse_db[k], "error_rate": self.error_rate[k],
                "support_ok": int(self.support_ok[k]), "miss": self.miss[k],
                "false_alarm": self.false_alarm[k],
            }

    def summary(self) -> dict:
        out = {"variant": self.variant, **self.cell, "K": self.K,
               "final_nmse_db": self.nmse_db[-1], "final_error_rate": self.error_rate[-1]}
        try:
            c1, r2 = fit_linear_rate(self.nmse_db)
            out.update(c1_fit=c1, r_squared=r2)
        except InsufficientDataError:
            out.update(c1_fit=None, r_squared=None)
        return out


def evaluate_estimates(variant: str, estimates, X_star, activity, tau: float,
                       cell: dict) -> MetricsRecord:
    """Metrics for every layer of a trajectory (list of batched estimates)."""
    X_star = _batch(X_star)
    truth = np.asarray(activity).astype(bool)
    nm, er, ok, miss, fa = [], [], [], [], []
    for X in estimates:
        X = _batch(X)
        nm.append(nmse_db(X, X_star))
        er.append(error_rate(X, X_star))
        ok.append(check_support_containment([X], X_star)[0])
        det = detect_activity(X, tau).astype(bool)
        miss.append(int(np.sum(truth & ~det)))
        fa.append(int(np.sum(~truth & det)))
    return MetricsRecord(variant, dict(cell), nm, er, ok, miss, fa)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def records_to_csv(records, fh=None) -> str:
    """Serialize records with the fixed column set; floats as ``repr`` for exact round-trip."""
    buf = io.StringIO() if fh is None else fh
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for rec in records:
        for row in rec.rows():
            w.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    return buf.getvalue() if fh is None else ""
