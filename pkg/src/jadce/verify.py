"""Release-gate checks: oracle agreements and invariants, each timed.

Every check returns a :class:`CheckResult`; :func:`run_all` collects them and
:func:`format_report` renders one line per check.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from jadce.metrics import theorem1_probe
from jadce.model import SystemConfig, build_dataset, crandn, lift_real, make_rng, stack_lifted
from jadce.nets import LEAVES, MATRIX_LEAVES, VARIANTS, NetworkParams, forward, loss_and_grad
from jadce.prox import mcp_prox, prox_oracle
from jadce.solvers import (
    IstaConfig,
    analytic_weight_closed_form,
    analytic_weight_pgd,
    ista_gs,
    row_inf_norm,
    spectral_norm_sq,
    weight_objective,
)
from jadce.training import init_params


@dataclass
class CheckResult:
    name: str
    passed: bool
    seconds: float
    detail: str = ""
    stats: dict = field(default_factory=dict)


def _timed(name, fn, *args, **kwargs) -> CheckResult:
    t0 = time.perf_counter()
    passed, detail, stats = fn(*args, **kwargs)
    return CheckResult(name, bool(passed), time.perf_counter() - t0, detail, stats)


# -- prox ---------------------------------------------------------------------

def _prox_oracle(n_draws, seed, prox):
    rng = make_rng(seed, "extra", 101)
    worst = 0.0
    for _ in range(n_draws):
        theta = rng.uniform(0.01, 2.0)
        eta = rng.uniform(0.0, 0.9 / (2.0 * theta))
        u = rng.uniform(-3.0, 3.0) * max(theta, 1.0 / (2.0 * eta) if eta > 0 else theta)
        step = 1e-4 * max(1.0, abs(u))
        got = float(prox(np.array([u]), theta, eta)[0])
        ref = prox_oracle(u, theta, eta, grid_step=step)
        worst = max(worst, abs(got - ref) / step)
    return worst <= 2.0, f"worst deviation {worst:.3g} grid steps over {n_draws} draws", {"worst_steps": worst}


def check_prox_oracle(n_draws: int = 1000, seed: int = 0,
                      prox: Callable = mcp_prox) -> CheckResult:
    """Closed-form prox vs brute-force grid minimiser, within 2 grid steps."""
    return _timed("prox_oracle", _prox_oracle, n_draws, seed, prox)


# -- gradients ----------------------------------------------------------------

def small_instance(seed: int, L: int = 4, N: int = 6, M: int = 1, p: float = 0.5):
    """Random lifted ``(S, X*, Y)`` for gradient checks."""
    rng = make_rng(seed, "extra", 202)
    S = lift_real(crandn(rng, (L, N)) / np.sqrt(L), "operator")
    active = rng.random(N) < p
    active[rng.integers(N)] = True
    H = crandn(rng, (N, M)) * active[:, None]
    X = lift_real(H)
    Y = S @ X + 0.01 * rng.standard_normal((2 * L, M))
    return S, X, Y


def _perturbed_params(variant, S, Y, K, rng):
    lam0 = 0.1 * row_inf_norm(S, Y)
    p = init_params(variant, S, lam0, K, weight_solver="closed_form")
    for layer in p.layers:
        for name in MATRIX_LEAVES:
            if name in layer:
                A = layer[name]
                layer[name] = A + 0.2 * np.sqrt(np.mean(A * A)) * rng.standard_normal(A.shape)
        layer["theta"] *= rng.uniform(0.5, 1.5)
        if "eta" in layer:
            layer["eta"] = rng.uniform(0.1, 0.8) / (2.0 * layer["theta"])
        if "gamma" in layer:
            layer["gamma"] *= rng.uniform(0.5, 1.5)
    return p


def _kink_distance(params: NetworkParams, Y, S) -> float:
    traj = forward(params, Y, S)
    M = traj.token[1]
    dist = np.inf
    for layer, U in zip(params.layers, traj.U):
        th = layer["theta"]
        if params.uses_mcp:
            a = np.abs(U)
            dist = min(dist, float(np.min(np.abs(a - th))))
            if layer["eta"] > 0:
                dist = min(dist, float(np.min(np.abs(a - 0.5 / layer["eta"]))))
        else:
            rn = np.sqrt(np.sum(U.reshape(U.shape[0], -1, M) ** 2, axis=-1))
            dist = min(dist, float(np.min(np.abs(rn - th))))
    return dist


def _fd_leaf(params, k, name, Y, S, X, h):
    val = params.layers[k][name]
    if name in MATRIX_LEAVES:
        out = np.zeros_like(val)
        for idx in np.ndindex(val.shape):
            old = val[idx]
            val[idx] = old + h
            lp = loss_and_grad(params, Y, S, X)[0]
            val[idx] = old - h
            lm = loss_and_grad(params, Y, S, X)[0]
            val[idx] = old
            out[idx] = (lp - lm) / (2 * h)
        return out
    params.layers[k][name] = val + h
    lp = loss_and_grad(params, Y, S, X)[0]
    params.layers[k][name] = val - h
    lm = loss_and_grad(params, Y, S, X)[0]
    params.layers[k][name] = val
    return (lp - lm) / (2 * h)


def gradient_fd_errors(variant: str, seed: int, K: int = 2, h: float = 1e-5,
                       margin: float = 1e-3) -> dict:
    """Per-leaf relative error ``max|g - fd| / max|fd|`` on one random instance.

    Parameter draws are repeated until every pre-activation sits at least
    ``margin`` from a branch boundary of the activation.
    """
    S, X, Y = small_instance(seed)
    rng = make_rng(seed, "extra", 303)
    for _ in range(200):
        params = _perturbed_params(variant, S, Y, K, rng)
        if _kink_distance(params, Y, S) >= margin:
            break
    else:
        raise RuntimeError(f"no kink-free parameter draw for {variant} seed {seed}")
    _, grads = loss_and_grad(params, Y, S, X)
    errs = {}
    for k in range(K):
        for name in LEAVES[variant]:
            g = np.asarray(grads[k][name], dtype=float)
            fd = np.asarray(_fd_leaf(params, k, name, Y, S, X, h), dtype=float)
            scale = float(np.max(np.abs(fd)))
            diff = float(np.max(np.abs(g - fd)))
            errs[f"{k}/{name}"] = diff / scale if scale > 1e-9 else diff
    return errs


def _gradients(n_instances, seed):
    worst, where = 0.0, ""
    for i in range(n_instances):
        for v in VARIANTS:
            for leaf, e in gradient_fd_errors(v, seed + i).items():
                if e > worst:
                    worst, where = e, f"{v} instance {i} leaf {leaf}"
    return worst <= 1e-4, f"worst relative error {worst:.3g} ({where})", {"worst_rel": worst}


def check_gradients(n_instances: int = 20, seed: int = 0) -> CheckResult:
    return _timed("gradient_fd", _gradients, n_instances, seed)


# -- analytic weight -----------------------------------------------------------

def _analytic_weight(n_instances, seed, L, N, steps):
    worst_fro = worst_obj = worst_con = 0.0
    for i in range(n_instances):
        rng = make_rng(seed + i, "extra", 404)
        S = lift_real(crandn(rng, (L, N)) / np.sqrt(L), "operator")
        B_pgd = analytic_weight_pgd(S, steps=steps)
        B_cf = analytic_weight_closed_form(S)
        fro = np.linalg.norm(B_pgd - B_cf) / np.linalg.norm(B_cf)
        f_cf = weight_objective(B_cf, S)
        obj = abs(weight_objective(B_pgd, S) - f_cf) / f_cf
        con = float(np.max(np.abs(np.einsum("ij,ji->i", B_pgd, S) - 1.0)))
        worst_fro, worst_obj, worst_con = max(worst_fro, fro), max(worst_obj, obj), max(worst_con, con)
    ok = worst_fro <= 1e-4 and worst_obj <= 1e-5 and worst_con <= 1e-10
    return ok, (f"frobenius rel {worst_fro:.3g}, objective rel {worst_obj:.3g}, "
                f"constraint {worst_con:.3g}"), {"fro": worst_fro, "obj": worst_obj, "con": worst_con}


def check_analytic_weight(n_instances: int = 10, seed: int = 0, L: int = 20, N: int = 40,
                          steps: int = 2000) -> CheckResult:
    """PGD vs closed-form row-Lagrangian solution (``2L x 2N`` lifted sizes)."""
    return _timed("analytic_weight", _analytic_weight, n_instances, seed, L, N, steps)


# -- ISTA ---------------------------------------------------------------------

def _ista(n_instances, seed, iters):
    worst_rise = -np.inf
    worst_eq = 0.0
    for i in range(n_instances):
        rng = make_rng(seed + i, "extra", 505)
        L, N, M = 20, 40, 2
        S = lift_real(crandn(rng, (L, N)) / np.sqrt(L), "operator")
        active = rng.random(N) < 0.15
        X = lift_real(crandn(rng, (N, M)) * active[:, None])
        Y = S @ X + 0.01 * rng.standard_normal((2 * L, M))
        D = spectral_norm_sq(S)
        lam = 0.1 * row_inf_norm(S, Y)
        traj = ista_gs(S, Y, IstaConfig(lam, iters), D=D)
        worst_rise = max(worst_rise, float(np.max(np.diff(traj.objective))))
        # initialization equivalence against elementwise ISTA
        K = 10
        p = init_params("lpomcp_gs", S, lam, K, D=D)
        for layer in p.layers:
            layer["eta"] = 0.0
        nets = forward(p, Y, S).estimates
        ref = ista_gs(S, Y, IstaConfig(lam, K, shrinkage="elementwise"), D=D).estimates
        worst_eq = max(worst_eq, max(float(np.max(np.abs(a - b))) for a, b in zip(nets, ref)))
    ok = worst_rise <= 1e-12 and worst_eq <= 1e-12
    return ok, f"max objective increase {worst_rise:.3g}, init-equivalence gap {worst_eq:.3g}", \
        {"rise": worst_rise, "equiv": worst_eq}


def check_ista(n_instances: int = 10, seed: int = 0, iters: int = 500) -> CheckResult:
    return _timed("ista_monotone", _ista, n_instances, seed, iters)


# -- support containment -------------------------------------------------------

def _support(n_samples, seed, K, L, N, M):
    cfg = SystemConfig(L=L, N=N, M=M, p_active=0.1, snr_db=float("inf"), seed=seed)
    ds = build_dataset(cfg, "gaussian", n_samples, 1)
    X, Y = stack_lifted(ds.train)
    Z = np.zeros_like(Y)
    S = ds.S_lift
    B = analytic_weight_closed_form(S)
    _, thetas, flags, probe = theorem1_probe(S, B, Y, X, Z, K)
    return all(flags), (f"{sum(flags)}/{len(flags)} layers contained; phi_hat {probe.phi_hat:.3g}, "
                        f"theta_K {thetas[-1]:.3g}"), {"flags": flags, "thetas": thetas}


def check_support(n_samples: int = 50, seed: int = 0, K: int = 10, L: int = 60, N: int = 120,
                  M: int = 2) -> CheckResult:
    return _timed("support_containment", _support, n_samples, seed, K, L, N, M)


def run_all(seed: int = 0) -> list[CheckResult]:
    return [
        check_prox_oracle(seed=seed),
        check_gradients(seed=seed),
        check_analytic_weight(seed=seed),
        check_ista(seed=seed),
        check_support(seed=seed),
    ]


def format_report(results: list[CheckResult]) -> str:
    lines = [f"{'PASS' if r.passed else 'FAIL'}  {r.name:<22} {r.seconds:7.2f}s  {r.detail}"
             for r in results]
    n_ok = sum(r.passed for r in results)
    lines.append(f"{n_ok}/{len(results)} checks passed")
    return "\n".join(lines)
