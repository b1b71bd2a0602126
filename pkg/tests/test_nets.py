import numpy as np
import pytest

from jadce.errors import ParameterError
from jadce.nets import (
    VARIANTS,
    NetworkParams,
    canonical_variant,
    coupling_check,
    forward,
    grad_loss,
    loss_and_grad,
)
from jadce.solvers import IstaConfig, analytic_weight_closed_form, ista_gs, row_inf_norm, spectral_norm_sq
from jadce.training import init_params
from jadce.verify import gradient_fd_errors, small_instance


def instance(seed=0, L=6, N=12, M=2):
    return small_instance(seed, L, N, M, p=0.3)


def test_canonical_variant():
    assert canonical_variant("LPOMCP-GS") == "lpomcp_gs"
    assert canonical_variant("alpom") == "alpom_gs"
    with pytest.raises(ParameterError):
        canonical_variant("amp")


@pytest.mark.parametrize("variant", VARIANTS)
def test_zero_observation_gives_zero_trajectory(variant):
    S, _, Y = instance()
    p = init_params(variant, S, 0.5, 4, weight_solver="closed_form")
    traj = forward(p, np.zeros_like(Y), S)
    assert len(traj.estimates) == 5 and all(not X.any() for X in traj.estimates)


def test_huge_threshold_kills_output():
    S, _, Y = instance()
    B = analytic_weight_closed_form(S)
    big = float(np.max(np.abs(B @ Y))) * 10
    p = NetworkParams("lpomcp_gs", [{"B": B, "theta": big, "eta": 0.0}] * 3)
    assert not forward(p, Y, S).final.any()


def test_lpom_with_ista_weights_equals_elementwise_ista():
    S, _, Y = instance(1)
    D = spectral_norm_sq(S)
    g, lam = 1 / D, 0.1 * row_inf_norm(S, Y)
    W = np.eye(S.shape[1]) - g * S.T @ S
    p = NetworkParams("lpom_gs", [{"W": W, "B": g * S.T, "theta": lam * g, "eta": 0.0}] * 8)
    nets = forward(p, Y, S).estimates
    ref = ista_gs(S, Y, IstaConfig(lam, 8, shrinkage="elementwise"), D=D).estimates
    assert max(np.max(np.abs(a - b)) for a, b in zip(nets, ref)) <= 1e-12


def test_reduction_chain():
    S, _, Y = instance(2)
    rng = np.random.default_rng(2)
    Bs = analytic_weight_closed_form(S)
    gammas = rng.uniform(0.2, 0.6, 4)
    thetas = rng.uniform(0.01, 0.05, 4)
    etas = [0.4 / (2 * t) for t in thetas]
    alpom = NetworkParams("alpom_gs", [{"gamma": g, "theta": t, "eta": e}
                                       for g, t, e in zip(gammas, thetas, etas)], Bs)
    cp = NetworkParams("lpomcp_gs", [{"B": g * Bs, "theta": t, "eta": e}
                                     for g, t, e in zip(gammas, thetas, etas)])
    eye = np.eye(S.shape[1])
    lp = NetworkParams("lpom_gs", [{"W": eye - l["B"] @ S, "B": l["B"], "theta": l["theta"], "eta": l["eta"]}
                                   for l in cp.layers])
    a, b, c = (forward(p, Y, S).estimates for p in (alpom, cp, lp))
    for x, y, z in zip(a, b, c):
        assert np.max(np.abs(x - y)) <= 1e-12 and np.max(np.abs(y - z)) <= 1e-12


def test_forward_is_deterministic_and_batched():
    S, _, _ = instance(3)
    Y = np.random.default_rng(3).standard_normal((5, S.shape[0], 2))
    p = init_params("lista_gs", S, 0.2, 3)
    t1, t2 = forward(p, Y, S), forward(p, Y, S)
    assert all(np.array_equal(a, b) for a, b in zip(t1.estimates, t2.estimates))
    for i in range(5):
        assert np.allclose(forward(p, Y[i], S).final, t1.final[i], atol=1e-14)


def test_invalid_params_rejected_before_compute():
    S, _, Y = instance()
    p = init_params("lpomcp_gs", S, 0.5, 2)
    p.layers[1]["eta"] = 1.0 / p.layers[1]["theta"]
    with pytest.raises(ParameterError):
        forward(p, Y, S)
    q = init_params("lista_gs", S, 0.5, 2)
    q.layers[0]["eta"] = 0.0
    with pytest.raises(ParameterError):
        forward(q, Y, S)
    r = init_params("lpomcp_gs", S, 0.5, 2)
    r.layers[0]["B"] = r.layers[0]["B"][:, :-1]
    with pytest.raises(ParameterError):
        forward(r, Y, S)


def test_coupling_check():
    S, _, _ = instance()
    assert coupling_check(init_params("lpom_gs", S, 0.5, 3), S) <= 1e-15
    with pytest.raises(ParameterError):
        coupling_check(init_params("lpomcp_gs", S, 0.5, 3), S)


def test_dead_network_has_zero_gradients(tiny_dataset):
    batch = tiny_dataset.train[:4]
    S = tiny_dataset.S_lift
    p = init_params("lpomcp_gs", S, 1e6, 1)
    loss, grads = grad_loss(p, batch)
    X = np.stack([s.lifted.X_lift for s in batch])
    assert loss == pytest.approx(float(np.sum(X * X)), rel=1e-12)
    assert not grads[0]["B"].any() and grads[0]["theta"] == 0 and grads[0]["eta"] == 0


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients_match_finite_differences(variant, seed):
    errs = gradient_fd_errors(variant, seed)
    assert max(errs.values()) <= 1e-4, errs


def test_gradient_respects_depth():
    S, X, Y = instance(4)
    p = init_params("lpomcp_gs", S, 0.1 * row_inf_norm(S, Y), 3)
    _, grads = loss_and_grad(p, Y, S, X, depth=2)
    assert not grads[2]["B"].any() and grads[2]["theta"] == 0.0
    assert grads[0]["B"].any()
