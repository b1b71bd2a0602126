import math

import numpy as np
import pytest

from jadce.errors import CheckpointError, ParameterError, TrainingAbort
from jadce.model import SystemConfig, build_dataset, stack_lifted
from jadce.nets import VARIANTS, NetworkParams, forward
from jadce.metrics import nmse_db
from jadce.solvers import IstaConfig, ista_gs, spectral_norm_sq
from jadce.training import (
    Checkpoint,
    TrainConfig,
    init_params,
    load_checkpoint,
    project_constraints,
    save_checkpoint,
    train_layerwise,
)

FAST = dict(K=2, epochs=8, batch_size=8, n_val=4)


def test_train_config_validation():
    with pytest.raises(ParameterError):
        TrainConfig(K=0)
    with pytest.raises(ParameterError):
        TrainConfig(delta=1.0)
    with pytest.raises(ParameterError):
        TrainConfig(learn_rate=0.0)
    assert TrainConfig().K == 16 and TrainConfig().batch_size == 64


@pytest.mark.parametrize("variant", VARIANTS)
def test_init_params_structure(variant, tiny_dataset):
    S = tiny_dataset.S_lift
    p = init_params(variant, S, 0.7, 4)
    p.validate(S)
    thetas = {l["theta"] for l in p.layers}
    assert len(thetas) == 1
    if p.uses_mcp:
        assert all(2 * l["eta"] * l["theta"] == pytest.approx(0.1) for l in p.layers)
    else:
        assert all("eta" not in l for l in p.layers)
    if variant == "alpom_gs":
        assert p.B_star is not None


def test_init_equivalent_to_ista_when_eta_zero(tiny_dataset):
    S = tiny_dataset.S_lift
    _, Y = stack_lifted(tiny_dataset.train)
    D = spectral_norm_sq(S)
    p = init_params("lpomcp_gs", S, 0.4, 6, D=D)
    for layer in p.layers:
        layer["eta"] = 0.0
    ref = ista_gs(S, Y, IstaConfig(0.4, 6, shrinkage="elementwise"), D=D).estimates
    for a, b in zip(forward(p, Y, S).estimates, ref):
        assert np.max(np.abs(a - b)) <= 1e-12


def test_project_constraints():
    p = NetworkParams("lpomcp_gs", [{"B": np.zeros((2, 2)), "theta": 0.5, "eta": 5.0},
                                    {"B": np.zeros((2, 2)), "theta": -0.1, "eta": -1.0}])
    project_constraints(p, 0.05)
    assert p.layers[0]["eta"] == pytest.approx(0.95)
    assert p.layers[1]["theta"] == 1e-8 and p.layers[1]["eta"] == 0.0
    before = [dict(l) for l in p.layers]
    project_constraints(p, 0.05)
    assert [l["eta"] for l in p.layers] == [l["eta"] for l in before]
    q = NetworkParams("alpom_gs", [{"gamma": 50.0, "theta": 0.1, "eta": 0.0}], np.eye(2))
    project_constraints(q, 0.05, gamma_max=3.0)
    assert q.layers[0]["gamma"] == 3.0


def test_square_orthogonal_system_is_learned_to_high_accuracy():
    # oracle: with S square and S^T S = c I the 1-layer net B = S^{-1}, theta -> 0 is exact
    cfg = SystemConfig(L=8, N=8, M=2, p_active=0.3, snr_db=math.inf, seed=3)
    ds = build_dataset(cfg, "conditioned", 40, 40, kappa=1.0)
    S = ds.S_lift
    Xt, Yt = stack_lifted(ds.test)
    exact = NetworkParams("lpomcp_gs", [{"B": np.linalg.inv(S), "theta": 1e-12, "eta": 0.0}])
    assert nmse_db(forward(exact, Yt, S).final, Xt) <= -100
    cp = train_layerwise("lpomcp_gs", ds, TrainConfig(K=1, epochs=300, batch_size=16, n_val=4))
    assert nmse_db(forward(cp.params, Yt, S).final, Xt) <= -40


@pytest.mark.parametrize("variant", VARIANTS)
def test_train_layerwise_contract(variant, tiny_dataset):
    cfg = TrainConfig(**FAST)
    cp = train_layerwise(variant, tiny_dataset, cfg)
    assert len(cp.loss_history) == 2 * cfg.K and cp.stage == 2 * cfg.K
    cp.params.validate(tiny_dataset.S_lift)
    for rec in cp.loss_history:
        assert rec["best"] <= rec["loss"][0]
    val = cp.meta["val_nmse_db"]
    for k in range(2, cfg.K + 1):
        assert val[str(k)] <= val[str(k - 1)] + 0.1
    for layer in cp.params.layers:
        if "eta" in layer:
            assert 2 * layer["theta"] * layer["eta"] <= 1 - cfg.delta + 1e-12


def test_retraining_is_bit_identical(tiny_dataset, tmp_path):
    cfg = TrainConfig(**FAST)
    a = train_layerwise("lpom_gs", tiny_dataset, cfg)
    b = train_layerwise("lpom_gs", tiny_dataset, cfg)
    save_checkpoint(a, tmp_path / "a.npz")
    save_checkpoint(b, tmp_path / "b.npz")
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()


def test_fixed_sample_mode(tiny_dataset):
    cfg = TrainConfig(K=2, epochs=4, batch_size=8, n_val=4, fresh_batches=False)
    cp = train_layerwise("lista_gs", tiny_dataset, cfg)
    assert cp.stage == 4


def test_resume_continues_from_stage(tiny_dataset, tmp_path):
    cfg = TrainConfig(**FAST)
    full = train_layerwise("lpomcp_gs", tiny_dataset, cfg, stage_dir=str(tmp_path))
    mid = load_checkpoint(tmp_path / "stage001.npz", S_lift=tiny_dataset.S_lift)
    assert mid.stage == 2
    resumed = train_layerwise("lpomcp_gs", tiny_dataset, cfg, resume=mid)
    assert len(resumed.loss_history) == 4
    for a, b in zip(full.params.layers, resumed.params.layers):
        assert np.array_equal(a["B"], b["B"]) and a["theta"] == b["theta"]


def test_nan_loss_aborts_with_checkpoint(tiny_dataset, tmp_path):
    def bad_sampler(step):
        X, Y = stack_lifted(tiny_dataset.train[:4])
        return X, Y * np.nan
    cfg = TrainConfig(K=1, epochs=3, batch_size=4, n_val=4)
    with pytest.raises(TrainingAbort) as exc:
        train_layerwise("lpomcp_gs", tiny_dataset, cfg, sampler=bad_sampler, stage_dir=str(tmp_path))
    assert exc.value.path and load_checkpoint(exc.value.path).params.K == 1


@pytest.mark.parametrize("variant", VARIANTS)
def test_checkpoint_round_trip(variant, tiny_dataset, tmp_path):
    S = tiny_dataset.S_lift
    p = init_params(variant, S, 0.3, 3)
    rng = np.random.default_rng(0)
    for l in p.layers:
        l["theta"] *= 1 + rng.random() * 1e-3  # awkward mantissas
    cp = Checkpoint(p, TrainConfig(K=3), "x", 1, [{"stage": 0, "loss": [1.0]}], {"D": 2.0})
    from jadce.model import signature_hash
    cp.signature_hash = signature_hash(S)
    path = tmp_path / "c.npz"
    save_checkpoint(cp, path)
    back = load_checkpoint(path, S_lift=S)
    for a, b in zip(p.layers, back.params.layers):
        assert set(a) == set(b)
        for k in a:
            assert np.array_equal(a[k], b[k])
    if variant == "lista_gs":
        assert all("eta" not in l for l in back.params.layers)
    if variant == "alpom_gs":
        assert np.array_equal(back.params.B_star, p.B_star)


def test_checkpoint_errors(tiny_dataset, tmp_path):
    S = tiny_dataset.S_lift
    cp = Checkpoint(init_params("lpomcp_gs", S, 0.3, 2), TrainConfig(K=2), "deadbeef")
    path = tmp_path / "c.npz"
    save_checkpoint(cp, path)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, S_lift=S)
    path.write_bytes(path.read_bytes()[:-200])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
