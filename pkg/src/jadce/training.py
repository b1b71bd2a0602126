"""Initialization, layer-by-layer training, constraint projection and checkpoints.

Training minimises ``sum_i ||X^k(Theta, Y_i) - X*_i||_F^2`` with a
curriculum: for ``k = 1..K`` stage A trains layer ``k`` alone against the
depth-``k`` loss, then stage B fine-tunes layers ``1..k`` jointly at a reduced
rate.  Every optimizer step is followed by :func:`project_constraints`.

The optimizer is Adam with per-leaf step sizes: each leaf's step is
``learn_rate * scale`` where ``scale`` is fixed at the start of the stage
(RMS for matrices, ``|value|`` for theta and gamma, ``1/(2 theta)`` for eta).
Without this the same rate would be far too large for the ``B`` entries
(~1e-3) and far too small for ``eta`` (~1e0).
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from jadce.errors import CheckpointError, ParameterError, TrainingAbort
from jadce.model import (
    Dataset,
    _atomic_savez,
    gen_sample,
    make_rng,
    read_npz,
    signature_hash,
    stack_lifted,
)
from jadce.nets import LEAVES, MATRIX_LEAVES, NetworkParams, canonical_variant, loss_and_grad
from jadce.solvers import (
    analytic_weight_closed_form,
    analytic_weight_pgd,
    row_inf_norm,
    spectral_norm_sq,
)

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = 1
ETA_INIT_RATIO = 0.1  # 2 * theta * eta at initialization
THETA_FLOOR = 1e-8


@dataclass
class TrainConfig:
    K: int = 16
    batch_size: int = 64
    learn_rate: float = 5e-2    # relative to each leaf's scale, see module docstring
    finetune_mult: float = 0.2
    epochs: int = 200
    epochs_finetune: int | None = None  # None -> same as epochs
    delta: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    n_val: int = 8
    fresh_batches: bool = True  # draw a new batch per step instead of reusing the fixed set
    lambda0: float | None = None
    weight_solver: str = "pgd"   # B* for alpom_gs: "pgd" or "closed_form"
    pgd_steps: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.K < 1 or self.batch_size < 1:
            raise ParameterError("K and batch_size must be >= 1")
        if not 0.0 < self.delta < 1.0:
            raise ParameterError(f"delta must lie in (0, 1), got {self.delta}")
        if self.learn_rate <= 0 or self.finetune_mult <= 0:
            raise ParameterError("learning rates must be positive")
        if self.epochs < 0 or (self.epochs_finetune is not None and self.epochs_finetune < 0):
            raise ParameterError("epochs must be >= 0")
        if self.weight_solver not in ("pgd", "closed_form"):
            raise ParameterError(f"unknown weight_solver {self.weight_solver!r}")
        if self.n_val < 0:
            raise ParameterError("n_val must be >= 0")


@dataclass
class Checkpoint:
    params: NetworkParams
    train_config: TrainConfig
    signature_hash: str
    stage: int = 0                                 # number of completed stages
    loss_history: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)       # D, gamma_max, lambda0, val NMSE
    timings: dict = field(default_factory=dict)    # wall-clock seconds; not saved


def ista_step(S_lift) -> float:
    return 1.0 / spectral_norm_sq(S_lift)


def alpom_step(B_star, S_lift) -> float:
    """Step making ``gamma * B* S`` non-expansive: ``1 / ||B* S||_2``."""
    return 1.0 / float(np.linalg.norm(B_star @ S_lift, 2))


def default_lambda0(S_lift, Y_lift) -> float:
    return 0.1 * row_inf_norm(S_lift, Y_lift)


def init_params(variant: str, S_lift, lambda0: float, K: int, D: float | None = None,
                B_star: np.ndarray | None = None, weight_solver: str = "pgd",
                pgd_steps: int = 2000) -> NetworkParams:
    """ISTA-equivalent initialization.

    ``gamma = 1/D`` with ``D = ||S||_2^2``, ``W = I - gamma S^T S``,
    ``B = gamma S^T``, ``theta = lambda0 * gamma`` and ``eta = 0.1 / (2 theta)``.
    ``alpom_gs`` solves for ``B*`` (unless given) and starts its step at
    ``1 / ||B* S||_2``.
    """
    variant = canonical_variant(variant)
    S = np.asarray(S_lift, dtype=float)
    if D is None:
        D = spectral_norm_sq(S)
    gamma = 1.0 / D
    theta = lambda0 * gamma
    if theta < 0:
        raise ParameterError("lambda0 must be >= 0")
    eta = ETA_INIT_RATIO / (2.0 * theta) if theta > 0 else 0.0
    if variant == "alpom_gs" and B_star is None:
        if weight_solver == "pgd":
            B_star = analytic_weight_pgd(S, steps=pgd_steps)
        else:
            B_star = analytic_weight_closed_form(S)
    layers = []
    for _ in range(K):
        layer = {"theta": theta}
        if variant != "lista_gs":
            layer["eta"] = eta
        if variant == "lpom_gs":
            layer["W"] = np.eye(S.shape[1]) - gamma * (S.T @ S)
        if variant in ("lpom_gs", "lpomcp_gs", "lista_gs"):
            layer["B"] = gamma * S.T.copy()
        if variant == "alpom_gs":
            layer["gamma"] = alpom_step(B_star, S)
        layers.append(layer)
    return NetworkParams(variant, layers, B_star if variant == "alpom_gs" else None)


def project_constraints(params: NetworkParams, delta: float = 0.05,
                        gamma_max: float | None = None) -> NetworkParams:
    """Clamp in place: ``theta >= 1e-8``, ``0 <= eta <= (1 - delta)/(2 theta)``,
    ``0 < gamma <= gamma_max``.  Returns ``params`` for chaining."""
    for layer in params.layers:
        layer["theta"] = max(float(layer["theta"]), THETA_FLOOR)
        if "eta" in layer:
            hi = (1.0 - delta) / (2.0 * layer["theta"])
            layer["eta"] = min(max(float(layer["eta"]), 0.0), hi)
        if "gamma" in layer and gamma_max is not None:
            layer["gamma"] = min(max(float(layer["gamma"]), 1e-8 * gamma_max), gamma_max)
    return params


class _Adam:
    def __init__(self, keys, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {}
        self.v = {}
        self.keys = list(keys)

    def step(self, params: NetworkParams, grads: list, lr: dict):
        c = self.cfg
        self.t += 1
        b1c = 1.0 - c.beta1 ** self.t
        b2c = 1.0 - c.beta2 ** self.t
        for key in self.keys:
            k, name = key
            g = grads[k][name]
            m = self.m.get(key, 0.0) * c.beta1 + (1 - c.beta1) * g
            v = self.v.get(key, 0.0) * c.beta2 + (1 - c.beta2) * (g * g)
            self.m[key], self.v[key] = m, v
            upd = lr[key] * (m / b1c) / (np.sqrt(v / b2c) + c.adam_eps)
            if name in MATRIX_LEAVES:
                params.layers[k][name] = params.layers[k][name] - upd
            else:
                params.layers[k][name] = float(params.layers[k][name] - upd)


def _leaf_scale(layer: dict, name: str) -> float:
    val = layer[name]
    if name in MATRIX_LEAVES:
        if name == "W":
            val = val - np.eye(val.shape[0])
        s = float(np.sqrt(np.mean(val * val)))
    elif name == "eta":
        s = 0.5 / layer["theta"]
    else:
        s = abs(float(val))
    return s if s > 0 else 1.0


def make_sampler(dataset: Dataset, batch_size: int):
    """Fresh-batch sampler over the ``batch`` stream of ``dataset``'s generator."""
    S, cfg = dataset.S, dataset.config
    S_lift = dataset.S_lift

    def sampler(step: int):
        return stack_lifted([gen_sample(S, cfg, step * batch_size + i, "batch", S_lift=S_lift)
                             for i in range(batch_size)])
    return sampler


def _stage_plan(K):
    for k in range(1, K + 1):
        yield k, "A"
        yield k, "B"


def train_layerwise(variant: str, dataset, cfg: TrainConfig, S_lift=None,
                    resume: Checkpoint | None = None, stage_dir: str | None = None,
                    params0: NetworkParams | None = None, sampler=None) -> Checkpoint:
    """Layer-by-layer training on ``dataset`` (a :class:`Dataset` or list of samples).

    The last ``cfg.n_val`` samples are held out for per-depth validation
    NMSE.  Within each stage the lowest-loss iterate is kept, so the depth-k
    training loss never ends above its value at stage start.  With
    ``stage_dir`` a checkpoint is written after every stage; ``resume``
    continues from such a checkpoint at its recorded stage.

    ``sampler(step) -> (X_lift, Y_lift)`` supplies a fresh batch for every
    optimizer step (built automatically from a :class:`Dataset` when
    ``cfg.fresh_batches``) (``step`` is a global counter, so a
    deterministic sampler keeps training reproducible); the fixed training
    samples are then only used for best-iterate selection.
    """
    variant = canonical_variant(variant)
    if isinstance(dataset, Dataset):
        if sampler is None and cfg.fresh_batches:
            sampler = make_sampler(dataset, cfg.batch_size)
        samples = list(dataset.train)
    else:
        samples = list(dataset)
    if len(samples) <= cfg.n_val:
        raise ParameterError(f"dataset of {len(samples)} samples leaves nothing after {cfg.n_val} held out")
    S = samples[0].lifted.S_lift if S_lift is None else np.asarray(S_lift, dtype=float)
    sig = signature_hash(S)
    train = samples[:len(samples) - cfg.n_val]
    val = samples[len(samples) - cfg.n_val:]
    X_tr, Y_tr = stack_lifted(train)
    X_val, Y_val = stack_lifted(val) if val else (None, None)

    if resume is not None:
        if resume.signature_hash != sig:
            raise CheckpointError("resume checkpoint was trained on a different signature matrix")
        if resume.params.variant != variant:
            raise ParameterError(f"resume checkpoint is {resume.params.variant}, not {variant}")
        cp = Checkpoint(resume.params.copy(), cfg, sig, resume.stage,
                        list(resume.loss_history), dict(resume.meta))
    else:
        t0 = time.perf_counter()
        D = spectral_norm_sq(S)
        lambda0 = cfg.lambda0 if cfg.lambda0 is not None else default_lambda0(S, Y_tr)
        if params0 is None:
            params = init_params(variant, S, lambda0, cfg.K, D=D,
                                 weight_solver=cfg.weight_solver, pgd_steps=cfg.pgd_steps)
        else:
            params = params0.copy()
        init_time = time.perf_counter() - t0
        if variant == "alpom_gs":
            log.info("B* solved by %s in %.3fs", cfg.weight_solver, init_time)
        gamma_max = 10.0 * params.layers[0]["gamma"] if variant == "alpom_gs" else None
        project_constraints(params, cfg.delta, gamma_max)
        cp = Checkpoint(params, cfg, sig, 0, [], {
            "D": D, "lambda0": lambda0, "gamma_max": gamma_max,
            "val_nmse_db": {},
        })
        cp.timings["init"] = init_time
    params = cp.params
    if params.K != cfg.K:
        raise ParameterError(f"network has {params.K} layers, config says K={cfg.K}")
    gamma_max = cp.meta.get("gamma_max")

    plan = list(_stage_plan(cfg.K))
    for stage in range(cp.stage, len(plan)):
        k, phase = plan[stage]
        if phase == "A":
            active = [(k - 1, n) for n in LEAVES[variant]]
            lr0, epochs = cfg.learn_rate, cfg.epochs
        else:
            active = [(j, n) for j in range(k) for n in LEAVES[variant]]
            lr0 = cfg.learn_rate * cfg.finetune_mult
            epochs = cfg.epochs if cfg.epochs_finetune is None else cfg.epochs_finetune
        lr = {key: lr0 * _leaf_scale(params.layers[key[0]], key[1]) for key in active}
        opt = _Adam(active, cfg)
        rng = make_rng(cfg.seed, "extra", stage)

        def full_loss(p):
            return loss_and_grad(p, Y_tr, S, X_tr, depth=k)

        loss, _ = full_loss(params)
        best_loss, best_params = loss, params.copy()
        history = [loss]
        t0 = time.perf_counter()
        n = X_tr.shape[0]
        bs = min(cfg.batch_size, n)

        def abort(epoch, what):
            cp.params = best_params
            cp.loss_history.append(_stage_record(stage, k, phase, history))
            path = None
            if stage_dir is not None:
                os.makedirs(stage_dir, exist_ok=True)
                path = os.path.join(stage_dir, f"abort_stage{stage:03d}.npz")
                save_checkpoint(cp, path)
            return TrainingAbort(f"non-finite {what} at stage {stage} (layer {k}{phase}), epoch {epoch}",
                                 cp, path)

        def update(Yb, Xb, epoch):
            batch_loss, grads = loss_and_grad(params, Yb, S, Xb, depth=k)
            if not math.isfinite(batch_loss):
                raise abort(epoch, "batch loss")
            opt.step(params, grads, lr)
            project_constraints(params, cfg.delta, gamma_max)

        for epoch in range(epochs):
            if sampler is not None:
                Xb, Yb = sampler(stage * 1_000_000 + epoch)
                update(Yb, Xb, epoch)
            else:
                order = rng.permutation(n) if bs < n else np.arange(n)
                for start in range(0, n, bs):
                    idx = order[start:start + bs]
                    update(Y_tr[idx], X_tr[idx], epoch)
            loss, _ = full_loss(params)
            history.append(loss)
            if not math.isfinite(loss):
                raise abort(epoch, "loss")
            if loss < best_loss:
                best_loss, best_params = loss, params.copy()
        params = best_params
        cp.params = params
        cp.stage = stage + 1
        cp.loss_history.append(_stage_record(stage, k, phase, history))
        if phase == "B" and X_val is not None:
            traj_val = loss_and_grad(params, Y_val, S, X_val, depth=k)[0]
            cp.meta["val_nmse_db"][str(k)] = 10 * math.log10(
                max(traj_val / float(np.sum(X_val * X_val)), 1e-30))
        cp.timings[f"stage{stage:03d}"] = time.perf_counter() - t0
        log.info("stage %d layer %d%s: loss %.6g -> %.6g (%.1fs)", stage, k, phase, history[0], best_loss,
                 cp.timings[f"stage{stage:03d}"])
        if stage_dir is not None:
            os.makedirs(stage_dir, exist_ok=True)
            save_checkpoint(cp, os.path.join(stage_dir, f"stage{stage:03d}.npz"))
    return cp


def _stage_record(stage, k, phase, history):
    # no wall-clock fields: identical runs must give identical checkpoints
    return {"stage": stage, "layer": k, "phase": phase,
            "loss": [float(x) for x in history], "best": float(np.nanmin(history))}


# Checkpoint container: uncompressed .npz (fixed zip timestamps) holding
#   meta                       uint8 bytes of UTF-8 JSON:
#       schema, variant, K, signature_sha256, stage, train_config,
#       loss_history, meta, scalars: {"<k>/<leaf>": float.hex()}
#   layer<k>/W, layer<k>/B     float64 matrices (when the variant has them)
#   B_star                     float64 (alpom_gs only)
# Scalars are stored as float.hex strings so they round-trip bit-exactly.

def save_checkpoint(cp: Checkpoint, path) -> None:
    p = cp.params
    p.validate()
    scalars = {}
    arrays = {}
    for k, name in p.leaves():
        val = p.layers[k][name]
        if name in MATRIX_LEAVES:
            arrays[f"layer{k}/{name}"] = np.asarray(val, dtype="<f8")
        else:
            scalars[f"{k}/{name}"] = float(val).hex()
    if p.B_star is not None:
        arrays["B_star"] = np.asarray(p.B_star, dtype="<f8")
    meta = {
        "schema": CHECKPOINT_SCHEMA,
        "variant": p.variant,
        "K": p.K,
        "signature_sha256": cp.signature_hash,
        "stage": cp.stage,
        "train_config": asdict(cp.train_config),
        "loss_history": cp.loss_history,
        "meta": cp.meta,
        "scalars": scalars,
    }
    blob = json.dumps(meta, sort_keys=True, default=_json_default).encode()
    _atomic_savez(path, {"meta": np.frombuffer(blob, dtype=np.uint8), **arrays})


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o)}")


def load_checkpoint(path, S_lift=None, expected_hash: str | None = None) -> Checkpoint:
    """Load and validate a checkpoint; with ``S_lift`` (or ``expected_hash``)
    also check it was trained for that signature matrix."""
    arrays = read_npz(path)
    try:
        meta = json.loads(arrays["meta"].tobytes().decode())
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: missing or corrupt metadata") from exc
    if meta.get("schema") != CHECKPOINT_SCHEMA:
        raise CheckpointError(f"{path}: unsupported checkpoint schema {meta.get('schema')}")
    if S_lift is not None:
        expected_hash = signature_hash(S_lift)
    if expected_hash is not None and meta["signature_sha256"] != expected_hash:
        raise CheckpointError(f"{path}: checkpoint signature hash does not match the signature matrix")
    variant = meta["variant"]
    layers = []
    try:
        for k in range(meta["K"]):
            layer = {}
            for name in LEAVES[variant]:
                if name in MATRIX_LEAVES:
                    layer[name] = arrays[f"layer{k}/{name}"].astype(float)
                else:
                    layer[name] = float.fromhex(meta["scalars"][f"{k}/{name}"])
            layers.append(layer)
        params = NetworkParams(variant, layers, arrays.get("B_star"))
        params.validate()
        cfg = TrainConfig(**meta["train_config"])
    except (KeyError, TypeError, ParameterError) as exc:
        raise CheckpointError(f"{path}: incomplete or invalid checkpoint ({exc})") from exc
    return Checkpoint(params, cfg, meta["signature_sha256"], meta["stage"],
                      meta["loss_history"], meta["meta"])
