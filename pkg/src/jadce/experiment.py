"""Config-driven experiment pipeline: generate data, train networks, evaluate, sweep.

A run is fully determined by one config file (YAML or JSON) with sections::

    system:    {L, N, M, p_active, snr_db, seed}
    signature: {kind: gaussian|binary|conditioned, kappa}
    data:      {n_train, n_test}
    variants:  [lpom_gs, lpomcp_gs, alpom_gs, lista_gs]
    train:     TrainConfig fields (K, epochs, learn_rate, ...)
    ista:      {iters, lambda_grid}
    eval:      {tau}
    sweep:     {axis: none|snr_db|L, values: [...]}
    output:    {dir, figures}

Missing keys take the values of the ``paper`` preset.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import os
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import yaml

from jadce import __version__
from jadce.errors import CheckpointError, ParameterError
from jadce.metrics import (
    MetricsRecord,
    default_tau,
    evaluate_estimates,
    records_to_csv,
)
from jadce.model import (
    Dataset,
    SystemConfig,
    build_dataset,
    load_dataset,
    save_dataset,
    signature_hash,
    stack_lifted,
)
from jadce.nets import canonical_variant, forward
from jadce.solvers import IstaConfig, ista_gs, select_lambda, spectral_norm_sq
from jadce.training import (
    Checkpoint,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train_layerwise,
)

log = logging.getLogger(__name__)

SWEEP_AXES = ("none", "snr_db", "L")

PRESETS = {
    "paper": {
        "system": {"L": 100, "N": 200, "M": 2, "p_active": 0.1, "snr_db": 50.0, "seed": 0},
        "signature": {"kind": "gaussian", "kappa": None},
        "data": {"n_train": 64, "n_test": 1000},
        "variants": ["lpom_gs", "lpomcp_gs", "alpom_gs", "lista_gs"],
        "train": {"K": 16},
        "ista": {"iters": None, "lambda_grid": [0.01, 0.05, 0.1, 0.5]},
        "eval": {"tau": None},
        "sweep": {"axis": "none", "values": []},
        "output": {"dir": "runs/paper", "figures": True},
    },
    "desk": {
        "system": {"L": 60, "N": 120, "M": 2, "p_active": 0.1, "snr_db": 40.0, "seed": 1},
        "signature": {"kind": "gaussian", "kappa": None},
        "data": {"n_train": 64, "n_test": 200},
        "variants": ["lpomcp_gs", "lista_gs"],
        "train": {"K": 10},
        "ista": {"iters": None, "lambda_grid": [0.01, 0.05, 0.1, 0.5]},
        "eval": {"tau": None},
        "sweep": {"axis": "none", "values": []},
        "output": {"dir": "runs/desk", "figures": True},
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    system: SystemConfig
    signature_kind: str = "gaussian"
    kappa: float | None = None
    n_train: int = 64
    n_test: int = 1000
    variants: list = field(default_factory=lambda: ["lpomcp_gs"])
    train: TrainConfig = field(default_factory=TrainConfig)
    ista_iters: int | None = None
    lambda_grid: tuple = (0.01, 0.05, 0.1, 0.5)
    tau: float | None = None
    sweep_axis: str = "none"
    sweep_values: list = field(default_factory=list)
    out_dir: str = "runs/paper"
    figures: bool = True

    def __post_init__(self):
        self.variants = [canonical_variant(v) for v in self.variants]
        if not self.variants:
            raise ParameterError("at least one variant is required")
        if self.sweep_axis not in SWEEP_AXES:
            raise ParameterError(f"sweep axis must be one of {SWEEP_AXES}, got {self.sweep_axis!r}")
        if self.sweep_axis != "none" and not self.sweep_values:
            raise ParameterError("sweep values must be non-empty when a sweep axis is set")
        if self.n_train <= self.train.n_val:
            raise ParameterError("n_train must exceed train.n_val")
        if self.n_test < 1:
            raise ParameterError("n_test must be >= 1")

    @property
    def ista_depth(self) -> int:
        return self.train.K if self.ista_iters is None else self.ista_iters

    @classmethod
    def from_dict(cls, d: dict, preset: str = "paper") -> "ExperimentConfig":
        unknown = set(d) - set(PRESETS["paper"])
        if unknown:
            raise ParameterError(f"unknown config sections {sorted(unknown)}")
        d = _merge(PRESETS[preset], d)
        tf = {f.name for f in fields(TrainConfig)}
        bad = set(d["train"]) - tf
        if bad:
            raise ParameterError(f"unknown train keys {sorted(bad)}")
        sysd = dict(d["system"])
        sysd["snr_db"] = float(sysd["snr_db"])
        return cls(
            system=SystemConfig(**sysd),
            signature_kind=d["signature"]["kind"],
            kappa=d["signature"].get("kappa"),
            n_train=int(d["data"]["n_train"]),
            n_test=int(d["data"]["n_test"]),
            variants=list(d["variants"]),
            train=TrainConfig(**d["train"]),
            ista_iters=d["ista"].get("iters"),
            lambda_grid=tuple(d["ista"].get("lambda_grid", (0.01, 0.05, 0.1, 0.5))),
            tau=d["eval"].get("tau"),
            sweep_axis=str(d["sweep"].get("axis", "none")),
            sweep_values=list(d["sweep"].get("values") or []),
            out_dir=d["output"]["dir"],
            figures=bool(d["output"].get("figures", True)),
        )

    def to_dict(self) -> dict:
        return {
            "system": asdict(self.system),
            "signature": {"kind": self.signature_kind, "kappa": self.kappa},
            "data": {"n_train": self.n_train, "n_test": self.n_test},
            "variants": list(self.variants),
            "train": asdict(self.train),
            "ista": {"iters": self.ista_iters, "lambda_grid": list(self.lambda_grid)},
            "eval": {"tau": self.tau},
            "sweep": {"axis": self.sweep_axis, "values": list(self.sweep_values)},
            "output": {"dir": self.out_dir, "figures": self.figures},
        }

    def replace(self, **changes) -> "ExperimentConfig":
        d = self.to_dict()
        for key, val in changes.items():
            section, _, name = key.partition(".")
            if name:
                d[section][name] = val
            else:
                d[section] = val
        return ExperimentConfig.from_dict(d)

    def cell(self) -> dict:
        s = self.system
        return {"snr_db": s.snr_db, "L": s.L, "N": s.N, "M": s.M,
                "kappa": self.kappa if self.signature_kind == "conditioned" else None,
                "seed": s.seed, "signature": self.signature_kind}


def load_config(path_or_preset: str, seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    """Read a YAML/JSON config (or a preset name) and apply CLI overrides."""
    if path_or_preset in PRESETS and not os.path.exists(path_or_preset):
        raw, preset = {}, path_or_preset
    else:
        with open(path_or_preset) as fh:
            raw = yaml.safe_load(fh) or {}
        preset = raw.pop("preset", "paper")
        if preset not in PRESETS:
            raise ParameterError(f"unknown preset {preset!r}")
    cfg = ExperimentConfig.from_dict(raw, preset)
    if seed is not None:
        cfg = cfg.replace(**{"system.seed": int(seed)})
    if out is not None:
        cfg = cfg.replace(**{"output.dir": out})
    return cfg


def cell_configs(cfg: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    """Expand the sweep axis into per-cell configs with their own output dirs."""
    if cfg.sweep_axis == "none":
        return [("", cfg)]
    cells = []
    for v in cfg.sweep_values:
        name = f"{cfg.sweep_axis}={v:g}" if isinstance(v, float) else f"{cfg.sweep_axis}={v}"
        val = float(v) if cfg.sweep_axis == "snr_db" else int(v)
        sub = cfg.replace(**{f"system.{cfg.sweep_axis}": val, "sweep.axis": "none", "sweep.values": [],
                             "output.dir": os.path.join(cfg.out_dir, name)})
        cells.append((name, sub))
    return cells


# ----------------------------------------------------------------------------
# pipeline steps

def dataset_path(cfg: ExperimentConfig) -> str:
    return os.path.join(cfg.out_dir, "dataset.npz")


def checkpoint_path(cfg: ExperimentConfig, variant: str) -> str:
    return os.path.join(cfg.out_dir, f"ckpt_{variant}.npz")


def generate(cfg: ExperimentConfig, write: bool = True) -> Dataset:
    ds = build_dataset(cfg.system, cfg.signature_kind, cfg.n_train, cfg.n_test, cfg.kappa)
    if write:
        os.makedirs(cfg.out_dir, exist_ok=True)
        save_dataset(ds, dataset_path(cfg))
    return ds


def get_dataset(cfg: ExperimentConfig) -> Dataset:
    """Load the cell's dataset file, generating it first if absent."""
    path = dataset_path(cfg)
    if os.path.exists(path):
        ds = load_dataset(path)
        if ds.config != cfg.system or ds.kind != cfg.signature_kind:
            raise CheckpointError(f"{path} was generated from a different system config")
        return ds
    return generate(cfg)


def write_loss_csv(cp: Checkpoint, path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "layer", "phase", "epoch", "loss"])
        for rec in cp.loss_history:
            for epoch, loss in enumerate(rec["loss"]):
                w.writerow([rec["stage"], rec["layer"], rec["phase"], epoch, repr(float(loss))])


def train_variant(cfg: ExperimentConfig, ds: Dataset, variant: str,
                  resume: Checkpoint | None = None, write: bool = True) -> Checkpoint:
    variant = canonical_variant(variant)
    stage_dir = os.path.join(cfg.out_dir, f"stages_{variant}") if write else None
    cp = train_layerwise(variant, ds, cfg.train, resume=resume, stage_dir=stage_dir)
    if write:
        os.makedirs(cfg.out_dir, exist_ok=True)
        save_checkpoint(cp, checkpoint_path(cfg, variant))
        write_loss_csv(cp, os.path.join(cfg.out_dir, f"loss_{variant}.csv"))
    return cp


def ista_baseline(cfg: ExperimentConfig, ds: Dataset):
    """ISTA-GS estimates on the test set, lambda picked on the held-out training split."""
    S = ds.S_lift
    D = spectral_norm_sq(S)
    val = ds.train[len(ds.train) - cfg.train.n_val:] if cfg.train.n_val else ds.train
    Xv, Yv = stack_lifted(val)
    lam = select_lambda(S, Yv, Xv, cfg.ista_depth, cfg.lambda_grid, D=D)
    _, Yt = stack_lifted(ds.test)
    traj = ista_gs(S, Yt, IstaConfig(lam, cfg.ista_depth), D=D, store_limit=max(64, cfg.ista_depth))
    return traj, lam


def evaluate(cfg: ExperimentConfig, ds: Dataset, checkpoints: dict) -> tuple[list, dict]:
    """Metrics records for every checkpoint plus the ISTA-GS baseline."""
    S = ds.S_lift
    sig = signature_hash(S)
    Xt, Yt = stack_lifted(ds.test)
    activity = np.stack([s.activity for s in ds.test])
    X_train, _ = stack_lifted(ds.train)
    tau = cfg.tau if cfg.tau is not None else default_tau(X_train)
    cell = cfg.cell()
    cell.pop("signature")
    records = []
    extra = {"tau": tau}
    for variant in sorted(checkpoints):
        cp = checkpoints[variant]
        if cp.signature_hash != sig:
            raise CheckpointError(f"checkpoint for {variant} does not match the dataset signature matrix")
        traj = forward(cp.params, Yt, S)
        records.append(evaluate_estimates(variant, traj.estimates, Xt, activity, tau, cell))
    traj, lam = ista_baseline(cfg, ds)
    records.append(evaluate_estimates("ista_gs", traj.estimates, Xt, activity, tau, cell))
    extra["ista_lambda"] = lam
    return records, extra


def write_eval_outputs(cfg: ExperimentConfig, records: list, extra: dict, timings: dict | None = None,
                       sig: str | None = None) -> dict:
    os.makedirs(cfg.out_dir, exist_ok=True)
    files = {}
    path = os.path.join(cfg.out_dir, "metrics.csv")
    with open(path, "w", newline="") as fh:
        records_to_csv(records, fh)
    files["metrics.csv"] = path
    summary = {"schema": 1, "cell": cfg.cell(), "methods": [r.summary() for r in records], **extra}
    path = os.path.join(cfg.out_dir, "summary.json")
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=_json_default)
    files["summary.json"] = path
    if cfg.figures:
        from jadce import plotting
        files.update(plotting.cell_figures(records, cfg.out_dir))
    write_manifest(cfg, files, timings or {}, sig)
    return files


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o))


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _git_commit():
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=os.path.dirname(__file__))
        return out.stdout.strip() or None
    except (OSError, subprocess.SubprocessError):
        return None


def write_manifest(cfg: ExperimentConfig, files: dict, timings: dict, sig: str | None) -> str:
    manifest = {
        "package_version": __version__,
        "git_commit": _git_commit(),
        "config": cfg.to_dict(),
        "signature_sha256": sig,
        "timings_seconds": timings,
        "outputs": {name: {"path": os.path.relpath(p, cfg.out_dir), "sha256": _sha256(p)}
                    for name, p in sorted(files.items())},
    }
    path = os.path.join(cfg.out_dir, "run_manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=_json_default)
    return path


def load_checkpoints(cfg: ExperimentConfig, ds: Dataset, paths: list | None = None) -> dict:
    sig = signature_hash(ds.S_lift)
    if not paths:
        paths = [checkpoint_path(cfg, v) for v in cfg.variants]
    out = {}
    for p in paths:
        cp = load_checkpoint(p, expected_hash=sig)
        out[cp.params.variant] = cp
    return out


def run_cell(cfg: ExperimentConfig, write: bool = True) -> list[MetricsRecord]:
    """gen + train (every configured variant) + eval for one config."""
    timings = {}
    t0 = time.perf_counter()
    ds = get_dataset(cfg) if write else generate(cfg, write=False)
    timings["gen"] = time.perf_counter() - t0
    cps = {}
    for v in cfg.variants:
        t0 = time.perf_counter()
        cps[v] = train_variant(cfg, ds, v, write=write)
        timings[f"train_{v}"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    records, extra = evaluate(cfg, ds, cps)
    timings["eval"] = time.perf_counter() - t0
    if write:
        write_eval_outputs(cfg, records, extra, timings, signature_hash(ds.S_lift))
    return records


def _run_cell_worker(cfg_dict):
    cfg = ExperimentConfig.from_dict(cfg_dict)
    return run_cell(cfg)


def run_sweep(cfg: ExperimentConfig, jobs: int = 1) -> list[MetricsRecord]:
    """Run every sweep cell (in parallel worker processes when ``jobs > 1``) and merge."""
    cells = cell_configs(cfg)
    dicts = [c.to_dict() for _, c in cells]
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_cell_worker, dicts))
    else:
        results = [_run_cell_worker(d) for d in dicts]
    records = [r for rs in results for r in rs]
    os.makedirs(cfg.out_dir, exist_ok=True)
    files = {}
    path = os.path.join(cfg.out_dir, "metrics.csv")
    with open(path, "w", newline="") as fh:
        records_to_csv(records, fh)
    files["metrics.csv"] = path
    if cfg.sweep_axis != "none":
        path = os.path.join(cfg.out_dir, f"final_vs_{cfg.sweep_axis}.csv")
        write_final_table(records, cfg.sweep_axis, path)
        files[f"final_vs_{cfg.sweep_axis}.csv"] = path
        if cfg.figures:
            from jadce import plotting
            files.update(plotting.sweep_figures(records, cfg.sweep_axis, cfg.out_dir))
    write_manifest(cfg, files, {}, None)
    return records


def write_final_table(records: list, axis: str, path: str) -> None:
    """Tidy final-layer table: one row per (variant, cell)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", axis, "layer", "nmse_db", "error_rate"])
        for r in records:
            w.writerow([r.variant, r.cell[axis], r.K, repr(r.nmse_db[-1]), repr(r.error_rate[-1])])


def final_nmse(records: list) -> dict:
    return {r.variant: r.nmse_db[-1] for r in records}


def nan_safe(x):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else x
