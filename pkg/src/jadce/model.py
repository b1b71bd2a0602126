"""Grant-free random access measurement model and complex-to-real lifting.

Each transmission block is ``Y = S X + Z`` with ``X = diag(a) H``: ``S`` is the
``L x N`` signature matrix, ``a`` the Bernoulli activity vector, ``H`` the
``N x M`` Rayleigh channel and ``Z`` white complex Gaussian noise.  All
recovery work happens on the real-valued counterpart

    [Re Y]   [Re S  -Im S] [Re X]   [Re Z]
    [Im Y] = [Im S   Re S] [Im X] + [Im Z]

so device ``n`` owns lifted rows ``n`` and ``n + N``.

Randomness is drawn from ``numpy.random.PCG64`` streams derived from
``SeedSequence(seed, spawn_key=(stream, index))``.  Stream 0 is the signature
matrix, stream 1 training samples, stream 2 test samples, stream 3
auxiliary draws (minibatch shuffles), stream 4 fresh training batches;
``index`` is the sample position inside its stream.
A sample is therefore a pure function of ``(seed, stream, index)``.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import os
import zipfile
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from jadce.errors import CheckpointError, ParameterError

SIGNATURE_KINDS = ("gaussian", "binary", "conditioned")
STREAMS = {"signature": 0, "train": 1, "test": 2, "extra": 3, "batch": 4}
DATASET_SCHEMA = 1


def make_rng(seed: int, stream: str | int, index: int = 0) -> np.random.Generator:
    """Independent generator for ``(seed, stream, index)``."""
    code = STREAMS[stream] if isinstance(stream, str) else int(stream)
    ss = np.random.SeedSequence(int(seed), spawn_key=(code, int(index)))
    return np.random.Generator(np.random.PCG64(ss))


def crandn(rng: np.random.Generator, shape) -> np.ndarray:
    """CN(0, 1) draws: real and imaginary parts each N(0, 1/2)."""
    re = rng.standard_normal(shape)
    im = rng.standard_normal(shape)
    return (re + 1j * im) / math.sqrt(2.0)


@dataclass(frozen=True)
class SystemConfig:
    L: int = 100
    N: int = 200
    M: int = 2
    p_active: float = 0.1
    snr_db: float = 50.0
    seed: int = 0

    def __post_init__(self):
        for name in ("L", "N", "M"):
            if int(getattr(self, name)) < 1:
                raise ParameterError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 < self.p_active < 1.0:
            raise ParameterError(f"p_active must lie in (0, 1), got {self.p_active}")
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise ParameterError(f"invalid snr_db {self.snr_db}")
        if not 0 <= int(self.seed) < 2**64:
            raise ParameterError("seed must be an unsigned 64-bit integer")

    @property
    def noiseless(self) -> bool:
        return math.isinf(self.snr_db)


@dataclass
class LiftedSystem:
    S_lift: np.ndarray
    Y_lift: np.ndarray
    X_lift: np.ndarray | None = None


@dataclass
class Sample:
    activity: np.ndarray
    H: np.ndarray
    lifted: LiftedSystem
    sigma2: float
    Y: np.ndarray
    Z: np.ndarray

    @property
    def X(self) -> np.ndarray:
        return self.activity[:, None] * self.H

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.activity)


def lift_real(C: np.ndarray, role: str = "signal") -> np.ndarray:
    """Real-valued counterpart of a complex matrix.

    ``role="operator"`` gives the ``2L x 2N`` block matrix
    ``[[Re, -Im], [Im, Re]]``; ``role="signal"`` stacks ``[Re; Im]``.
    """
    C = np.asarray(C)
    if C.ndim != 2:
        raise ParameterError(f"expected a 2-D matrix, got shape {C.shape}")
    if not np.all(np.isfinite(C)):
        raise ParameterError("matrix has non-finite entries")
    re, im = C.real.astype(float), C.imag.astype(float)
    if role == "operator":
        return np.block([[re, -im], [im, re]])
    if role == "signal":
        return np.vstack([re, im])
    raise ParameterError(f"unknown role {role!r}")


def unlift_real(R: np.ndarray, role: str = "signal") -> np.ndarray:
    """Inverse of :func:`lift_real`."""
    R = np.asarray(R, dtype=float)
    if R.shape[0] % 2:
        raise ParameterError("lifted matrix must have an even number of rows")
    h = R.shape[0] // 2
    if role == "operator":
        if R.shape[1] % 2:
            raise ParameterError("lifted operator must have an even number of columns")
        w = R.shape[1] // 2
        return R[:h, :w] + 1j * R[h:, :w]
    if role == "signal":
        return R[:h] + 1j * R[h:]
    raise ParameterError(f"unknown role {role!r}")


def gen_signature(kind: str, L: int, N: int, seed: int, kappa: float | None = None) -> np.ndarray:
    """Signature matrix ``S`` of shape ``(L, N)``.

    ``gaussian`` draws i.i.d. CN(0, 1) entries, ``binary`` uniform +-1 (real),
    ``conditioned`` replaces the singular values of a Gaussian draw with the
    geometric ramp ``s_max * kappa**(-j / (r - 1))`` so that ``cond(S) = kappa``.
    """
    if L < 1 or N < 1:
        raise ParameterError(f"invalid signature dimensions {L}x{N}")
    rng = make_rng(seed, "signature")
    if kind == "gaussian":
        return crandn(rng, (L, N))
    if kind == "binary":
        return rng.choice(np.array([-1.0, 1.0]), size=(L, N)).astype(complex)
    if kind == "conditioned":
        if kappa is None or not kappa >= 1.0:
            raise ParameterError(f"conditioned signatures need kappa >= 1, got {kappa}")
        G = crandn(rng, (L, N))
        U, s, Vh = np.linalg.svd(G, full_matrices=False)
        r = s.size
        if r == 1:
            ramp = s[:1]
        else:
            ramp = s[0] * float(kappa) ** (-np.arange(r) / (r - 1))
        return (U * ramp) @ Vh
    raise ParameterError(f"unknown signature kind {kind!r}; expected one of {SIGNATURE_KINDS}")


def gen_sample(S: np.ndarray, cfg: SystemConfig, index: int = 0, stream: str = "train",
               S_lift: np.ndarray | None = None) -> Sample:
    """One transmission block for signature ``S``.

    Noise is calibrated per sample: ``sigma2 = ||S X||_F^2 / (L M snr)`` and the
    drawn noise is rescaled to energy exactly ``sigma2 L M`` so the realised
    SNR equals the configured one.  An all-inactive block falls back to the
    ensemble signal power ``p_active M ||S||_F^2``.
    """
    S = np.asarray(S)
    if S.shape != (cfg.L, cfg.N):
        raise ParameterError(f"signature shape {S.shape} does not match (L, N) = ({cfg.L}, {cfg.N})")
    rng = make_rng(cfg.seed, stream, index)
    activity = (rng.random(cfg.N) < cfg.p_active).astype(np.int8)
    H = crandn(rng, (cfg.N, cfg.M))
    noise = crandn(rng, (cfg.L, cfg.M))
    X = activity[:, None] * H
    SX = S @ X
    if cfg.noiseless:
        sigma2 = 0.0
        Z = np.zeros_like(SX)
    else:
        power = float(np.sum(np.abs(SX) ** 2))
        if power == 0.0:
            power = cfg.p_active * cfg.M * float(np.sum(np.abs(S) ** 2))
        snr = 10.0 ** (cfg.snr_db / 10.0)
        sigma2 = power / (cfg.L * cfg.M * snr)
        energy = float(np.sum(np.abs(noise) ** 2))
        Z = noise * math.sqrt(sigma2 * cfg.L * cfg.M / energy)
    Y = SX + Z
    if S_lift is None:
        S_lift = lift_real(S, "operator")
    lifted = LiftedSystem(S_lift=S_lift, Y_lift=lift_real(Y), X_lift=lift_real(X))
    return Sample(activity=activity, H=H, lifted=lifted, sigma2=sigma2, Y=Y, Z=Z)


def gen_dataset(S: np.ndarray, cfg: SystemConfig, count: int, stream: str = "train",
                start: int = 0) -> list[Sample]:
    """``count`` i.i.d. samples sharing ``S``; sample ``i`` uses index ``start + i``."""
    if count < 1:
        raise ParameterError(f"count must be >= 1, got {count}")
    S_lift = lift_real(S, "operator")
    return [gen_sample(S, cfg, start + i, stream, S_lift=S_lift) for i in range(count)]


def stack_lifted(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    """Batch arrays ``(X_lift, Y_lift)`` of shapes ``(T, 2N, M)`` and ``(T, 2L, M)``."""
    if not samples:
        raise ParameterError("empty batch")
    X = np.stack([s.lifted.X_lift for s in samples])
    Y = np.stack([s.lifted.Y_lift for s in samples])
    return X, Y


def noise_lifted(samples: Sequence[Sample]) -> np.ndarray:
    return np.stack([lift_real(s.Z) for s in samples])


def signature_hash(S_lift: np.ndarray) -> str:
    """SHA-256 over the float64 bytes and shape of the lifted signature."""
    a = np.ascontiguousarray(S_lift, dtype="<f8")
    h = hashlib.sha256()
    h.update(repr(a.shape).encode())
    h.update(a.tobytes())
    return h.hexdigest()


@dataclass
class Dataset:
    """A signature matrix plus train and test samples generated from it."""

    config: SystemConfig
    kind: str
    S: np.ndarray
    train: list[Sample]
    test: list[Sample] = field(default_factory=list)
    kappa: float | None = None

    @property
    def S_lift(self) -> np.ndarray:
        if self.train:
            return self.train[0].lifted.S_lift
        return lift_real(self.S, "operator")

    def summary(self) -> dict:
        out = {"signature": self.kind, "kappa": self.kappa, **asdict(self.config)}
        for name, samples in (("train", self.train), ("test", self.test)):
            if not samples:
                continue
            sizes = np.array([s.activity.sum() for s in samples])
            snrs = []
            for s in samples:
                sig = np.sum(np.abs(self.S @ s.X) ** 2)
                noise = np.sum(np.abs(s.Z) ** 2)
                if sig > 0 and noise > 0:
                    snrs.append(10 * np.log10(sig / noise))
            out[name] = {
                "count": len(samples),
                "support_mean": float(sizes.mean()),
                "support_min": int(sizes.min()),
                "support_max": int(sizes.max()),
                "realized_snr_db_mean": float(np.mean(snrs)) if snrs else math.inf,
            }
        return out


def build_dataset(cfg: SystemConfig, kind: str, n_train: int, n_test: int,
                  kappa: float | None = None) -> Dataset:
    S = gen_signature(kind, cfg.L, cfg.N, cfg.seed, kappa)
    train = gen_dataset(S, cfg, n_train, "train")
    test = gen_dataset(S, cfg, n_test, "test") if n_test else []
    return Dataset(cfg, kind, S, train, test, kappa)


# Dataset container: an uncompressed .npz holding
#   meta      uint8 bytes of a UTF-8 JSON document {schema, config, kind, kappa, ...}
#   S         complex128 (L, N)
#   <split>_activity  int8 (T, N)
#   <split>_H         complex128 (T, N, M)
#   <split>_Z         complex128 (T, L, M)
#   <split>_sigma2    float64 (T,)
# for split in {train, test}.  Y and the lifted forms are rebuilt on load.

def save_dataset(ds: Dataset, path: str | os.PathLike) -> None:
    meta = {
        "schema": DATASET_SCHEMA,
        "config": asdict(ds.config),
        "kind": ds.kind,
        "kappa": ds.kappa,
        "signature_sha256": signature_hash(ds.S_lift),
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
              "S": ds.S}
    for split in ("train", "test"):
        samples = getattr(ds, split)
        if not samples:
            continue
        arrays[f"{split}_activity"] = np.stack([s.activity for s in samples])
        arrays[f"{split}_H"] = np.stack([s.H for s in samples])
        arrays[f"{split}_Z"] = np.stack([s.Z for s in samples])
        arrays[f"{split}_sigma2"] = np.array([s.sigma2 for s in samples])
    _atomic_savez(path, arrays)


def load_dataset(path: str | os.PathLike) -> Dataset:
    arrays = read_npz(path)
    try:
        meta = json.loads(arrays["meta"].tobytes().decode())
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: missing or corrupt metadata") from exc
    if meta.get("schema") != DATASET_SCHEMA:
        raise CheckpointError(f"{path}: unsupported dataset schema {meta.get('schema')}")
    cfg = SystemConfig(**meta["config"])
    S = arrays["S"]
    S_lift = lift_real(S, "operator")
    if signature_hash(S_lift) != meta["signature_sha256"]:
        raise CheckpointError(f"{path}: signature hash mismatch")
    splits = {}
    for split in ("train", "test"):
        if f"{split}_activity" not in arrays:
            splits[split] = []
            continue
        act, H, Z, s2 = (arrays[f"{split}_{k}"] for k in ("activity", "H", "Z", "sigma2"))
        samples = []
        for a, h, z, sigma2 in zip(act, H, Z, s2):
            X = a[:, None] * h
            Y = S @ X + z
            lifted = LiftedSystem(S_lift, lift_real(Y), lift_real(X))
            samples.append(Sample(a, h, lifted, float(sigma2), Y, z))
        splits[split] = samples
    return Dataset(cfg, meta["kind"], S, splits["train"], splits["test"], meta["kappa"])


def read_npz(path: str | os.PathLike) -> dict[str, np.ndarray]:
    """Load every array of an .npz eagerly; any corruption becomes CheckpointError."""
    try:
        with np.load(path, allow_pickle=False) as z:
            return {k: z[k] for k in z.files}
    except FileNotFoundError:
        raise
    except Exception as exc:  # zipfile.BadZipFile, EOFError, ValueError, ...
        raise CheckpointError(f"{path}: unreadable container ({exc})") from exc


def _atomic_savez(path, arrays: dict) -> None:
    """Write an .npz with fixed zip timestamps so equal content gives equal bytes."""
    path = os.fspath(path)
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.external_attr = 0o644 << 16
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.asanyarray(arr), allow_pickle=False)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)
