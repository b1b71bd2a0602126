"""Unfolded proximal networks: forward recurrences and exact reverse-mode gradients.

Four K-layer structures share the recurrence ``X^{k+1} = P_k(U^k)`` from
``X^0 = 0``:

===========  ===============================================  =====================
variant      pre-activation ``U^k``                           trainable per layer
===========  ===============================================  =====================
lpom_gs      ``W^k X^k + B^k Y``                              W, B, theta, eta
lpomcp_gs    ``X^k + B^k (Y - S X^k)``                        B, theta, eta
alpom_gs     ``X^k + gamma_k B* (Y - S X^k)``                 gamma, theta, eta
lista_gs     ``X^k + B^k (Y - S X^k)``                        B, theta
===========  ===============================================  =====================

The first three use the elementwise MCP activation, ``lista_gs`` the row-wise
group soft threshold.  Inputs are lifted observations of shape ``(2L, M)`` or
a batch ``(T, 2L, M)``; internally a batch is laid out as a ``(rows, T*M)``
matrix so each layer is a single matrix product.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from jadce.errors import ParameterError
from jadce.prox import (
    check_mcp,
    group_soft_threshold,
    group_soft_threshold_backward,
    mcp_prox,
    mcp_prox_backward,
)

VARIANTS = ("lpom_gs", "lpomcp_gs", "alpom_gs", "lista_gs")
LEAVES = {
    "lpom_gs": ("W", "B", "theta", "eta"),
    "lpomcp_gs": ("B", "theta", "eta"),
    "alpom_gs": ("gamma", "theta", "eta"),
    "lista_gs": ("B", "theta"),
}
MATRIX_LEAVES = ("W", "B")

ALIASES = {
    "lpom": "lpom_gs", "lpomcp": "lpomcp_gs", "alpom": "alpom_gs", "lista": "lista_gs",
}


def canonical_variant(name: str) -> str:
    v = name.lower().replace("-", "_")
    v = ALIASES.get(v, v)
    if v not in VARIANTS:
        raise ParameterError(f"unknown variant {name!r}; expected one of {VARIANTS}")
    return v


@dataclass
class NetworkParams:
    """Per-layer parameter dicts for one variant.

    ``layers[k]`` maps leaf names to floats (theta, eta, gamma) or arrays
    (W ``2N x 2N``, B ``2N x 2L``).  ``B_star`` is the frozen analytic weight
    used by ``alpom_gs`` only.
    """

    variant: str
    layers: list
    B_star: np.ndarray | None = None

    def __post_init__(self):
        self.variant = canonical_variant(self.variant)

    @property
    def K(self) -> int:
        return len(self.layers)

    @property
    def uses_mcp(self) -> bool:
        return self.variant != "lista_gs"

    def copy(self) -> "NetworkParams":
        return copy.deepcopy(self)

    def truncated(self, depth: int) -> "NetworkParams":
        return NetworkParams(self.variant, self.layers[:depth], self.B_star)

    def validate(self, S_lift: np.ndarray | None = None) -> None:
        want = set(LEAVES[self.variant])
        if self.K < 1:
            raise ParameterError("network needs at least one layer")
        if self.variant == "alpom_gs" and self.B_star is None:
            raise ParameterError("alpom_gs requires B_star")
        for k, layer in enumerate(self.layers):
            if set(layer) != want:
                raise ParameterError(
                    f"layer {k} of {self.variant} has leaves {sorted(layer)}, expected {sorted(want)}")
            theta = layer["theta"]
            if not np.isfinite(theta) or theta < 0:
                raise ParameterError(f"layer {k}: theta={theta} must be finite and >= 0")
            if "eta" in layer:
                try:
                    check_mcp(theta, layer["eta"])
                except ParameterError as exc:
                    raise ParameterError(f"layer {k}: {exc}") from None
            if "gamma" in layer and not np.isfinite(layer["gamma"]):
                raise ParameterError(f"layer {k}: gamma is not finite")
            for name in MATRIX_LEAVES:
                if name in layer and not np.all(np.isfinite(layer[name])):
                    raise ParameterError(f"layer {k}: {name} has non-finite entries")
        if S_lift is not None:
            two_l, two_n = S_lift.shape
            for k, layer in enumerate(self.layers):
                if "W" in layer and layer["W"].shape != (two_n, two_n):
                    raise ParameterError(f"layer {k}: W shape {layer['W'].shape} != {(two_n, two_n)}")
                if "B" in layer and layer["B"].shape != (two_n, two_l):
                    raise ParameterError(f"layer {k}: B shape {layer['B'].shape} != {(two_n, two_l)}")
            if self.B_star is not None and self.B_star.shape != (two_n, two_l):
                raise ParameterError(f"B_star shape {self.B_star.shape} != {(two_n, two_l)}")

    def leaves(self):
        """Yield ``(k, name)`` for every trainable leaf, in a fixed order."""
        for k, layer in enumerate(self.layers):
            for name in LEAVES[self.variant]:
                yield k, name

    def n_trainable(self) -> int:
        return sum(int(np.size(self.layers[k][n])) for k, n in self.leaves())


def to_columns(A: np.ndarray) -> tuple[np.ndarray, tuple]:
    """``(rows, M)`` or ``(T, rows, M)`` -> ``(rows, T*M)`` plus a shape token."""
    A = np.asarray(A, dtype=float)
    if A.ndim == 2:
        return A, (None, A.shape[1])
    if A.ndim == 3:
        T, rows, M = A.shape
        return np.ascontiguousarray(A.transpose(1, 0, 2)).reshape(rows, T * M), (T, M)
    raise ParameterError(f"expected a (rows, M) or (T, rows, M) array, got shape {A.shape}")


def from_columns(A: np.ndarray, token: tuple) -> np.ndarray:
    T, M = token
    if T is None:
        return A
    return A.reshape(A.shape[0], T, M).transpose(1, 0, 2)


@dataclass
class Trajectory:
    """Per-layer estimates ``X^0..X^K`` and pre-activations ``U^0..U^{K-1}``.

    Stored in the internal column layout; :attr:`estimates` converts back to
    the caller's shape.
    """

    X: list
    U: list
    token: tuple
    extra: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return len(self.U)

    @property
    def estimates(self) -> list:
        return [from_columns(x, self.token) for x in self.X]

    @property
    def final(self) -> np.ndarray:
        return from_columns(self.X[-1], self.token)


def _activate(params: NetworkParams, layer: dict, U: np.ndarray, M: int) -> np.ndarray:
    if params.uses_mcp:
        return mcp_prox(U, layer["theta"], layer["eta"])
    rows = U.shape[0]
    return group_soft_threshold(U.reshape(rows, -1, M), layer["theta"]).reshape(rows, -1)


def _pre_activation(params: NetworkParams, layer: dict, X, Y, S):
    v = params.variant
    if v == "lpom_gs":
        return layer["W"] @ X + layer["B"] @ Y
    R = Y - S @ X
    if v == "alpom_gs":
        return X + layer["gamma"] * (params.B_star @ R)
    return X + layer["B"] @ R


def forward(params: NetworkParams, Y_lift, S_lift, depth: int | None = None,
            validate: bool = True) -> Trajectory:
    """Run the first ``depth`` (default all ``K``) layers from ``X^0 = 0``."""
    S = np.asarray(S_lift, dtype=float)
    if validate:
        params.validate(S)
    Y, token = to_columns(Y_lift)
    if Y.shape[0] != S.shape[0]:
        raise ParameterError(f"Y has {Y.shape[0]} rows, S has {S.shape[0]}")
    depth = params.K if depth is None else depth
    if not 0 <= depth <= params.K:
        raise ParameterError(f"depth {depth} outside [0, {params.K}]")
    M = token[1]
    X = np.zeros((S.shape[1], Y.shape[1]))
    xs, us = [X], []
    for layer in params.layers[:depth]:
        U = _pre_activation(params, layer, X, Y, S)
        X = _activate(params, layer, U, M)
        us.append(U)
        xs.append(X)
    return Trajectory(xs, us, token)


def zero_grads(params: NetworkParams) -> list:
    out = []
    for layer in params.layers:
        out.append({n: (np.zeros_like(layer[n]) if n in MATRIX_LEAVES else 0.0)
                    for n in LEAVES[params.variant]})
    return out


def backward(params: NetworkParams, traj: Trajectory, Y_lift, S_lift, X_star) -> tuple[float, list]:
    """Loss ``sum ||X^depth - X*||_F^2`` and its gradient for every trainable leaf.

    ``traj`` must come from :func:`forward` on the same inputs; its depth sets
    which layer's output enters the loss.  Layers beyond that depth get zero
    gradients.
    """
    S = np.asarray(S_lift, dtype=float)
    Y, token = to_columns(Y_lift)
    Xs, _ = to_columns(X_star)
    M = token[1]
    depth = traj.K
    diff = traj.X[depth] - Xs
    loss = float(np.sum(diff * diff))
    grads = zero_grads(params)
    G = 2.0 * diff
    v = params.variant
    for k in range(depth - 1, -1, -1):
        layer, g, U, X = params.layers[k], grads[k], traj.U[k], traj.X[k]
        if params.uses_mcp:
            dU, g["theta"], g["eta"] = mcp_prox_backward(U, layer["theta"], layer["eta"], G)
        else:
            rows = U.shape[0]
            dU3, g["theta"] = group_soft_threshold_backward(
                U.reshape(rows, -1, M), layer["theta"], G.reshape(rows, -1, M))
            dU = dU3.reshape(rows, -1)
        if v == "lpom_gs":
            g["W"] = dU @ X.T
            g["B"] = dU @ Y.T
            G = layer["W"].T @ dU
        elif v == "alpom_gs":
            R = Y - S @ X
            g["gamma"] = float(np.sum(dU * (params.B_star @ R)))
            G = dU - layer["gamma"] * (S.T @ (params.B_star.T @ dU))
        else:
            R = Y - S @ X
            g["B"] = dU @ R.T
            G = dU - S.T @ (layer["B"].T @ dU)
    return loss, grads


def loss_and_grad(params: NetworkParams, Y_lift, S_lift, X_star, depth: int | None = None):
    traj = forward(params, Y_lift, S_lift, depth=depth, validate=False)
    return backward(params, traj, Y_lift, S_lift, X_star)


def grad_loss(params: NetworkParams, batch, depth: int | None = None):
    """Gradient of the summed squared-Frobenius loss over a list of samples.

    Returns ``(loss, grads)`` with ``grads`` shaped like ``params.layers``.
    """
    if not batch:
        raise ParameterError("empty batch")
    X = np.stack([s.lifted.X_lift for s in batch])
    Y = np.stack([s.lifted.Y_lift for s in batch])
    S = batch[0].lifted.S_lift
    params.validate(S)
    return loss_and_grad(params, Y, S, X, depth)


def coupling_check(params: NetworkParams, S_lift) -> float:
    """``max_k ||W^k - (I - B^k S)||_F`` for an ``lpom_gs`` network."""
    if params.variant != "lpom_gs":
        raise ParameterError(f"coupling_check applies to lpom_gs only, got {params.variant}")
    S = np.asarray(S_lift, dtype=float)
    eye = np.eye(S.shape[1])
    return max(float(np.linalg.norm(l["W"] - (eye - l["B"] @ S))) for l in params.layers)
