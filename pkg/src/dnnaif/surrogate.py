"""Residual-network surrogate: forward pass, exact gradients, training.

The surrogate maps a normalized input through a stack of residual blocks

    y_1     = G_0 relu(K_0 x + b_0)
    y_{j+1} = y_j + G_j relu(K_j y_j + b_j)      j = 1 .. N-2
    y_N     = K_{N-1} y_{N-1} + b_{N-1}

with G_j either alpha*I or -alpha*K_j^T (the first block always uses
alpha*I so shapes stay rectangular when input and hidden widths differ).
A head turns y_N into a scalar, and stored affine maps translate between
raw data and the normalized space the network actually sees.

All gradients are hand-written reverse mode over the whole batch; there is
no autodiff dependency.  relu takes subgradient 0 at 0.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyDataset,
    HeadMismatch,
    NonFiniteLoss,
)

ACTIVATIONS = ("relu",)
G_MODES = ("alpha-identity", "neg-alpha-k-transpose")
HEADS = ("scalar-linear", "half-squared-norm")
NORMALIZATIONS = ("standardize", "identity")


@dataclass(frozen=True)
class Architecture:
    """Shape and wiring of the residual surrogate."""

    input_dim: int
    hidden_dim: int
    depth: int
    activation: str = "relu"
    g_mode: str = "alpha-identity"
    alpha: float = 1.0
    head: str = "scalar-linear"
    output_dim: int = 1

    def __post_init__(self) -> None:
        if self.input_dim < 1 or self.hidden_dim < 1 or self.output_dim < 1:
            raise ValueError("dimensions must be positive")
        if self.depth < 2:
            raise ValueError("depth must be at least 2")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation: {self.activation!r}")
        if self.g_mode not in G_MODES:
            raise ValueError(f"unknown g_mode: {self.g_mode!r}")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.head not in HEADS:
            raise ValueError(f"unknown head: {self.head!r}")
        if self.head == "scalar-linear" and self.output_dim != 1:
            raise HeadMismatch("scalar-linear head requires output_dim = 1")


@dataclass
class NetworkParams:
    """Trainable arrays plus the fitted input/target affine maps.

    The normalization maps start as identities and are refit from data on
    every (re)training, so a freshly built network computes the raw
    formulas above verbatim.
    """

    arch: Architecture
    K: list[np.ndarray]
    b: list[np.ndarray]
    x_shift: np.ndarray = field(default=None)  # type: ignore[assignment]
    x_scale: np.ndarray = field(default=None)  # type: ignore[assignment]
    f_shift: float = 0.0
    f_scale: float = 1.0
    diverged: bool = False

    def __post_init__(self) -> None:
        if self.x_shift is None:
            self.x_shift = np.zeros(self.arch.input_dim)
        if self.x_scale is None:
            self.x_scale = np.ones(self.arch.input_dim)
        n, H, m, N = (
            self.arch.input_dim,
            self.arch.hidden_dim,
            self.arch.output_dim,
            self.arch.depth,
        )
        expected = [(H, n)] + [(H, H)] * (N - 2) + [(m, H)]
        got = [k.shape for k in self.K]
        if got != expected:
            raise DimensionMismatch(f"K shapes {got} do not match {expected}")
        expected_b = [(H,)] * (N - 1) + [(m,)]
        if [v.shape for v in self.b] != expected_b:
            raise DimensionMismatch("bias shapes do not match architecture")

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            arch=self.arch,
            K=[k.copy() for k in self.K],
            b=[v.copy() for v in self.b],
            x_shift=self.x_shift.copy(),
            x_scale=self.x_scale.copy(),
            f_shift=self.f_shift,
            f_scale=self.f_scale,
            diverged=self.diverged,
        )


@dataclass(frozen=True)
class TrainingConfig:
    """Mini-batch gradient-descent hyperparameters."""

    iterations: int = 1000
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    warm_start: bool = True
    input_normalization: str = "standardize"
    target_normalization: str = "standardize"

    def __post_init__(self) -> None:
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.input_normalization not in NORMALIZATIONS:
            raise ValueError(f"unknown input normalization: {self.input_normalization!r}")
        if self.target_normalization not in NORMALIZATIONS:
            raise ValueError(f"unknown target normalization: {self.target_normalization!r}")


def init_network(arch: Architecture, seed: int) -> NetworkParams:
    """Fresh parameters: K ~ N(0, 1/fan_in), b = 0, identity affine maps."""
    rng = np.random.default_rng(seed)
    n, H, m, N = arch.input_dim, arch.hidden_dim, arch.output_dim, arch.depth
    shapes = [(H, n)] + [(H, H)] * (N - 2) + [(m, H)]
    K = [rng.standard_normal(s) / np.sqrt(s[1]) for s in shapes]
    b = [np.zeros(H) for _ in range(N - 1)] + [np.zeros(m)]
    return NetworkParams(arch=arch, K=K, b=b)


def _check_input(theta: NetworkParams, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != theta.arch.input_dim:
        raise DimensionMismatch(
            f"expected inputs of width {theta.arch.input_dim}, got shape {X.shape}"
        )
    return X


def _forward_cached(theta: NetworkParams, X: np.ndarray) -> dict:
    """Batch forward pass keeping every intermediate needed for backprop."""
    arch = theta.arch
    a = arch.alpha
    Xn = (X - theta.x_shift) / theta.x_scale
    U0 = Xn @ theta.K[0].T + theta.b[0]
    masks = [U0 > 0]
    T = np.where(masks[0], U0, 0.0)
    Y = [a * T]  # y_1; the first block always applies alpha * identity
    for j in range(1, arch.depth - 1):
        Uj = Y[-1] @ theta.K[j].T + theta.b[j]
        masks.append(Uj > 0)
        Tj = np.where(masks[-1], Uj, 0.0)
        if arch.g_mode == "alpha-identity":
            Y.append(Y[-1] + a * Tj)
        else:
            Y.append(Y[-1] - a * (Tj @ theta.K[j]))
    V = Y[-1] @ theta.K[-1].T + theta.b[-1]
    return {"Xn": Xn, "masks": masks, "Y": Y, "V": V}


def forward(theta: NetworkParams, x: np.ndarray) -> np.ndarray:
    """The m-vector y_N at a single input."""
    X = _check_input(theta, x)
    return _forward_cached(theta, X)["V"][0]


def _head_values(theta: NetworkParams, V: np.ndarray) -> np.ndarray:
    if theta.arch.head == "scalar-linear":
        if theta.arch.output_dim != 1:
            raise HeadMismatch("scalar-linear head requires output_dim = 1")
        return V[:, 0]
    return 0.5 * np.sum(V * V, axis=1)


def surrogate_values(theta: NetworkParams, X: np.ndarray) -> np.ndarray:
    """Surrogate predictions in raw target units, one per input row."""
    X = _check_input(theta, X)
    cache = _forward_cached(theta, X)
    return theta.f_shift + theta.f_scale * _head_values(theta, cache["V"])


def surrogate_value(theta: NetworkParams, x: np.ndarray) -> float:
    """Scalar surrogate prediction at a single point, in raw target units."""
    return float(surrogate_values(theta, np.asarray(x, dtype=float)[None, :])[0])


def _backward(
    theta: NetworkParams, cache: dict, dV: np.ndarray, want_params: bool
) -> tuple[np.ndarray, list[np.ndarray] | None, list[np.ndarray] | None]:
    """Shared reverse sweep.  dV is the upstream gradient at y_N (B x m).

    Returns (dXn, dK, db); parameter gradients are skipped when only the
    input gradient is needed.
    """
    arch = theta.arch
    a = arch.alpha
    Y, masks = cache["Y"], cache["masks"]
    N = arch.depth
    dK: list[np.ndarray] | None = [None] * N if want_params else None
    db: list[np.ndarray] | None = [None] * N if want_params else None

    if want_params:
        dK[N - 1] = dV.T @ Y[-1]
        db[N - 1] = dV.sum(axis=0)
    dY = dV @ theta.K[-1]
    for j in range(N - 2, 0, -1):
        if arch.g_mode == "alpha-identity":
            dU = a * dY * masks[j]
        else:
            dU = -a * (dY @ theta.K[j].T) * masks[j]
            if want_params:
                # direct K_j factor in y_{j+1} = y_j - a * relu(U_j) K_j
                Tj = np.where(masks[j], Y[j - 1] @ theta.K[j].T + theta.b[j], 0.0)
                dK[j] = -a * (Tj.T @ dY)
        if want_params:
            contrib = dU.T @ Y[j - 1]
            dK[j] = contrib if dK[j] is None else dK[j] + contrib
            db[j] = dU.sum(axis=0)
        dY = dY + dU @ theta.K[j]
    dU0 = a * dY * masks[0]
    if want_params:
        dK[0] = dU0.T @ cache["Xn"]
        db[0] = dU0.sum(axis=0)
    dXn = dU0 @ theta.K[0]
    return dXn, dK, db


def _head_backward(theta: NetworkParams, V: np.ndarray, dhead: np.ndarray) -> np.ndarray:
    """Upstream gradient at V given gradient dhead at the head output."""
    if theta.arch.head == "scalar-linear":
        return dhead[:, None]
    return dhead[:, None] * V


def grad_x(theta: NetworkParams, x: np.ndarray) -> np.ndarray:
    """Exact gradient of the raw-unit surrogate value at a single point."""
    X = _check_input(theta, x)
    cache = _forward_cached(theta, X)
    dV = _head_backward(theta, cache["V"], np.ones(1))
    dXn, _, _ = _backward(theta, cache, dV, want_params=False)
    return theta.f_scale * dXn[0] / theta.x_scale


def _normalized_targets(theta: NetworkParams, f: np.ndarray) -> np.ndarray:
    return (f - theta.f_shift) / theta.f_scale


def _check_dataset(theta: NetworkParams, X: np.ndarray, f: np.ndarray):
    X = np.asarray(X, dtype=float)
    f = np.asarray(f, dtype=float)
    if X.ndim != 2 or X.shape[0] != f.shape[0]:
        raise DimensionMismatch("X rows must align with f entries")
    if X.shape[0] == 0:
        raise EmptyDataset("need at least one sample")
    if X.shape[1] != theta.arch.input_dim:
        raise DimensionMismatch(
            f"expected inputs of width {theta.arch.input_dim}, got {X.shape[1]}"
        )
    return X, f


def loss(theta: NetworkParams, X: np.ndarray, f: np.ndarray) -> float:
    """Half mean squared residual, in normalized target space."""
    X, f = _check_dataset(theta, X, f)
    cache = _forward_cached(theta, X)
    pred = _head_values(theta, cache["V"])
    resid = _normalized_targets(theta, f) - pred
    return float(0.5 * np.mean(resid * resid))


def grad_theta(theta: NetworkParams, X: np.ndarray, f: np.ndarray) -> dict:
    """Gradient of loss() with respect to every K and b array."""
    X, f = _check_dataset(theta, X, f)
    B = X.shape[0]
    cache = _forward_cached(theta, X)
    pred = _head_values(theta, cache["V"])
    resid = _normalized_targets(theta, f) - pred
    dhead = -resid / B
    dV = _head_backward(theta, cache["V"], dhead)
    _, dK, db = _backward(theta, cache, dV, want_params=True)
    return {"K": dK, "b": db}


def _fit_normalization(theta: NetworkParams, X: np.ndarray, f: np.ndarray, cfg: TrainingConfig) -> None:
    if cfg.input_normalization == "standardize":
        theta.x_shift = X.mean(axis=0)
        scale = X.std(axis=0)
        theta.x_scale = np.where(scale > 0, scale, 1.0)
    else:
        theta.x_shift = np.zeros(theta.arch.input_dim)
        theta.x_scale = np.ones(theta.arch.input_dim)
    if cfg.target_normalization == "standardize":
        theta.f_shift = float(f.mean())
        scale = float(f.std())
        theta.f_scale = scale if scale > 0 else 1.0
    else:
        theta.f_shift, theta.f_scale = 0.0, 1.0


def train(
    theta: NetworkParams, X: np.ndarray, f: np.ndarray, cfg: TrainingConfig
) -> NetworkParams:
    """Mini-batch gradient descent on loss(); returns new parameters.

    Batches are drawn without replacement within an epoch and the order is
    reshuffled every epoch.  Normalization maps are refit from the data
    before the first step.  A non-finite loss aborts training and returns
    the last finite parameters with the diverged flag raised.
    """
    X, f = _check_dataset(theta, X, f)
    if cfg.iterations == 0:
        return theta.copy()
    params = theta.copy() if cfg.warm_start else init_network(theta.arch, cfg.seed)
    params.diverged = False
    _fit_normalization(params, X, f, cfg)
    rng = np.random.default_rng(cfg.seed)
    B = X.shape[0]
    bsz = min(cfg.batch_size, B)
    order = rng.permutation(B)
    pos = 0
    last_good = params.copy()
    for _ in range(cfg.iterations):
        if pos >= B:
            order = rng.permutation(B)
            pos = 0
        idx = order[pos : pos + bsz]
        pos += bsz
        Xb, fb = X[idx], f[idx]
        with np.errstate(over="ignore", invalid="ignore"):
            cache = _forward_cached(params, Xb)
            pred = _head_values(params, cache["V"])
            resid = (fb - params.f_shift) / params.f_scale - pred
            step_loss = 0.5 * float(np.mean(resid * resid))
            if not np.isfinite(step_loss):
                last_good.diverged = True
                return last_good
            dhead = -resid / len(idx)
            dV = _head_backward(params, cache["V"], dhead)
            _, dK, db = _backward(params, cache, dV, want_params=True)
        last_good = params.copy()
        for j in range(params.arch.depth):
            params.K[j] -= cfg.learning_rate * dK[j]
            params.b[j] -= cfg.learning_rate * db[j]
        if not all(np.all(np.isfinite(k)) for k in params.K):
            last_good.diverged = True
            return last_good
    return params


def save_params(theta: NetworkParams, path: str | os.PathLike) -> None:
    """Checkpoint to JSON; floats use shortest-exact repr (bit-exact reload)."""
    payload = {
        "arch": dataclasses.asdict(theta.arch),
        "K": [k.tolist() for k in theta.K],
        "b": [v.tolist() for v in theta.b],
        "x_shift": theta.x_shift.tolist(),
        "x_scale": theta.x_scale.tolist(),
        "f_shift": theta.f_shift,
        "f_scale": theta.f_scale,
        "diverged": theta.diverged,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_params(path: str | os.PathLike) -> NetworkParams:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    arch = Architecture(**payload["arch"])
    return NetworkParams(
        arch=arch,
        K=[np.asarray(k, dtype=float) for k in payload["K"]],
        b=[np.asarray(v, dtype=float) for v in payload["b"]],
        x_shift=np.asarray(payload["x_shift"], dtype=float),
        x_scale=np.asarray(payload["x_scale"], dtype=float),
        f_shift=float(payload["f_shift"]),
        f_scale=float(payload["f_scale"]),
        diverged=bool(payload["diverged"]),
    )
