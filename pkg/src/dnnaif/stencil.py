"""Search-direction sets, stencil geometry, and the gradient bound at failure."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyInput

KINDS = ("coordinate", "sphere-uniform", "rademacher")


@dataclass(frozen=True)
class DirectionSet:
    """An ordered matrix of search directions, one per row."""

    directions: np.ndarray  # (count, n)
    kind: str

    def __post_init__(self) -> None:
        d = np.asarray(self.directions, dtype=float)
        if d.ndim != 2:
            raise ValueError("directions must be a 2-d array (count, n)")
        if self.kind not in KINDS:
            raise ValueError(f"unknown direction kind: {self.kind!r}")
        object.__setattr__(self, "directions", d)

    @property
    def count(self) -> int:
        return self.directions.shape[0]

    @property
    def n(self) -> int:
        return self.directions.shape[1]


@dataclass(frozen=True)
class Stencil:
    """A center, a radius, and the directions that fan out from it."""

    center: np.ndarray
    radius: float
    dirs: DirectionSet

    def __post_init__(self) -> None:
        c = np.asarray(self.center, dtype=float)
        if self.radius <= 0:
            raise ValueError("stencil radius must be positive")
        if c.shape != (self.dirs.n,):
            raise DimensionMismatch(
                f"center has shape {c.shape}, directions have length {self.dirs.n}"
            )
        object.__setattr__(self, "center", c)

    def points(self) -> np.ndarray:
        return stencil_points(self.center, self.radius, self.dirs)


def _as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def coordinate_directions(n: int) -> DirectionSet:
    """The 2n axis directions [e_1..e_n, -e_1..-e_n]."""
    if n < 1:
        raise ValueError("n must be positive")
    eye = np.eye(n)
    return DirectionSet(np.vstack([eye, -eye]), "coordinate")


def sphere_directions(n: int, n_s: int, rng) -> DirectionSet:
    """n_s directions drawn uniformly on the unit sphere in R^n."""
    if n < 1 or n_s < 1:
        raise ValueError("n and n_s must be positive")
    gen = _as_generator(rng)
    raw = gen.standard_normal((n_s, n))
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    # A zero draw has probability zero; resample defensively anyway.
    while np.any(norms == 0.0):
        bad = norms[:, 0] == 0.0
        raw[bad] = gen.standard_normal((int(bad.sum()), n))
        norms = np.linalg.norm(raw, axis=1, keepdims=True)
    return DirectionSet(raw / norms, "sphere-uniform")


def rademacher_directions(n: int, n_s: int, rng) -> DirectionSet:
    """n_s sign vectors with entries ±1/√n (unit norm by construction)."""
    if n < 1 or n_s < 1:
        raise ValueError("n and n_s must be positive")
    gen = _as_generator(rng)
    signs = gen.integers(0, 2, size=(n_s, n)) * 2 - 1
    return DirectionSet(signs / np.sqrt(n), "rademacher")


def stencil_points(x: np.ndarray, h: float, W: DirectionSet) -> np.ndarray:
    """The points x + h*w_j, one per direction, in direction order."""
    x = np.asarray(x, dtype=float)
    if h <= 0:
        raise ValueError("h must be positive")
    if W.count and x.shape != (W.n,):
        raise DimensionMismatch(
            f"center has shape {x.shape}, directions have length {W.n}"
        )
    if W.count == 0:
        return np.empty((0, x.shape[0]))
    return x[None, :] + h * W.directions


def _nnls_active_set(A: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Exact nonnegative least squares by active-set pivoting.

    Fallback for cone faces where projected gradient stalls (the optimal
    coefficients grow unboundedly as a cone gap approaches a half-space).
    Columns enter the passive set one at a time, so the least-squares
    subproblems stay full rank at these sizes.
    """
    n, m = A.shape
    c = np.zeros(m)
    passive: list[int] = []
    for _ in range(3 * m + 10):
        w = A.T @ (v - A @ c)
        candidates = [j for j in range(m) if j not in passive]
        if not candidates:
            break
        j_best = max(candidates, key=lambda j: w[j])
        if w[j_best] <= 1e-13:
            break
        passive.append(j_best)
        while True:
            sol, *_ = np.linalg.lstsq(A[:, passive], v, rcond=None)
            if np.all(sol > 0.0):
                c = np.zeros(m)
                c[passive] = sol
                break
            cur = c[passive]
            steps = [
                cur[i] / (cur[i] - sol[i])
                for i in range(len(passive))
                if sol[i] <= 0.0 and cur[i] != sol[i]
            ]
            alpha = min(steps) if steps else 0.0
            cur = cur + alpha * (sol - cur)
            c = np.zeros(m)
            keep = cur > 1e-12
            c[np.asarray(passive)[keep]] = cur[keep]
            passive = [p for p, k in zip(passive, keep) if k]
            if not passive:
                break
    return c


def _nnls_residual(A: np.ndarray, v: np.ndarray, tol: float, max_iter: int = 500) -> float:
    """Residual 2-norm of min ||A c - v|| over c >= 0.

    A is (n, count): columns are the directions.  Primary route is
    accelerated projected gradient (momentum with restart on objective
    increase), step 1/L with L = largest eigenvalue of A^T A.  If that
    stalls above tol, the exact active-set solve settles the question.
    """
    AtA = A.T @ A
    Atv = A.T @ v
    L = float(np.linalg.eigvalsh(AtA)[-1])
    if L == 0.0:
        return float(np.linalg.norm(v))

    def r2(c: np.ndarray) -> float:
        return float(c @ (AtA @ c) - 2 * (Atv @ c) + v @ v)

    c = np.zeros(A.shape[1])
    y = c
    t = 1.0
    prev = r2(c)
    for _ in range(max_iter):
        c_new = np.maximum(0.0, y - (AtA @ y - Atv) / L)
        cur = r2(c_new)
        if cur > prev:
            # momentum overshot: restart from the last good iterate
            y, t = c, 1.0
            continue
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = c_new + ((t - 1.0) / t_new) * (c_new - c)
        c, t = c_new, t_new
        if prev - cur < tol * tol * 1e-4:
            prev = cur
            break
        prev = cur
    residual = float(np.linalg.norm(A @ c - v))
    if residual <= tol:
        return residual
    exact = _nnls_active_set(A, v)
    return min(residual, float(np.linalg.norm(A @ exact - v)))


def is_positive_spanning(W: DirectionSet, tol: float = 1e-10) -> bool:
    """Whether nonnegative combinations of W's directions cover R^n.

    Checks that each of ±e_i lies in the cone within residual tol; this is
    necessary and sufficient because those targets positively span R^n.
    """
    if W.count == 0:
        raise EmptyInput("direction set is empty")
    A = W.directions.T  # (n, count)
    n = W.n
    for i in range(n):
        for sign in (1.0, -1.0):
            target = np.zeros(n)
            target[i] = sign
            if _nnls_residual(A, target, tol) > tol:
                return False
    return True


def kappa_coordinate(n: int) -> float:
    """Spanning-set condition number of the 2n axis directions: √n."""
    if n < 1:
        raise ValueError("n must be positive")
    return float(np.sqrt(n))


def noise_local_norm(phi_values) -> float:
    """Largest absolute noise value over a center-plus-stencil sample."""
    arr = np.asarray(phi_values, dtype=float)
    if arr.size == 0:
        raise EmptyInput("need at least one noise value")
    return float(np.max(np.abs(arr)))


def stencil_failure_bound(kappa: float, L: float, h: float, phi_norm: float) -> float:
    """Gradient-norm bound that holds at a stencil failure: κ(Lh/2 + φ/h)."""
    if kappa < 1:
        raise ValueError("kappa must be >= 1")
    if L < 0:
        raise ValueError("L must be nonnegative")
    if h <= 0:
        raise ValueError("h must be positive")
    if phi_norm < 0:
        raise ValueError("phi_norm must be nonnegative")
    return kappa * (L * h / 2.0 + phi_norm / h)
