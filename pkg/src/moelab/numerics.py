"""Deterministic numeric primitives: seedable RNG, rank correlation, gradient
checking, and Gram-Schmidt residuals.

Everything here is 64-bit and reproducible: the generator is a counter-based
splitmix64 implemented in-repo, so identical seeds give identical draw
sequences on every platform (no dependence on platform RNGs or BLAS).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import InvalidInputError, NumericError

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64_MASK = (1 << 64) - 1


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, stream: int) -> int:
    """Derive an independent child seed from (seed, stream).

    stream 0 returns the seed itself so the documented top-level streams are
    literally seed, seed^1, seed^2, ...; larger tags are mixed so per-step
    derivations do not collide with them.
    """
    if stream < 8:
        return (seed ^ stream) & _U64_MASK
    z = ((seed & _U64_MASK) + stream * int(_GAMMA)) & _U64_MASK
    arr = _mix64(np.array([z], dtype=np.uint64))
    return int(arr[0])


class Rng:
    """Counter-based splitmix64 stream.

    State advances by a fixed odd gamma per draw; each output is a bijective
    mix of the counter, so n draws can be produced as one vectorized batch
    without changing the sequence.
    """

    def __init__(self, seed: int):
        # state kept as a plain int so 64-bit wraparound is explicit
        self._state = seed & _U64_MASK

    def u64(self, n: int) -> np.ndarray:
        if n < 0:
            raise InvalidInputError("draw count must be >= 0")
        with np.errstate(over="ignore"):
            counters = np.uint64(self._state) + _GAMMA * np.arange(1, n + 1, dtype=np.uint64)
            out = _mix64(counters)
        self._state = (self._state + int(_GAMMA) * n) & _U64_MASK
        return out

    def uniform(self, lo: float = 0.0, hi: float = 1.0, size: int | None = None):
        """Uniform draws in [lo, hi). Scalar when size is None."""
        if not hi >= lo:
            raise InvalidInputError(f"uniform bounds out of order: [{lo}, {hi})")
        n = 1 if size is None else size
        u = (self.u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        out = lo + (hi - lo) * u
        return float(out[0]) if size is None else out

    def normal(self, mu: float = 0.0, sigma: float = 1.0, size: int | None = None):
        """Gaussian draws via Box-Muller (deterministic pairing)."""
        if sigma < 0:
            raise InvalidInputError("sigma must be >= 0")
        n = 1 if size is None else size
        pairs = (n + 1) // 2
        raw = self.u64(2 * pairs)
        # u1 in (0, 1] so the log is finite; u2 in [0, 1)
        u1 = ((raw[:pairs] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (raw[pairs:] >> np.uint64(11)).astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        out = mu + sigma * z[:n]
        return float(out[0]) if size is None else out

    def integers(self, lo: int, hi: int, size: int | None = None):
        """Integer draws in [lo, hi). Scalar when size is None."""
        if hi <= lo:
            raise InvalidInputError(f"integer bounds out of order: [{lo}, {hi})")
        n = 1 if size is None else size
        span = np.uint64(hi - lo)
        out = (self.u64(n) % span).astype(np.int64) + lo
        return int(out[0]) if size is None else out

    def permutation(self, n: int) -> np.ndarray:
        """Random permutation of range(n) by sorting uniform keys."""
        keys = self.u64(n)
        return np.argsort(keys, kind="stable")


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Spearman rank correlation with average ranks for ties."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1 or x.shape != y.shape:
        raise InvalidInputError("spearman needs two equal-length 1-d sequences")
    if x.size < 2:
        raise InvalidInputError("spearman needs at least 2 points")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise NumericError("spearman input contains non-finite values")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    denom = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    if denom == 0.0:
        raise InvalidInputError("spearman undefined for a constant sequence")
    return float((rx * ry).sum() / denom)


def _average_ranks(v: np.ndarray) -> np.ndarray:
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    sorted_v = v[order]
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        # ranks are 1-based; a tie block gets the mean of its positions
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def grad_check(
    f: Callable[[np.ndarray], float],
    x0: np.ndarray,
    analytic: np.ndarray,
    eps: float = 1e-5,
    max_coords: int = 256,
    seed: int = 0,
    scale_floor: float = 1e-5,
) -> float:
    """Max relative error between central differences and an analytic gradient.

    Checks at most max_coords coordinates, sampled without replacement when x0
    is larger. Relative error per coordinate is
    |fd - analytic| / max(|fd|, |analytic|, scale_floor).

    The floor absorbs the difference quotient's own noise: central differences
    on a 64-bit function carry ~eps_machine/eps absolute error, so coordinates
    whose gradient is below the floor are effectively tested in absolute terms
    at tolerance * scale_floor, which still flags any structurally wrong
    gradient while not failing on roundoff.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    if x0.shape != analytic.shape or x0.ndim != 1:
        raise InvalidInputError("grad_check needs flat x0 and analytic of equal shape")
    if eps <= 0:
        raise InvalidInputError("eps must be > 0")
    n = x0.size
    if n <= max_coords:
        coords = np.arange(n)
    else:
        coords = Rng(seed).permutation(n)[:max_coords]
    worst = 0.0
    for i in coords:
        xp = x0.copy()
        xp[i] += eps
        xm = x0.copy()
        xm[i] -= eps
        fd = (f(xp) - f(xm)) / (2.0 * eps)
        err = abs(fd - analytic[i]) / max(abs(fd), abs(analytic[i]), scale_floor)
        worst = max(worst, err)
    return worst


def gram_schmidt(
    v: np.ndarray,
    basis: Sequence[np.ndarray],
    rng: Rng,
    eps: float = 1e-6,
) -> np.ndarray:
    """Residual of v after removing its projections onto the basis vectors.

    The basis is orthonormalized internally (in order) before projecting, so
    the residual is orthogonal to every input vector even when the inputs are
    not mutually orthogonal. If the residual norm falls below eps the vector
    was (numerically) in the span and a fresh random unit vector is returned.
    """
    v = np.asarray(v, dtype=np.float64).copy()
    ortho: list[np.ndarray] = []
    for b in basis:
        b = np.asarray(b, dtype=np.float64)
        if b.shape != v.shape:
            raise InvalidInputError("basis vector shape mismatch")
        q = b.copy()
        for u in ortho:
            q -= (q @ u) * u
        norm = np.linalg.norm(q)
        if norm > 1e-300:
            ortho.append(q / norm)
    for u in ortho:
        v -= (v @ u) * u
    if np.linalg.norm(v) < eps:
        fresh = rng.normal(0.0, 1.0, size=v.size)
        return fresh / np.linalg.norm(fresh)
    return v
