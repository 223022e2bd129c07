"""CP and Tucker decompositions, unconstrained and non-negative.

* ``CP``  -- alternating least squares on the normal equations.
* ``NCP`` -- hierarchical ALS: each factor column is the exact non-negative
  least-squares minimizer given everything else, so the objective never
  increases between sweeps.
* ``TD``  -- higher-order orthogonal iteration started from truncated SVDs of
  the unfoldings.
* ``NTD`` -- factor columns by hierarchical ALS, core by multiplicative update.

CP factors always leave a sweep with unit-norm columns and the scale in
``weights``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError
from .tensor import (fold, khatri_rao_all, leading_left_vectors, mttkrp,
                     multi_mode_product, truncated_svd, unfold)

log = logging.getLogger(__name__)

METHODS = ("CP", "NCP", "TD", "NTD")
_EPS = np.finfo(np.float64).tiny


@dataclass(frozen=True)
class DecompConfig:
    method: str = "NCP"
    rank: int | tuple[int, ...] = 20
    max_iters: int = 500
    tol: float = 1e-8
    seed: int = 0
    init: str = "svd"

    def __post_init__(self):
        method = self.method.upper()
        if method not in METHODS:
            raise InvalidArgumentError(f"unknown decomposition method {self.method!r}")
        object.__setattr__(self, "method", method)
        rank = self.rank
        if isinstance(rank, (list, tuple)):
            rank = tuple(int(r) for r in rank)
            if method in ("CP", "NCP"):
                if len(set(rank)) != 1:
                    raise InvalidArgumentError("CP rank must be a single integer")
                rank = rank[0]
        else:
            rank = int(rank)
        object.__setattr__(self, "rank", rank)
        if min(np.atleast_1d(rank)) < 1:
            raise InvalidArgumentError("ranks must be >= 1")
        if self.max_iters < 1:
            raise InvalidArgumentError("max_iters must be >= 1")
        if self.init not in ("svd", "random", "gevd"):
            raise InvalidArgumentError(f"unknown init {self.init!r}")

    @property
    def nonneg(self) -> bool:
        return self.method in ("NCP", "NTD")

    @property
    def is_cp(self) -> bool:
        return self.method in ("CP", "NCP")

    def tucker_ranks(self, shape: Sequence[int]) -> tuple[int, ...]:
        """Per-mode ranks for ``shape``; a single integer is clipped to each extent."""
        if isinstance(self.rank, tuple):
            if len(self.rank) != len(shape):
                raise InvalidArgumentError(
                    f"{len(self.rank)} ranks given for a tensor of order {len(shape)}")
            for r, n in zip(self.rank, shape):
                if r > n:
                    raise InvalidArgumentError(f"rank {r} exceeds extent {n}")
            return self.rank
        return tuple(min(self.rank, n) for n in shape)


@dataclass
class CpFactors:
    weights: np.ndarray
    factors: list[np.ndarray]
    fit_error: float = 0.0
    n_iters: int = 0
    errors: list[float] = field(default_factory=list)

    @property
    def rank(self) -> int:
        return self.weights.size

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(a.shape[0] for a in self.factors)


@dataclass
class TuckerFactors:
    core: np.ndarray
    factors: list[np.ndarray]
    fit_error: float = 0.0
    n_iters: int = 0
    errors: list[float] = field(default_factory=list)

    @property
    def ranks(self) -> tuple[int, ...]:
        return self.core.shape

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(a.shape[0] for a in self.factors)


def reconstruct(f: CpFactors | TuckerFactors) -> np.ndarray:
    """Dense tensor represented by ``f``."""
    if isinstance(f, CpFactors):
        others = f.factors[1:][::-1]
        head = f.factors[0] * f.weights
        if not others:
            return head.sum(axis=1)
        return fold(head @ khatri_rao_all(others).T, 1, f.shape)
    return multi_mode_product(f.core, f.factors)


def fit_error(t: np.ndarray, f: CpFactors | TuckerFactors) -> float:
    """Relative Frobenius error ``||t - reconstruct(f)|| / max(||t||, eps)``."""
    t = np.asarray(t, dtype=np.float64)
    if tuple(t.shape) != f.shape:
        raise InvalidArgumentError(f"factor shape {f.shape} does not match tensor {t.shape}")
    return _rel_error(t, reconstruct(f), np.linalg.norm(t))


def _rel_error(t, approx, norm_t) -> float:
    return float(np.linalg.norm(t - approx) / max(norm_t, _EPS))


def _check_input(t, cfg: DecompConfig) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim < 2:
        raise InvalidArgumentError("tensor order must be >= 2")
    if not np.all(np.isfinite(t)):
        raise InvalidArgumentError("tensor contains non-finite entries")
    if cfg.nonneg and np.any(t < 0):
        raise InvalidArgumentError("non-negative decomposition of a tensor with negative entries")
    return t


def _unit_columns(m: np.ndarray, rng) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(m, axis=0)
    dead = norms <= _EPS
    if np.any(dead):
        m = m.copy()
        m[:, dead] = rng.uniform(size=(m.shape[0], int(dead.sum())))
        m[:, dead] /= np.linalg.norm(m[:, dead], axis=0)
        norms = np.where(dead, 0.0, norms)
        log.info("reseeded %d collapsed factor column(s)", int(dead.sum()))
    return m / np.where(dead, 1.0, norms), norms


def _init_factor(t, mode, r, cfg, rng) -> np.ndarray:
    n = t.shape[mode - 1]
    if cfg.init == "random":
        return rng.uniform(size=(n, r))
    u = leading_left_vectors(unfold(t, mode), r)
    if u.shape[1] < r:
        u = np.hstack([u, rng.uniform(size=(n, r - u.shape[1]))])
    return np.abs(u) if cfg.nonneg else u


def _converged(errors: list[float], tol: float) -> bool:
    if errors[-1] <= 1e-15:
        return True
    return len(errors) > 1 and abs(errors[-2] - errors[-1]) < tol


def cp_decompose(t: np.ndarray, cfg: DecompConfig) -> CpFactors:
    """CP (ALS) or NCP (hierarchical ALS) decomposition with ``cfg.rank`` components."""
    if not cfg.is_cp:
        raise InvalidArgumentError(f"cp_decompose cannot run method {cfg.method}")
    t = _check_input(t, cfg)
    rng = np.random.default_rng(cfg.seed)
    r = cfg.rank
    norm_t = np.linalg.norm(t)
    start = _gevd_init(t, r) if cfg.init == "gevd" and norm_t > 0 else None
    if start is None:
        start = [_init_factor(t, mode, r, cfg, rng) for mode in range(1, t.ndim + 1)]
    elif cfg.nonneg:
        start = [np.abs(a) for a in start]
    factors = []
    for a in start:
        a, _ = _unit_columns(a, rng)
        factors.append(a)
    if norm_t == 0.0:
        return CpFactors(np.zeros(r), factors, 0.0, 0, [0.0])

    weights = _initial_weights(t, factors, cfg.nonneg)
    errors: list[float] = []
    it = 0
    for it in range(1, cfg.max_iters + 1):
        prev_w, prev_f = weights.copy(), [a.copy() for a in factors]
        for n in range(t.ndim):
            gram = np.ones((r, r))
            for m, a in enumerate(factors):
                if m != n:
                    gram *= a.T @ a
            rhs = mttkrp(t, factors, n + 1)
            if cfg.nonneg:
                u = factors[n] * weights
                for c in range(r):
                    if gram[c, c] <= _EPS:
                        continue
                    step = (rhs[:, c] - u @ gram[:, c]) / gram[c, c]
                    u[:, c] = np.maximum(0.0, u[:, c] + step)
            else:
                u = np.linalg.lstsq(gram, rhs.T, rcond=None)[0].T
            factors[n], weights = _unit_columns(u, rng)
        err = _rel_error(t, reconstruct(CpFactors(weights, factors)), norm_t)
        if it > 2:
            # extrapolate along the last sweep; kept only if the fit improves
            step = it ** (1.0 / 3.0)
            cand = [p + step * (a - p) for p, a in
                    zip([prev_f[0] * prev_w] + prev_f[1:], [factors[0] * weights] + factors[1:])]
            if cfg.nonneg:
                cand = [np.maximum(c, 0.0) for c in cand]
            w_c = np.ones(r)
            for k, c in enumerate(cand):
                cand[k], norms = _unit_columns(c, rng)
                w_c = w_c * norms
            err_c = _rel_error(t, reconstruct(CpFactors(w_c, cand)), norm_t)
            if err_c < err:
                factors, weights, err = cand, w_c, err_c
        errors.append(err)
        if _converged(errors, cfg.tol):
            break
    return CpFactors(weights, factors, errors[-1], it, errors)


def _initial_weights(t, factors, nonneg: bool) -> np.ndarray:
    """Least-squares scales for fixed unit-norm factors (non-negative if required)."""
    gram = np.ones((factors[0].shape[1],) * 2)
    for a in factors:
        gram *= a.T @ a
    rhs = (mttkrp(t, factors, 1) * factors[0]).sum(axis=0)
    if nonneg:
        from scipy.optimize import nnls
        w = nnls(gram, rhs)[0]
    else:
        w = np.linalg.lstsq(gram, rhs, rcond=None)[0]
    return w if np.any(w) else np.ones_like(w)


def _gevd_init(t: np.ndarray, r: int) -> list[np.ndarray] | None:
    """Algebraic CP start from a generalized eigendecomposition of two slices.

    Needs the two largest modes to have extent >= r and the remaining modes
    together >= 2; exact for noise-free tensors of rank r with full-column-rank
    factors.  Returns ``None`` when not applicable.
    """
    order = sorted(range(t.ndim), key=lambda k: -t.shape[k])
    a, b, rest = order[0], order[1], sorted(order[2:])
    rest_shape = tuple(t.shape[k] for k in rest)
    nc = int(np.prod(rest_shape)) if rest else 1
    if t.shape[b] < r or nc < 2:
        return None
    m = np.moveaxis(t, [a, b] + rest, range(t.ndim)).reshape(t.shape[a], t.shape[b], nc)
    ua = leading_left_vectors(m.reshape(t.shape[a], -1), r)
    ub = leading_left_vectors(np.moveaxis(m, 1, 0).reshape(t.shape[b], -1), r)
    uc = leading_left_vectors(np.moveaxis(m, 2, 0).reshape(nc, -1), 2)
    core = np.einsum("ijk,ir,js,kt->rst", m, ua, ub, uc)
    try:
        _, vecs = np.linalg.eig(core[:, :, 0] @ np.linalg.pinv(core[:, :, 1]))
    except np.linalg.LinAlgError:
        return None
    fa = ua @ np.real(vecs)
    if np.linalg.matrix_rank(fa) < r:
        return None
    # remaining factors from the pseudo-inverse of the first, one rank-1 fit per column
    rows = np.linalg.pinv(fa) @ m.reshape(t.shape[a], -1)
    fb = np.empty((t.shape[b], r))
    fc = np.empty((nc, r))
    for k in range(r):
        u, s, vt = np.linalg.svd(rows[k].reshape(t.shape[b], nc), full_matrices=False)
        fb[:, k] = u[:, 0] * s[0]
        fc[:, k] = vt[0]
    out: list[np.ndarray | None] = [None] * t.ndim
    out[a], out[b] = fa, fb
    if len(rest) == 1:
        out[rest[0]] = fc
    else:
        for k in rest:
            out[k] = np.empty((t.shape[k], r))
        for col in range(r):
            block = fc[:, col].reshape(rest_shape)
            for j, k in enumerate(rest):
                out[k][:, col] = leading_left_vectors(unfold(block, j + 1), 1)[:, 0]
            scale = multi_mode_product(block, [out[k][:, col:col + 1] for k in rest],
                                       transpose=True).item()
            out[rest[0]][:, col] *= scale
    # column signs are arbitrary; make every factor but ``b`` sum-positive
    for k in [a] + rest:
        flip = np.where(out[k].sum(axis=0) < 0, -1.0, 1.0)
        out[k] = out[k] * flip
        out[b] = out[b] * flip
    return out


def tucker_decompose(t: np.ndarray, cfg: DecompConfig) -> TuckerFactors:
    """TD (HOOI) or NTD decomposition with per-mode ranks from ``cfg``."""
    if cfg.is_cp:
        raise InvalidArgumentError(f"tucker_decompose cannot run method {cfg.method}")
    t = _check_input(t, cfg)
    ranks = cfg.tucker_ranks(t.shape)
    rng = np.random.default_rng(cfg.seed)
    norm_t = np.linalg.norm(t)
    factors = []
    for mode, r in enumerate(ranks, start=1):
        a = _init_factor(t, mode, r, cfg, rng)
        if cfg.nonneg:
            a, _ = _unit_columns(a, rng)
        else:
            a = np.linalg.qr(a)[0]
        factors.append(a)
    if norm_t == 0.0:
        return TuckerFactors(np.zeros(ranks), factors, 0.0, 0, [0.0])
    if cfg.nonneg:
        return _ntd(t, factors, cfg, rng, norm_t)
    return _hooi(t, factors, cfg, norm_t)


def _hooi(t, factors, cfg, norm_t) -> TuckerFactors:
    errors: list[float] = []
    it = 0
    for it in range(1, cfg.max_iters + 1):
        for n in range(t.ndim):
            mats = [None if m == n else a for m, a in enumerate(factors)]
            y = multi_mode_product(t, mats, transpose=True)
            factors[n] = truncated_svd(unfold(y, n + 1), factors[n].shape[1])[0]
        core = nmode_last(y, factors[-1], t.ndim)
        f = TuckerFactors(core, factors)
        errors.append(_rel_error(t, reconstruct(f), norm_t))
        if _converged(errors, cfg.tol):
            break
    return TuckerFactors(core, factors, errors[-1], it, errors)


def nmode_last(y, a, order):
    """Finish the core projection: ``y x_order a^T``."""
    return multi_mode_product(y, [None] * (order - 1) + [a], transpose=True)


def _ntd(t, factors, cfg, rng, norm_t) -> TuckerFactors:
    core = multi_mode_product(t, factors, transpose=True)
    errors: list[float] = []
    it = 0
    for it in range(1, cfg.max_iters + 1):
        for n in range(t.ndim):
            mats = [None if m == n else a for m, a in enumerate(factors)]
            y = multi_mode_product(t, mats, transpose=True)
            grams = [None if m == n else a.T @ a for m, a in enumerate(factors)]
            g_n = unfold(core, n + 1)
            p = unfold(y, n + 1) @ g_n.T
            q = unfold(multi_mode_product(core, grams), n + 1) @ g_n.T
            a = factors[n].copy()
            for c in range(a.shape[1]):
                if q[c, c] <= _EPS:
                    continue
                a[:, c] = np.maximum(0.0, a[:, c] + (p[:, c] - a @ q[:, c]) / q[c, c])
            factors[n], scale = _unit_columns(a, rng)
            shape = [1] * t.ndim
            shape[n] = -1
            core = core * scale.reshape(shape)
        # multiplicative core step; y still holds the projection on all but the last mode
        num = nmode_last(y, factors[-1], t.ndim)
        den = multi_mode_product(core, [a.T @ a for a in factors])
        ok = den > _EPS
        core = np.where(ok, core * np.maximum(num, 0.0) / np.where(ok, den, 1.0), core)
        # |T - G x A|^2 from core-sized terms; exact pass only when cancellation bites
        gg = multi_mode_product(core, [a.T @ a for a in factors])
        sq = norm_t ** 2 - 2.0 * np.vdot(num, core) + np.vdot(core, gg)
        if sq > 1e-6 * norm_t ** 2:
            errors.append(float(np.sqrt(sq) / norm_t))
        else:
            errors.append(_rel_error(t, reconstruct(TuckerFactors(core, factors)), norm_t))
        if _converged(errors, cfg.tol):
            break
    return TuckerFactors(core, factors, errors[-1], it, errors)


def decompose(t: np.ndarray, cfg: DecompConfig) -> CpFactors | TuckerFactors:
    """Dispatch on ``cfg.method``."""
    return cp_decompose(t, cfg) if cfg.is_cp else tucker_decompose(t, cfg)
