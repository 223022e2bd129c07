"""Dense tensor kernel: unfoldings, mode products, Khatri-Rao, SVD, ridge solves.

Tensors are plain C-ordered ``float64`` numpy arrays of order >= 2.  Modes are
numbered from 1, as in the mode-k matricization notation.

Unfolding convention: the row index runs along ``mode`` and the column index
enumerates the remaining modes with the lowest-numbered one varying fastest.
With this convention, for a third-order tensor with factors ``A, B, C``,
``unfold(T, 3) == C @ khatri_rao(B, A).T``, which is the Kronecker order used
when pulling prediction vectors out of a Tucker core.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError, SingularSystemError


def as_tensor(data, shape: Sequence[int] | None = None) -> np.ndarray:
    """Validate ``data`` as a dense tensor and return it as a C-ordered float64 array.

    ``data`` may be a nested sequence / array, or a flat row-major sequence when
    ``shape`` is given.
    """
    arr = np.asarray(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(n) for n in shape)
        if arr.size != int(np.prod(shape)):
            raise InvalidArgumentError(
                f"data length {arr.size} does not match shape {shape}")
        arr = arr.reshape(shape)
    if arr.ndim < 2:
        raise InvalidArgumentError(f"tensor order must be >= 2, got {arr.ndim}")
    if any(n < 1 for n in arr.shape):
        raise InvalidArgumentError(f"all extents must be >= 1, got {arr.shape}")
    return np.ascontiguousarray(arr)


def _axis(ndim: int, mode: int) -> int:
    if not 1 <= mode <= ndim:
        raise InvalidArgumentError(f"mode {mode} out of range for order {ndim}")
    return mode - 1


def unfold(t: np.ndarray, mode: int) -> np.ndarray:
    """Mode-``mode`` matricization of ``t`` (rows indexed by ``mode``)."""
    t = np.asarray(t)
    ax = _axis(t.ndim, mode)
    return np.reshape(np.moveaxis(t, ax, 0), (t.shape[ax], -1), order="F")


def fold(m: np.ndarray, mode: int, shape: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`unfold` for a tensor of the given ``shape``."""
    shape = tuple(shape)
    ax = _axis(len(shape), mode)
    moved = (shape[ax],) + shape[:ax] + shape[ax + 1:]
    m = np.asarray(m)
    if m.size != int(np.prod(shape)) or m.shape[0] != shape[ax]:
        raise InvalidArgumentError(
            f"matrix of shape {m.shape} cannot be folded into {shape} along mode {mode}")
    return np.ascontiguousarray(np.moveaxis(np.reshape(m, moved, order="F"), 0, ax))


def nmode_product(t: np.ndarray, m: np.ndarray, mode: int) -> np.ndarray:
    """``t x_mode m``: contract the ``mode`` axis of ``t`` with the columns of ``m``."""
    t = np.asarray(t, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    ax = _axis(t.ndim, mode)
    if m.ndim != 2 or m.shape[1] != t.shape[ax]:
        raise InvalidArgumentError(
            f"matrix with {m.shape[-1]} columns cannot multiply mode {mode} "
            f"of extent {t.shape[ax]}")
    out = np.tensordot(m, t, axes=(1, ax))
    return np.ascontiguousarray(np.moveaxis(out, 0, ax))


def multi_mode_product(t: np.ndarray, mats: Sequence[np.ndarray | None],
                       transpose: bool = False) -> np.ndarray:
    """Apply one matrix per mode (``None`` skips a mode).

    With ``transpose=True`` the transposes are applied, which is the projection
    ``t x_1 A1^T x_2 A2^T ...`` used by Tucker solvers.
    """
    out = np.asarray(t, dtype=np.float64)
    # contract the largest reductions first to keep intermediates small
    order = sorted(range(len(mats)), key=lambda k: -out.shape[k])
    for k in order:
        m = mats[k]
        if m is None:
            continue
        out = nmode_product(out, m.T if transpose else m, k + 1)
    return out


def khatri_rao(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Column-wise Kronecker product; column r is ``kron(a[:, r], b[:, r])``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise InvalidArgumentError(
            f"khatri_rao needs equal column counts, got {a.shape} and {b.shape}")
    return (a[:, None, :] * b[None, :, :]).reshape(-1, a.shape[1])


def khatri_rao_all(mats: Sequence[np.ndarray]) -> np.ndarray:
    """Khatri-Rao product of several matrices, ``mats[0]`` varying slowest."""
    out = np.asarray(mats[0], dtype=np.float64)
    for m in mats[1:]:
        out = khatri_rao(out, m)
    return out


def mttkrp(t: np.ndarray, factors: Sequence[np.ndarray], mode: int) -> np.ndarray:
    """Matricized tensor times Khatri-Rao product for ``mode`` (1-based).

    Equals ``unfold(t, mode) @ khatri_rao_all(reversed(other factors))`` but is
    computed by successive contractions so the tensor is never unfolded.
    """
    t = np.asarray(t, dtype=np.float64)
    ax = _axis(t.ndim, mode)
    rank = factors[0].shape[1]
    others = [k for k in range(t.ndim) if k != ax]
    # first contraction is a plain GEMM against the trailing (or leading) axis
    if others[-1] == t.ndim - 1:
        k0 = t.ndim - 1
        w = t.reshape(-1, t.shape[k0]) @ factors[k0]
        w = w.reshape(t.shape[:k0] + (rank,))
        remaining = others[:-1]
    else:
        k0 = 0
        w = factors[0].T @ t.reshape(t.shape[0], -1)
        w = np.moveaxis(w.reshape((rank,) + t.shape[1:]), 0, -1)
        remaining = others[1:]
    # w has the surviving tensor axes followed by a rank axis
    alive = [k for k in range(t.ndim) if k != k0]
    for k in reversed(remaining):
        pos = alive.index(k)
        letters = "abcdefghijklmnopqrstuvw"[:len(alive)]
        src = letters + "z"
        dst = letters.replace(letters[pos], "") + "z"
        w = np.einsum(f"{src},{letters[pos]}z->{dst}", w, factors[k])
        alive.pop(pos)
    return np.ascontiguousarray(w.reshape(t.shape[ax], rank))


def truncated_svd(m: np.ndarray, r: int):
    """Rank-``r`` SVD: returns ``(U, s, V)`` with ``m ~= U @ diag(s) @ V.T``.

    Signs are fixed so that the largest-magnitude entry of each left singular
    vector is non-negative, which makes the result reproducible.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise InvalidArgumentError("truncated_svd expects a matrix")
    if not 1 <= r <= min(m.shape):
        raise InvalidArgumentError(f"rank {r} out of range for matrix {m.shape}")
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    u, s, v = u[:, :r], s[:r], vt[:r].T
    flip = np.sign(u[np.argmax(np.abs(u), axis=0), np.arange(r)])
    flip[flip == 0] = 1.0
    return u * flip, s, v * flip


def leading_left_vectors(m: np.ndarray, r: int) -> np.ndarray:
    """Leading ``r`` left singular vectors (sign-fixed), used to seed decompositions.

    Large matrices go through a Lanczos solver started from a fixed vector so
    the result stays deterministic.
    """
    m = np.asarray(m, dtype=np.float64)
    r = min(r, m.shape[0])
    small = min(m.shape) <= 300 or r >= min(m.shape) // 2
    if small and m.shape[0] * 4 <= m.shape[1]:
        _, vecs = np.linalg.eigh(m @ m.T)
        u = vecs[:, ::-1][:, :r]
    elif small:
        u = np.linalg.svd(m, full_matrices=False)[0][:, :r]
    else:
        from scipy.sparse.linalg import svds
        v0 = np.ones(min(m.shape)) / np.sqrt(min(m.shape))
        u, s, _ = svds(m, k=r, v0=v0)
        u = u[:, np.argsort(-s)]
    flip = np.sign(u[np.argmax(np.abs(u), axis=0), np.arange(u.shape[1])])
    flip[flip == 0] = 1.0
    return u * flip


def ridge_solve(a: np.ndarray, b: np.ndarray, lambda_r: float = 0.0) -> np.ndarray:
    """``argmin_M ||a M - b||_F^2 + lambda_r ||M||_F^2``.

    With ``lambda_r == 0`` ``a`` must have full column rank, otherwise
    :class:`SingularSystemError` is raised.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    squeeze = b.ndim == 1
    if squeeze:
        b = b[:, None]
    if a.ndim != 2 or a.shape[0] != b.shape[0]:
        raise InvalidArgumentError(
            f"row mismatch: a has shape {a.shape}, b has shape {b.shape}")
    if lambda_r < 0:
        raise InvalidArgumentError("lambda_r must be >= 0")
    n = a.shape[1]
    if lambda_r == 0.0:
        if a.shape[0] < n or np.linalg.matrix_rank(a) < n:
            raise SingularSystemError(
                "normal equations are singular; pass lambda_r > 0")
        sol = np.linalg.lstsq(a, b, rcond=None)[0]
    else:
        # stacked form keeps the conditioning of a rather than a^T a
        aa = np.vstack([a, np.sqrt(lambda_r) * np.eye(n)])
        bb = np.vstack([b, np.zeros((n, b.shape[1]))])
        sol = np.linalg.lstsq(aa, bb, rcond=None)[0]
    return sol[:, 0] if squeeze else sol
