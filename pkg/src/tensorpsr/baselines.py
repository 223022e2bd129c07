"""Matrix baselines: TPSR (truncated SVD of the dynamics matrix) and CPSR
(random projection of the test dimension, then SVD).

Both emit the same ``PsrModel`` as the tensor learners: states are the right
singular vectors (one row per history) and prediction vectors are rows of
``D V``, which for TPSR equals ``U diag(s)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .estimation import HistorySet, SysDynMatrix
from .psr import LAMBDA_R, PsrModel, package_model
from .tensor import truncated_svd

SCHEMES = ("sparse-sign", "gaussian", "identity")


@dataclass(frozen=True)
class ProjectionSpec:
    d: int
    scheme: str = "sparse-sign"
    seed: int = 0

    def __post_init__(self):
        if self.d < 1:
            raise InvalidArgumentError("projection dimension must be >= 1")
        if self.scheme not in SCHEMES:
            raise InvalidArgumentError(f"unknown projection scheme {self.scheme!r}")

    def matrix(self, n_tests: int) -> np.ndarray:
        """``d x n_tests`` projection; sparse-sign entries are +-sqrt(3/d) with
        density 1/3, gaussian entries N(0, 1/d)."""
        if self.d > n_tests:
            raise InvalidArgumentError(f"projection dimension {self.d} exceeds {n_tests} tests")
        rng = np.random.default_rng(self.seed)
        if self.scheme == "identity":
            if self.d != n_tests:
                raise InvalidArgumentError("identity projection needs d equal to the test count")
            return np.eye(n_tests)
        if self.scheme == "gaussian":
            return rng.standard_normal((self.d, n_tests)) / np.sqrt(self.d)
        u = rng.random((self.d, n_tests))
        signs = np.where(u < 1 / 6, -1.0, np.where(u < 1 / 3, 1.0, 0.0))
        return signs * np.sqrt(3.0 / self.d)


def _scatter_rows(sdm: SysDynMatrix, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Place per-joint-test rows into a ``tests.shape + (R,)`` array."""
    out = np.zeros(sdm.tests.shape + (rows.shape[1],))
    seen = np.zeros(sdm.tests.shape, dtype=bool)
    idx = tuple(np.array(sdm.joint_tests, dtype=np.int64).T)
    out[idx] = rows
    seen[idx] = np.any(sdm.matrix != 0, axis=1)
    return out, seen


def _check_rank(mat: np.ndarray, r: int) -> None:
    if not 1 <= r <= min(mat.shape):
        raise InvalidArgumentError(f"rank {r} out of range for a {mat.shape} matrix")


def learn_tpsr(sdm: SysDynMatrix, hists: HistorySet | None = None, R: int = 20,
               lambda_r: float = LAMBDA_R) -> PsrModel:
    hists = hists if hists is not None else sdm.hists
    _check_rank(sdm.matrix, R)
    u, s, v = truncated_svd(sdm.matrix, R)
    mtilde, seen = _scatter_rows(sdm, u * s)
    meta = {"method": "TPSR", "rank": [R], "singular_values": s.tolist()}
    return package_model(mtilde, v, seen, sdm.tests, sdm.space, hists, lambda_r, meta)


def learn_cpsr(sdm: SysDynMatrix, hists: HistorySet | None = None,
               proj: ProjectionSpec | None = None, R: int = 20,
               lambda_r: float = LAMBDA_R) -> PsrModel:
    hists = hists if hists is not None else sdm.hists
    n_tests = sdm.matrix.shape[0]
    if proj is None:
        proj = ProjectionSpec(min(4 * R, n_tests))
    if R > proj.d:
        raise InvalidArgumentError(f"rank {R} exceeds projection dimension {proj.d}")
    y = proj.matrix(n_tests) @ sdm.matrix
    _check_rank(y, R)
    _, _, v = truncated_svd(y, R)
    mtilde, seen = _scatter_rows(sdm, sdm.matrix @ v)
    meta = {"method": "CPSR", "rank": [R], "projection": {"d": proj.d, "scheme": proj.scheme,
                                                           "seed": proj.seed}}
    return package_model(mtilde, v, seen, sdm.tests, sdm.space, hists, lambda_r, meta)
