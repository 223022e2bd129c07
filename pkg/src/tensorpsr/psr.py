"""Learned multi-agent PSR: parameter extraction, transition regression,
filtering, prediction, marginalization and JSON persistence.

A model holds a compressed state ``x`` (row vector of length R), one
prediction vector ``m~`` per per-agent test tuple, and one transition matrix
``M~_ao`` per observed joint one-step pair.  One-step prediction is ``x . m~``;
the state update is ``x' = x M~_ao / (x . m~_ao)``.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .decomp import CpFactors, DecompConfig, TuckerFactors, decompose
from .errors import InvalidArgumentError, MissingParameterError
from .estimation import AgentSpace, HistorySet, JointStep, SysDynTensor, TestSet
from .tensor import multi_mode_product, ridge_solve

log = logging.getLogger(__name__)

EPS_DIV = 1e-9
EPS_CLIP = 1e-12
LAMBDA_R = 1e-6


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def valid_mask(tests: TestSet) -> np.ndarray:
    """Boolean array over test tuples: True where all per-agent lengths agree."""
    lens = tests.lengths
    grids = np.meshgrid(*lens, indexing="ij")
    ok = np.ones(tests.shape, dtype=bool)
    for g in grids[1:]:
        ok &= g == grids[0]
    return ok


@dataclass
class PsrModel:
    x0: np.ndarray
    mtilde: np.ndarray                       # tests.shape + (R,)
    Mtilde: dict[JointStep, np.ndarray]      # learned pairs only; absent means zero
    tests: TestSet
    space: AgentSpace
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=np.float64)
        self.mtilde = np.asarray(self.mtilde, dtype=np.float64)
        if self.mtilde.shape != self.tests.shape + (self.R,):
            raise InvalidArgumentError(
                f"mtilde shape {self.mtilde.shape} does not match tests {self.tests.shape} "
                f"and R={self.R}")
        self._rows: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}
        self._zero = np.zeros((self.R, self.R))

    @property
    def R(self) -> int:
        return self.x0.size

    # parameter lookup --------------------------------------------------
    def _check_pair(self, a, o) -> tuple[tuple[int, ...], tuple[int, ...]]:
        a = tuple(int(x) for x in a)
        o = tuple(int(x) for x in o)
        sp = self.space
        if len(a) != sp.num_agents or len(o) != sp.num_agents or \
                any(not 0 <= x < n for x, n in zip(a, sp.n_actions)) or \
                any(not 0 <= x < n for x, n in zip(o, sp.n_obs)):
            raise MissingParameterError(f"no parameters for pair a={a}, o={o}")
        return a, o

    def one_step_tuple(self, a, o) -> tuple[int, ...] | None:
        """Per-agent test indices of the one-step joint test ``(a, o)``."""
        a, o = self._check_pair(a, o)
        idx = []
        for p in range(self.space.num_agents):
            i = self.tests.one_step_index(p, a[p], o[p])
            if i is None:
                return None
            idx.append(i)
        return tuple(idx)

    def m_ao(self, a, o) -> np.ndarray:
        idx = self.one_step_tuple(a, o)
        return np.zeros(self.R) if idx is None else self.mtilde[idx]

    def M_ao(self, a, o) -> np.ndarray:
        a, o = self._check_pair(a, o)
        return self.Mtilde.get((a, o), self._zero)

    def action_rows(self, a) -> tuple[np.ndarray, np.ndarray]:
        """For joint action ``a``: flat mtilde rows per joint observation
        (row-major) and a mask of observations that have a test."""
        a = tuple(int(x) for x in a)
        hit = self._rows.get(a)
        if hit is None:
            per_agent = []
            for p in range(self.space.num_agents):
                per_agent.append(np.array(
                    [self.tests.one_step_index(p, a[p], o) if
                     self.tests.one_step_index(p, a[p], o) is not None else -1
                     for o in range(self.space.n_obs[p])], dtype=np.int64))
            grids = np.meshgrid(*per_agent, indexing="ij")
            ok = np.ones(grids[0].shape, dtype=bool)
            for g in grids:
                ok &= g >= 0
            flat = np.ravel_multi_index(tuple(np.where(ok, g, 0) for g in grids), self.tests.shape)
            hit = (flat.ravel(), ok.ravel())
            self._rows[a] = hit
        return hit

    @property
    def learned_pairs(self) -> list[JointStep]:
        return sorted(self.Mtilde)

    # persistence -------------------------------------------------------
    def to_dict(self) -> dict:
        mask = valid_mask(self.tests)
        return {
            "meta": self.meta,
            "R": self.R,
            "x0": self.x0.tolist(),
            "tests": self.tests.to_list(),
            "mtilde": self.mtilde[mask].tolist(),
            "Mtilde": [{"a": list(a), "o": list(o), "M": m.tolist()}
                       for (a, o), m in sorted(self.Mtilde.items())],
            "index_maps": {**self.space.to_dict(),
                           "mtilde_rows": "valid test tuples, row-major"},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PsrModel":
        try:
            tests = TestSet.from_list(d["tests"])
            space = AgentSpace(tuple(d["index_maps"]["n_actions"]), tuple(d["index_maps"]["n_obs"]))
            r = int(d["R"])
            mt = np.zeros(tests.shape + (r,))
            mt[valid_mask(tests)] = np.asarray(d["mtilde"], dtype=np.float64).reshape(-1, r)
            big = {(tuple(e["a"]), tuple(e["o"])): np.asarray(e["M"], dtype=np.float64)
                   for e in d["Mtilde"]}
            return cls(np.asarray(d["x0"], dtype=np.float64), mt, big, tests, space,
                       d.get("meta", {}))
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidArgumentError(f"malformed model file ({exc})") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), separators=(",", ":")), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "PsrModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------- extraction

def prediction_params(f: CpFactors | TuckerFactors) -> np.ndarray:
    """Prediction vectors for every test tuple at once, shape ``(n_1..n_N, R)``."""
    if isinstance(f, CpFactors):
        n = len(f.factors) - 1
        letters = "abcdefgh"[:n]
        spec = "r," + ",".join(f"{c}r" for c in letters) + "->" + letters + "r"
        return np.einsum(spec, f.weights, *f.factors[:-1], optimize=True)
    mats = list(f.factors[:-1]) + [None]
    return multi_mode_product(f.core, mats)


def extract_prediction_params(f: CpFactors | TuckerFactors, tests: Sequence[int]) -> np.ndarray:
    """``m~`` for one per-agent test tuple ``(i_1..i_N)``.

    CP: ``lambda * A1[i_1] * ... * AN[i_N]``; Tucker: the core's last-mode
    unfolding applied to ``AN[i_N] (x) ... (x) A1[i_1]``.
    """
    tests = tuple(int(i) for i in tests)
    if len(tests) != len(f.factors) - 1:
        raise InvalidArgumentError(f"expected {len(f.factors) - 1} test indices")
    for i, a in zip(tests, f.factors):
        if not 0 <= i < a.shape[0]:
            raise InvalidArgumentError(f"test index {i} out of range {a.shape[0]}")
    if isinstance(f, CpFactors):
        out = f.weights.copy()
        for i, a in zip(tests, f.factors):
            out = out * a[i]
        return out
    out = f.core
    for i, a in zip(tests, f.factors):
        out = np.tensordot(a[i], out, axes=(0, 0))
    return out


def extract_states(f: CpFactors | TuckerFactors) -> np.ndarray:
    """State matrix: row ``k`` is the compressed state of history ``k``."""
    return f.factors[-1]


def history_pairs(hists: HistorySet) -> dict[JointStep, tuple[list[int], list[int]]]:
    """For every joint pair ending some history: aligned (prefix, extension) rows."""
    out: dict[JointStep, tuple[list[int], list[int]]] = {}
    index = hists.index
    for k, h in enumerate(hists.histories):
        if not h:
            continue
        prev = index.get(h[:-1])
        if prev is None:
            continue
        rows = out.setdefault(h[-1], ([], []))
        rows[0].append(prev)
        rows[1].append(k)
    return out


def build_regression_sets(hists: HistorySet, ao: JointStep) -> tuple[list[int], list[int]]:
    """Aligned index lists: histories ending in ``ao`` and their stripped prefixes."""
    a, o = ao
    key = (tuple(a), tuple(o))
    prev, ext = [], []
    index = hists.index
    for k, h in enumerate(hists.histories):
        if h and h[-1] == key and h[:-1] in index:
            prev.append(index[h[:-1]])
            ext.append(k)
    return prev, ext


def learn_transition(x: np.ndarray, x_ao: np.ndarray, m_ao: np.ndarray,
                     lambda_r: float = LAMBDA_R) -> np.ndarray:
    """Solve ``X M = diag(X m) X_ao`` in the (ridge) least-squares sense."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    x_ao = np.atleast_2d(np.asarray(x_ao, dtype=np.float64))
    if x.shape != x_ao.shape or x.shape[1] != np.size(m_ao):
        raise InvalidArgumentError(f"shape mismatch: X {x.shape}, X_ao {x_ao.shape}")
    d = x @ np.asarray(m_ao, dtype=np.float64)
    return ridge_solve(x, d[:, None] * x_ao, lambda_r)


def package_model(mtilde: np.ndarray, states: np.ndarray, seen: np.ndarray, tests: TestSet,
                  space: AgentSpace, hists: HistorySet, lambda_r: float, meta: dict) -> PsrModel:
    """Shared tail of every learner: zero unobserved pairs, regress transitions.

    ``seen`` marks test tuples with any nonzero estimate; the others carry no
    data and get a zero prediction vector.
    """
    mtilde = np.array(mtilde, dtype=np.float64)
    mtilde[~seen] = 0.0
    n_zeroed = int(np.sum(~seen & valid_mask(tests)))
    if hists.histories[0] != ():
        raise InvalidArgumentError("the null history must be at index 0")
    x0 = states[0].copy()
    model = PsrModel(x0, mtilde, {}, tests, space, meta)
    cont = np.asarray(hists.continuations) > 0
    learned = {}
    no_rows = 0
    for ao, (prev, ext) in sorted(history_pairs(hists).items()):
        keep = [i for i, k in enumerate(ext) if cont[k]]
        if not keep:
            no_rows += 1
            continue
        prev = np.asarray(prev)[keep]
        ext = np.asarray(ext)[keep]
        m = model.m_ao(*ao)
        if not np.any(m):
            continue
        learned[ao] = learn_transition(states[prev], states[ext], m, lambda_r)
    model.Mtilde = learned
    n_pairs = space.n_joint_actions * space.n_joint_obs
    model.meta = {**meta, "lambda_r": lambda_r, "n_learned_pairs": len(learned),
                  "n_flagged_pairs": n_pairs - len(learned),
                  "n_unobserved_tests": n_zeroed, "n_pairs_without_rows": no_rows}
    log.info("learned %d of %d transition matrices", len(learned), n_pairs)
    return model


def learn_psr(sds: SysDynTensor, hists: HistorySet | None = None, cfg: DecompConfig | None = None,
              lambda_r: float = LAMBDA_R) -> PsrModel:
    """Decompose the dynamics tensor, read off prediction vectors and states,
    then regress one transition matrix per observed joint pair."""
    hists = hists if hists is not None else sds.hists
    cfg = cfg if cfg is not None else DecompConfig()
    if not hists.histories or hists.histories[0] != ():
        raise InvalidArgumentError("the null history must be present at index 0")
    f = decompose(sds.tensor, cfg)
    meta = {"method": cfg.method, "rank": list(np.atleast_1d(cfg.rank).tolist()),
            "seed": cfg.seed, "fit_error": f.fit_error, "n_iters": f.n_iters,
            "config_hash": config_hash(cfg.__dict__)}
    seen = np.any(sds.tensor != 0, axis=-1)
    model = package_model(prediction_params(f), extract_states(f), seen, sds.tests, sds.space,
                          hists, lambda_r, meta)
    model.factors = f
    return model


# ---------------------------------------------------------------- inference

def predict_test(model: PsrModel, x: np.ndarray, test: Sequence[JointStep]) -> float:
    """Raw ``x M~_1 ... M~_{l-1} m~_l``; may fall outside [0, 1]."""
    test = list(test)
    if not test:
        raise InvalidArgumentError("empty test")
    v = np.asarray(x, dtype=np.float64)
    for a, o in test[:-1]:
        v = v @ model.M_ao(a, o)
    return float(v @ model.m_ao(*test[-1]))


def filter_update(model: PsrModel, x: np.ndarray, ao: JointStep,
                  eps_div: float = EPS_DIV) -> tuple[np.ndarray, bool]:
    """``x M~_ao / (x . m~_ao)``; returns ``(x0, True)`` when the divisor vanishes."""
    a, o = ao
    denom = float(x @ model.m_ao(a, o))
    if not np.isfinite(denom) or abs(denom) < eps_div:
        return model.x0.copy(), True
    return (x @ model.M_ao(a, o)) / denom, False


def normalize_prediction(raw: np.ndarray, eps_clip: float = EPS_CLIP) -> np.ndarray:
    """Clip to ``[eps_clip * mass, inf)`` and renormalize; an all-zero row becomes uniform.

    The floor is relative to the positive mass so that rescaling the state
    leaves the distribution unchanged.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if not np.any(raw > 0) or not np.all(np.isfinite(raw)):
        return np.full(raw.size, 1.0 / raw.size)
    p = np.maximum(raw, eps_clip * raw[raw > 0].sum())
    return p / p.sum()


def raw_next_obs(model: PsrModel, x: np.ndarray, a: Sequence[int]) -> np.ndarray:
    rows, ok = model.action_rows(a)
    flat = model.mtilde.reshape(-1, model.R)
    return np.where(ok, flat[rows] @ x, 0.0)


def predict_next_obs_dist(model: PsrModel, x: np.ndarray, a: Sequence[int],
                          eps_clip: float = EPS_CLIP) -> np.ndarray:
    """Normalized distribution over joint observations (row-major) after action ``a``."""
    return normalize_prediction(raw_next_obs(model, x, a), eps_clip)


def marginalize_model(model: PsrModel, agent: int) -> PsrModel:
    """Single-agent model whose one-step parameters sum the joint ones over every
    other agent's action and observation.  The common scale cancels in both
    the update and the normalized prediction."""
    sp = model.space
    if not 0 <= agent < sp.num_agents:
        raise InvalidArgumentError(f"agent {agent} out of range")
    nA, nO = sp.n_actions[agent], sp.n_obs[agent]
    tests = TestSet((tuple(((a, o),) for a in range(nA) for o in range(nO)),))
    space = AgentSpace((nA,), (nO,))
    mt = np.zeros((nA * nO, model.R))
    big: dict[JointStep, np.ndarray] = {}
    for a in sp.joint_actions():
        rows, ok = model.action_rows(a)
        flat = model.mtilde.reshape(-1, model.R)
        vals = np.where(ok[:, None], flat[rows], 0.0).reshape(sp.n_obs + (model.R,))
        other = tuple(p for p in range(sp.num_agents) if p != agent)
        mt[a[agent] * nO:(a[agent] + 1) * nO] += vals.sum(axis=other) if other else vals
    for (a, o), m in model.Mtilde.items():
        key = ((a[agent],), (o[agent],))
        big[key] = big.get(key, 0.0) + m
    meta = {**model.meta, "marginal_agent": agent}
    return PsrModel(model.x0.copy(), mt, big, tests, space, meta)
