"""Trajectory ingestion and estimation of the system dynamics tensor.

A joint step is the pair ``(a, o)`` of per-agent action and observation tuples;
a joint history is a tuple of joint steps.  A per-agent test is a tuple of
``(a, o)`` integer pairs.  Conditional probabilities are estimated by counting
episode prefixes, which is what a reset-capable data collector sees: every
episode starts from the initial state, so "h followed by t" means the episode
begins with ``h + t``.
"""

from __future__ import annotations

import itertools
import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import InvalidArgumentError

JointStep = tuple[tuple[int, ...], tuple[int, ...]]
History = tuple[JointStep, ...]
Test = tuple[tuple[int, int], ...]

NULL_HISTORY: History = ()


@dataclass(frozen=True)
class AgentSpace:
    n_actions: tuple[int, ...]
    n_obs: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "n_actions", tuple(int(n) for n in self.n_actions))
        object.__setattr__(self, "n_obs", tuple(int(n) for n in self.n_obs))
        if len(self.n_actions) != len(self.n_obs) or not self.n_actions:
            raise InvalidArgumentError("need matching, non-empty action/observation counts")
        if min(self.n_actions + self.n_obs) < 1:
            raise InvalidArgumentError("action and observation counts must be >= 1")

    @property
    def num_agents(self) -> int:
        return len(self.n_actions)

    @property
    def n_joint_actions(self) -> int:
        return int(np.prod(self.n_actions))

    @property
    def n_joint_obs(self) -> int:
        return int(np.prod(self.n_obs))

    def joint_actions(self) -> list[tuple[int, ...]]:
        return list(itertools.product(*(range(n) for n in self.n_actions)))

    def joint_observations(self) -> list[tuple[int, ...]]:
        return list(itertools.product(*(range(n) for n in self.n_obs)))

    def obs_index(self, o: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(o), self.n_obs))

    def action_index(self, a: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(a), self.n_actions))

    def to_dict(self) -> dict:
        return {"n_actions": list(self.n_actions), "n_obs": list(self.n_obs)}


class Step(NamedTuple):
    a: tuple[int, ...]
    o: tuple[int, ...]
    r: tuple[float, ...] | None = None


@dataclass
class TrajectorySet:
    episodes: list[tuple[Step, ...]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.episodes)

    @cached_property
    def keys(self) -> list[History]:
        """Each episode as a joint history (rewards dropped)."""
        return [tuple((s.a, s.o) for s in ep) for ep in self.episodes]

    def subset(self, idx: Iterable[int]) -> "TrajectorySet":
        return TrajectorySet([self.episodes[i] for i in idx])

    def infer_space(self) -> AgentSpace:
        """Smallest space containing every index in the corpus."""
        if not self.episodes:
            raise InvalidArgumentError("cannot infer an agent space from an empty corpus")
        acts = np.max([s.a for ep in self.episodes for s in ep], axis=0) + 1
        obs = np.max([s.o for ep in self.episodes for s in ep], axis=0) + 1
        return AgentSpace(tuple(acts), tuple(obs))

    def validate(self, space: AgentSpace) -> None:
        for ep in self.episodes:
            if len(ep) < 1:
                raise InvalidArgumentError("episodes must have at least one step")
            for s in ep:
                if len(s.a) != space.num_agents or len(s.o) != space.num_agents:
                    raise InvalidArgumentError("step arity does not match the agent space")
                if any(not 0 <= x < n for x, n in zip(s.a, space.n_actions)) or \
                        any(not 0 <= x < n for x, n in zip(s.o, space.n_obs)):
                    raise InvalidArgumentError(f"index out of range in step {s}")


def write_trajectories(trajs: TrajectorySet, path: str | Path) -> None:
    """One episode per line: ``{"steps":[{"a":[..],"o":[..],"r":[..]},..]}``."""
    with open(path, "w", encoding="utf-8") as fh:
        for ep in trajs.episodes:
            steps = []
            for s in ep:
                d = {"a": list(s.a), "o": list(s.o)}
                if s.r is not None:
                    d["r"] = [float(x) for x in s.r]
                steps.append(d)
            fh.write(json.dumps({"steps": steps}, separators=(",", ":")) + "\n")


def read_trajectories(path: str | Path) -> TrajectorySet:
    episodes = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                steps = json.loads(line)["steps"]
                ep = tuple(Step(tuple(int(x) for x in s["a"]), tuple(int(x) for x in s["o"]),
                                tuple(float(x) for x in s["r"]) if "r" in s else None)
                           for s in steps)
            except (KeyError, TypeError, ValueError) as exc:
                raise InvalidArgumentError(f"{path}:{lineno}: malformed episode ({exc})") from exc
            episodes.append(ep)
    return TrajectorySet(episodes)


# ---------------------------------------------------------------- test / history sets

@dataclass(frozen=True)
class TestSet:
    tests: tuple[tuple[Test, ...], ...]

    __test__ = False  # not a pytest class

    @cached_property
    def index(self) -> list[dict[Test, int]]:
        return [{t: i for i, t in enumerate(ts)} for ts in self.tests]

    @cached_property
    def lengths(self) -> list[np.ndarray]:
        return [np.array([len(t) for t in ts], dtype=np.int64) for ts in self.tests]

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(len(ts) for ts in self.tests)

    @property
    def num_agents(self) -> int:
        return len(self.tests)

    def one_step_index(self, agent: int, a: int, o: int) -> int | None:
        return self.index[agent].get(((a, o),))

    def to_list(self) -> list:
        return [[[list(pair) for pair in t] for t in ts] for ts in self.tests]

    @classmethod
    def from_list(cls, data) -> "TestSet":
        return cls(tuple(tuple(tuple((int(a), int(o)) for a, o in t) for t in ts)
                         for ts in data))


def build_test_sets(trajs: TrajectorySet, space: AgentSpace, max_test_len: int = 1,
                    min_count: int = 1, enumerate_one_step: bool = True) -> TestSet:
    """Per-agent tests: every one-step test plus frequent longer ones.

    Multi-step tests of length <= ``max_test_len`` are kept when they occur at
    least ``min_count`` times (any start position) in that agent's projected
    trajectories.  With ``enumerate_one_step=False`` only one-step tests that
    occur in the corpus are kept, which keeps large observation spaces tractable.
    """
    if max_test_len < 1:
        raise InvalidArgumentError("max_test_len must be >= 1")
    per_agent = []
    for p in range(space.num_agents):
        counts: Counter = Counter()
        for ep in trajs.episodes:
            proj = tuple((s.a[p], s.o[p]) for s in ep)
            for ell in range(1, max_test_len + 1):
                for i in range(len(proj) - ell + 1):
                    counts[proj[i:i + ell]] += 1
        if enumerate_one_step:
            tests = {((a, o),) for a in range(space.n_actions[p]) for o in range(space.n_obs[p])}
        else:
            tests = {t for t in counts if len(t) == 1}
        tests |= {t for t, c in counts.items() if len(t) > 1 and c >= min_count}
        per_agent.append(tuple(sorted(tests, key=lambda t: (len(t), t))))
    return TestSet(tuple(per_agent))


@dataclass(frozen=True)
class HistorySet:
    histories: tuple[History, ...]
    counts: tuple[int, ...]
    continuations: tuple[int, ...]

    @cached_property
    def index(self) -> dict[History, int]:
        return {h: k for k, h in enumerate(self.histories)}

    def __len__(self) -> int:
        return len(self.histories)

    def __contains__(self, h) -> bool:
        return h in self.index

    @cached_property
    def max_len(self) -> int:
        return max(len(h) for h in self.histories)

    @classmethod
    def from_histories(cls, histories: Sequence[History],
                       trajs: TrajectorySet | None = None) -> "HistorySet":
        """Wrap an explicit history list (``NULL_HISTORY`` must come first)."""
        histories = tuple(tuple(h) for h in histories)
        if not histories or histories[0] != NULL_HISTORY:
            raise InvalidArgumentError("the null history must be at index 0")
        if len(set(histories)) != len(histories):
            raise InvalidArgumentError("duplicate histories")
        present = set(histories)
        for h in histories[1:]:
            if h[:-1] not in present:
                raise InvalidArgumentError("history set is not prefix-closed")
        if trajs is None:
            ones = (1,) * len(histories)
            return cls(histories, ones, ones)
        cnt, cont = _prefix_counts(trajs, max(len(h) for h in histories))
        return cls(histories, tuple(cnt[h] for h in histories),
                   tuple(cont[h] for h in histories))


def _prefix_counts(trajs: TrajectorySet, max_len: int):
    counts: Counter = Counter()
    cont: Counter = Counter()
    for key in trajs.keys:
        for s in range(min(len(key), max_len) + 1):
            h = key[:s]
            counts[h] += 1
            if s < len(key):
                cont[h] += 1
    return counts, cont


def build_history_set(trajs: TrajectorySet, max_hist_len: int = 10, min_count: int = 1,
                      max_histories: int = 2000) -> HistorySet:
    """Null history plus frequent episode prefixes, prefix-closed.

    Candidates are prefixes of length 1..``max_hist_len`` seen in at least
    ``min_count`` episodes; the ``max_histories`` most frequent are kept (ties go
    to shorter, then lexicographically smaller histories) and any missing
    prefix is re-added.  Final order is (length, frequency desc, lexicographic).
    """
    if max_hist_len < 0:
        raise InvalidArgumentError("max_hist_len must be >= 0")
    counts, cont = _prefix_counts(trajs, max_hist_len)
    cands = [h for h, c in counts.items() if h and c >= min_count]
    cands.sort(key=lambda h: (-counts[h], len(h), h))
    keep = set(cands[:max(max_histories - 1, 0)])
    for h in list(keep):
        while h:
            h = h[:-1]
            keep.add(h)
    keep.add(NULL_HISTORY)
    ordered = sorted(keep, key=lambda h: (len(h), -counts[h], h))
    return HistorySet(tuple(ordered), tuple(counts[h] for h in ordered),
                      tuple(cont[h] for h in ordered))


# ---------------------------------------------------------------- estimation

def joint_test(per_agent: Sequence[Test]) -> tuple[JointStep, ...]:
    """Zip equal-length per-agent tests into one joint test."""
    lengths = {len(t) for t in per_agent}
    if len(lengths) != 1:
        raise InvalidArgumentError("per-agent tests of unequal length do not form a joint test")
    return tuple((tuple(t[j][0] for t in per_agent), tuple(t[j][1] for t in per_agent))
                 for j in range(lengths.pop()))


def estimate_cond_prob(trajs: TrajectorySet, test: Sequence[JointStep], history: History,
                       alpha: float = 0.0, n_joint_obs: int | None = None) -> float:
    """Smoothed ratio of episodes starting with ``history + test`` to those starting
    with ``history`` and then taking the test's actions.

    ``alpha`` is the Laplace weight; the denominator gets ``alpha * V`` with ``V``
    the number of joint observation sequences of the test's length.  ``0/0`` is 0.
    """
    if alpha < 0:
        raise InvalidArgumentError(f"alpha must be >= 0, got {alpha}")
    test = tuple(test)
    history = tuple(history)
    acts = tuple(a for a, _ in test)
    n, ell = len(history), len(test)
    num = den = 0
    for key in trajs.keys:
        if len(key) < n + ell or key[:n] != history:
            continue
        seg = key[n:n + ell]
        if tuple(a for a, _ in seg) == acts:
            den += 1
            num += seg == test
    if alpha:
        if n_joint_obs is None:
            raise InvalidArgumentError("smoothing needs the joint observation count")
        v = float(n_joint_obs) ** ell
        return (num + alpha) / (den + alpha * v)
    return num / den if den else 0.0


class _Counts:
    """Continuation counts for every history in a set, up to a test length."""

    def __init__(self, trajs: TrajectorySet, hists: HistorySet, max_len: int):
        self.full: dict[int, Counter] = defaultdict(Counter)   # ell -> (k, segment)
        self.acts: dict[int, Counter] = defaultdict(Counter)   # ell -> (k, actions)
        index = hists.index
        hmax = hists.max_len
        for key in trajs.keys:
            for s in range(min(len(key), hmax) + 1):
                k = index.get(key[:s])
                if k is None:
                    continue
                for ell in range(1, min(max_len, len(key) - s) + 1):
                    seg = key[s:s + ell]
                    self.full[ell][k, seg] += 1
                    self.acts[ell][k, tuple(a for a, _ in seg)] += 1


@dataclass
class SysDynTensor:
    tensor: np.ndarray
    tests: TestSet
    hists: HistorySet
    space: AgentSpace

    @property
    def mask(self) -> np.ndarray:
        """True where all per-agent test lengths agree."""
        lens = self.tests.lengths
        n = len(lens)
        ref = lens[0].reshape((-1,) + (1,) * n)
        ok = np.ones(self.tensor.shape[:-1], dtype=bool)
        for p in range(1, n):
            shape = [1] * n
            shape[p] = -1
            ok &= ref.reshape(ref.shape[:n]) == lens[p].reshape(shape)
        return np.broadcast_to(ok[..., None], self.tensor.shape)


def build_sds_tensor(trajs: TrajectorySet, tests: TestSet, hists: HistorySet,
                     space: AgentSpace, alpha: float = 0.0) -> SysDynTensor:
    """Estimate ``D[i_1, ..., i_N, k] = p(t^1_{i_1} ... t^N_{i_N} | h_k)``.

    Cells pairing tests of different lengths are left at zero (see ``mask``).
    """
    if len(hists) == 0 or min(tests.shape) == 0:
        raise InvalidArgumentError("test and history sets must be non-empty")
    if alpha < 0:
        raise InvalidArgumentError(f"alpha must be >= 0, got {alpha}")
    n_agents = tests.num_agents
    n_hist = len(hists)
    max_len = int(max(lens.max() for lens in tests.lengths))
    counts = _Counts(trajs, hists, max_len)
    out = np.zeros(tests.shape + (n_hist,))
    for ell in range(1, max_len + 1):
        idx = [np.flatnonzero(lens == ell) for lens in tests.lengths]
        if any(len(i) == 0 for i in idx):
            continue
        # action-sequence code of each test, base |A_p|
        codes = []
        for p in range(n_agents):
            base = space.n_actions[p]
            codes.append(np.array([
                int(np.ravel_multi_index([a for a, _ in tests.tests[p][i]], (base,) * ell))
                for i in idx[p]], dtype=np.int64))
        den = np.zeros((n_hist,) + tuple(n ** ell for n in space.n_actions))
        for (k, acts), c in counts.acts[ell].items():
            code = tuple(int(np.ravel_multi_index([a[p] for a in acts],
                                                  (space.n_actions[p],) * ell))
                         for p in range(n_agents))
            den[(k,) + code] = c
        block_den = den[np.ix_(np.arange(n_hist), *codes)]
        block_num = np.zeros_like(block_den)
        local = [{int(i): j for j, i in enumerate(ix)} for ix in idx]
        for (k, seg), c in counts.full[ell].items():
            pos = []
            for p in range(n_agents):
                i = tests.index[p].get(tuple((a[p], o[p]) for a, o in seg))
                if i is None or i not in local[p]:
                    break
                pos.append(local[p][i])
            else:
                block_num[(k,) + tuple(pos)] = c
        if alpha:
            v = float(space.n_joint_obs) ** ell
            block = (block_num + alpha) / (block_den + alpha * v)
        else:
            block = np.divide(block_num, block_den, out=np.zeros_like(block_num),
                              where=block_den > 0)
        out[np.ix_(*idx, np.arange(n_hist))] = np.moveaxis(block, 0, -1)
    return SysDynTensor(out, tests, hists, space)


@dataclass
class SysDynMatrix:
    matrix: np.ndarray
    joint_tests: list[tuple[int, ...]]
    tests: TestSet
    hists: HistorySet
    space: AgentSpace


def build_sds_matrix(trajs: TrajectorySet, tests: TestSet, hists: HistorySet,
                     space: AgentSpace, alpha: float = 0.0,
                     sds: SysDynTensor | None = None) -> SysDynMatrix:
    """Joint tests along one axis: rows are the valid per-agent index tuples in
    row-major order, columns are histories.  Entries come from the same
    estimator as :func:`build_sds_tensor`, so they match it exactly."""
    if sds is None:
        sds = build_sds_tensor(trajs, tests, hists, space, alpha)
    valid = sds.mask[..., 0]
    rows = [tuple(int(i) for i in ix) for ix in zip(*np.nonzero(valid))]
    mat = sds.tensor[valid]
    return SysDynMatrix(np.ascontiguousarray(mat), rows, tests, hists, space)


def project_history(h: History, agent: int) -> Test:
    return tuple((a[agent], o[agent]) for a, o in h)


def marginal_dynamics_matrix(sds: SysDynTensor, agent: int):
    """Sum the tensor over all other agents' tests and over joint histories that
    share ``agent``'s projection.

    Returns ``(matrix, projected_histories)``; columns follow first appearance
    of each projected history in the joint history order.
    """
    n_agents = sds.tests.num_agents
    if not 0 <= agent < n_agents:
        raise InvalidArgumentError(f"agent {agent} out of range")
    others = tuple(p for p in range(n_agents) if p != agent)
    per_hist = sds.tensor.sum(axis=others) if others else sds.tensor
    cols: dict[Test, int] = {}
    col_of = np.empty(len(sds.hists), dtype=np.int64)
    for k, h in enumerate(sds.hists.histories):
        col_of[k] = cols.setdefault(project_history(h, agent), len(cols))
    indicator = np.zeros((len(sds.hists), len(cols)))
    indicator[np.arange(len(sds.hists)), col_of] = 1.0
    return per_hist @ indicator, list(cols)
