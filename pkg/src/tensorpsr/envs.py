"""Seeded multi-agent simulators, trajectory generation and prediction oracles.

Explicit domains (Tag, Gridworld*, ColoredGridworld*, and hand-built POMDPs)
are ``TabularEnv`` instances: one sparse transition matrix per joint action and
one observation matrix per agent.  Agents observe independently given the next
joint state, so ``P(o | s') = prod_p O_p[s', o_p]``.  Poc-Man* is generative.

Actions 0..3 are North, East, South, West; action 4 is Tag (Tag robot) or Noop.
Wall observations pack one bit per direction as ``N*8 + E*4 + S*2 + W``; the
colored variant uses one base-4 digit per direction (0 = open, 1..3 = color).
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import InvalidArgumentError, InvalidStateError, UndefinedHistoryError
from .estimation import AgentSpace, History, Step, TrajectorySet

log = logging.getLogger(__name__)

MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))  # N, E, S, W
DOMAINS = ("tag", "gridworld", "colored_gridworld", "pocman", "gridworld3")
SLIP = 0.1


@dataclass(frozen=True)
class MapSpec:
    rows: tuple[str, ...]

    def __post_init__(self):
        rows = tuple(r.rstrip("\n") for r in self.rows if r.strip())
        object.__setattr__(self, "rows", rows)
        if not rows or len({len(r) for r in rows}) != 1:
            raise InvalidArgumentError("map must be a non-empty rectangle")
        bad = set("".join(rows)) - set("#.GPXo123")
        if bad:
            raise InvalidArgumentError(f"unknown map characters {sorted(bad)}")
        if not self.cells:
            raise InvalidArgumentError("map has no free cells")

    @classmethod
    def from_text(cls, text: str) -> "MapSpec":
        return cls(tuple(text.splitlines()))

    @classmethod
    def from_file(cls, path: str | Path) -> "MapSpec":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def builtin(cls, name: str) -> "MapSpec":
        text = resources.files("tensorpsr").joinpath("maps", f"{name}.txt").read_text()
        return cls.from_text(text)

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.rows), len(self.rows[0])

    def char(self, r: int, c: int) -> str:
        h, w = self.shape
        if not (0 <= r < h and 0 <= c < w):
            return "#"
        return self.rows[r][c]

    def is_wall(self, r: int, c: int) -> bool:
        return self.char(r, c) in "#123"

    @property
    def cells(self) -> list[tuple[int, int]]:
        h, w = self.shape
        return [(r, c) for r in range(h) for c in range(w) if not self.is_wall(r, c)]

    def marked(self, ch: str) -> list[int]:
        """Cell indices carrying marker ``ch``, row-major."""
        return [i for i, (r, c) in enumerate(self.cells) if self.rows[r][c] == ch]

    def neighbor(self, cell: int, d: int) -> int:
        """Cell reached by moving in direction ``d``; bumping a wall stays put."""
        r, c = self.cells[cell]
        nr, nc = r + MOVES[d][0], c + MOVES[d][1]
        if self.is_wall(nr, nc):
            return cell
        return self.cells.index((nr, nc))

    def wall_symbols(self, cell: int) -> tuple[int, ...]:
        """Per direction: 0 open, else wall color (plain walls and borders are 1)."""
        r, c = self.cells[cell]
        out = []
        for dr, dc in MOVES:
            ch = self.char(r + dr, c + dc)
            out.append(int(ch) if ch in "123" else (1 if ch == "#" else 0))
        return tuple(out)

    def wall_bits(self, cell: int) -> int:
        n, e, s, w = (int(x > 0) for x in self.wall_symbols(cell))
        return n * 8 + e * 4 + s * 2 + w


def sensor_matrix(m: MapSpec, p_noise: float, colored: bool = False) -> np.ndarray:
    """``P(observation | cell)`` for the noisy four-direction wall sensor."""
    if not 0.0 <= p_noise <= 1.0:
        raise InvalidArgumentError("p_noise must lie in [0, 1]")
    n_sym = 4 if colored else 2
    out = np.zeros((len(m.cells), n_sym ** 4))
    for cell in range(len(m.cells)):
        true = m.wall_symbols(cell)
        if not colored:
            true = tuple(int(x > 0) for x in true)
        per_dir = []
        for t in true:
            row = np.full(n_sym, p_noise / (n_sym if colored else 1))
            if colored:
                row[t] += 1.0 - p_noise
            else:
                row[:] = p_noise
                row[t] = 1.0 - p_noise
            per_dir.append(row)
        # N is the most significant digit
        out[cell] = np.einsum("a,b,c,d->abcd", *per_dir).ravel()
    return out


def move_kernel(m: MapSpec, slip: float = SLIP) -> list[np.ndarray]:
    """Per-action single-agent kernels with orthogonal slip ``slip`` each way.

    Action 4 (if requested by the caller) is not included; use the identity.
    """
    n = len(m.cells)
    mats = []
    for a in range(4):
        t = np.zeros((n, n))
        for cell in range(n):
            t[cell, m.neighbor(cell, a)] += 1.0 - 2 * slip
            t[cell, m.neighbor(cell, (a + 1) % 4)] += slip
            t[cell, m.neighbor(cell, (a + 3) % 4)] += slip
        mats.append(t)
    return mats


# ---------------------------------------------------------------- environments

@dataclass
class EpisodeState:
    state: object
    rng: np.random.Generator
    t: int = 0
    done: bool = False


class TabularEnv:
    """Explicit joint-state POMDP with sparse kernels."""

    explicit = True

    def __init__(self, domain: str, space: AgentSpace, trans: Sequence, obs: Sequence[np.ndarray],
                 init: np.ndarray, terminal: np.ndarray | None = None,
                 reward: Callable[[int, tuple, int], tuple] | None = None):
        self.domain = domain
        self.space = space
        if len(trans) != space.n_joint_actions or len(obs) != space.num_agents:
            raise InvalidArgumentError("kernel counts do not match the agent space")
        self.trans = [sp.csr_matrix(t, dtype=np.float64) for t in trans]
        # observation kernels are stored per action: (|A_p|, S, |O_p|)
        self.obs = []
        for p, o in enumerate(obs):
            o = np.asarray(o, dtype=np.float64)
            if o.ndim == 2:
                o = np.repeat(o[None], space.n_actions[p], axis=0)
            self.obs.append(o)
        self.init = np.asarray(init, dtype=np.float64)
        self.n_states = self.init.size
        self.terminal = (np.zeros(self.n_states, dtype=bool) if terminal is None
                         else np.asarray(terminal, dtype=bool))
        self.reward = reward
        for t in self.trans:
            t.sort_indices()
            if t.shape != (self.n_states, self.n_states):
                raise InvalidArgumentError("transition matrix shape mismatch")
        for p, o in enumerate(self.obs):
            if o.shape != (space.n_actions[p], self.n_states, space.n_obs[p]):
                raise InvalidArgumentError("observation matrix shape mismatch")
        # cumulative tables; transition rows are offset by their row index so
        # one searchsorted call serves a whole batch of states
        self._tcum = []
        for t in self.trans:
            rows = np.repeat(np.arange(self.n_states), np.diff(t.indptr))
            cum = np.zeros_like(t.data)
            for s in range(self.n_states):
                lo, hi = t.indptr[s], t.indptr[s + 1]
                c = np.cumsum(t.data[lo:hi])
                cum[lo:hi] = c / c[-1]
            self._tcum.append(rows + cum)
        self._ocum = [np.cumsum(o, axis=-1) / o.sum(axis=-1, keepdims=True) for o in self.obs]
        self._icum = np.cumsum(self.init) / self.init.sum()

    def check_stochastic(self, tol: float = 1e-12) -> None:
        for t in self.trans:
            if t.data.min(initial=0.0) < 0 or np.max(np.abs(np.asarray(t.sum(axis=1)).ravel() - 1)) > tol:
                raise InvalidArgumentError("transition kernel is not row-stochastic")
        for o in self.obs:
            if o.min() < 0 or np.max(np.abs(o.sum(axis=-1) - 1)) > tol:
                raise InvalidArgumentError("observation kernel is not row-stochastic")
        if self.init.min() < 0 or abs(self.init.sum() - 1) > tol:
            raise InvalidArgumentError("initial distribution is not a distribution")

    # batched sampling ------------------------------------------------
    def sample_init(self, rng, n: int) -> np.ndarray:
        idx = np.searchsorted(self._icum, rng.random(n), side="right")
        return np.minimum(idx, self.n_states - 1)

    def sample_next(self, states: np.ndarray, a: int, rng) -> np.ndarray:
        t = self.trans[a]
        pos = np.searchsorted(self._tcum[a], states + rng.random(states.size), side="right")
        pos = np.minimum(pos, t.indptr[states + 1] - 1)
        return t.indices[pos]

    def sample_obs(self, states: np.ndarray, a: Sequence[int], rng) -> np.ndarray:
        """Per-agent observations after joint action ``a``, shape (n, num_agents)."""
        out = np.empty((states.size, self.space.num_agents), dtype=np.int64)
        for p, cum in enumerate(self._ocum):
            u = rng.random(states.size)
            c = cum[a[p]]
            out[:, p] = np.minimum((c[states] <= u[:, None]).sum(axis=1), c.shape[1] - 1)
        return out

    # episode interface -----------------------------------------------
    def reset(self, rng) -> EpisodeState:
        return EpisodeState(int(self.sample_init(rng, 1)[0]), rng)

    def step(self, st: EpisodeState, a: tuple[int, ...]):
        s = st.state
        s2 = int(self.sample_next(np.array([s]), self.space.action_index(a), st.rng)[0])
        o = tuple(int(x) for x in self.sample_obs(np.array([s2]), a, st.rng)[0])
        r = self.reward(s, a, s2) if self.reward else (0.0,) * self.space.num_agents
        st.state = s2
        return o, tuple(float(x) for x in r), bool(self.terminal[s2])

    # exact inference -------------------------------------------------
    def obs_likelihood(self, a: Sequence[int], o: Sequence[int]) -> np.ndarray:
        lik = np.ones(self.n_states)
        for p, op in enumerate(o):
            lik = lik * self.obs[p][a[p], :, op]
        return lik

    def joint_obs_dist(self, b: np.ndarray, a: Sequence[int]) -> np.ndarray:
        """Distribution over joint observations (row-major) for next-state belief ``b``."""
        n = self.space.num_agents
        letters = "abcdefgh"[:n]
        spec = "s," + ",".join(f"s{c}" for c in letters) + "->" + letters
        mats = [self.obs[p][a[p]] for p in range(n)]
        return np.einsum(spec, b, *mats, optimize=True).ravel()


def _product_states(sizes: Sequence[int]) -> list[tuple[int, ...]]:
    return list(itertools.product(*(range(n) for n in sizes)))


def make_gridworld(m: MapSpec | None = None, p_noise: float = 0.1, colored: bool = False,
                   n_agents: int = 2, slip: float = SLIP) -> TabularEnv:
    """Agents navigate from their 'P' starts; the episode ends when any agent
    reaches 'G' (+1 to that agent)."""
    if m is None:
        m = MapSpec.builtin("colored_gridworld" if colored else
                            ("gridworld" if n_agents == 2 else "gridworld3"))
    starts = m.marked("P")
    goals = set(m.marked("G"))
    if len(starts) < n_agents or not goals:
        raise InvalidArgumentError(f"map needs {n_agents} 'P' starts and a 'G' goal")
    n_cells = len(m.cells)
    single = [sp.csr_matrix(k) for k in move_kernel(m, slip)]
    sensor = sensor_matrix(m, p_noise, colored)
    states = _product_states([n_cells] * n_agents)
    terminal = np.array([any(c in goals for c in s) for s in states])
    space = AgentSpace((4,) * n_agents, (sensor.shape[1],) * n_agents)
    keep = sp.diags((~terminal).astype(float))
    stay = sp.diags(terminal.astype(float))
    trans = []
    for a in space.joint_actions():
        k = single[a[0]]
        for ap in a[1:]:
            k = sp.kron(k, single[ap], format="csr")
        trans.append((keep @ k + stay).tocsr())
    init = np.zeros(len(states))
    init[int(np.ravel_multi_index(starts[:n_agents], [n_cells] * n_agents))] = 1.0
    obs = []
    for p in range(n_agents):
        obs.append(sensor[[s[p] for s in states]])

    def reward(s, a, s2):
        return tuple(1.0 if c in goals else 0.0 for c in states[s2])

    name = "colored_gridworld" if colored else ("gridworld" if n_agents == 2 else "gridworld3")
    env = TabularEnv(name, space, trans, obs, init, terminal, reward)
    env.map = m
    env.states = states
    return env


TAG_ACTION = 4


def make_tag(m: MapSpec | None = None, p_noise: float = 0.1, flee_prob: float = 0.8) -> TabularEnv:
    """Robot (agent 0) chases the Opponent (agent 1).

    The opponent flees with probability ``flee_prob`` to a uniformly chosen
    legal cell maximizing Manhattan distance to the robot, else stays; its own
    action has no effect on its motion.  Tag succeeds when both share a cell
    before moving.  States are (robot cell, opponent cell or tagged).
    """
    if m is None:
        m = MapSpec.builtin("tag")
    n = len(m.cells)
    tagged = n
    states = [(r, q) for r in range(n) for q in range(n + 1)]
    sidx = {s: i for i, s in enumerate(states)}
    sensor = sensor_matrix(m, p_noise)
    space = AgentSpace((5, 5), (16, 16))

    def dist(c1, c2):
        (r1, k1), (r2, k2) = m.cells[c1], m.cells[c2]
        return abs(r1 - r2) + abs(k1 - k2)

    flee = {}
    for r in range(n):
        for q in range(n):
            cand = sorted({m.neighbor(q, d) for d in range(4)} - {q})
            if not cand:
                flee[r, q] = {q: 1.0}
                continue
            best = max(dist(r, c) for c in cand)
            far = [c for c in cand if dist(r, c) == best]
            probs = {q: 1.0 - flee_prob}
            for c in far:
                probs[c] = probs.get(c, 0.0) + flee_prob / len(far)
            flee[r, q] = probs

    trans = []
    for a_r, a_o in space.joint_actions():
        rows, cols, vals = [], [], []
        for (r, q), i in sidx.items():
            if q == tagged:
                rows.append(i); cols.append(i); vals.append(1.0)
                continue
            if a_r == TAG_ACTION and r == q:
                rows.append(i); cols.append(sidx[r, tagged]); vals.append(1.0)
                continue
            r2 = r if a_r == TAG_ACTION else m.neighbor(r, a_r)
            for q2, pr in flee[r, q].items():
                rows.append(i); cols.append(sidx[r2, q2]); vals.append(pr)
        trans.append(sp.csr_matrix((vals, (rows, cols)), shape=(len(states),) * 2))
    obs_r = sensor[[r for r, _ in states]]
    # a tagged opponent shares the robot's cell
    obs_o = sensor[[r if q == tagged else q for r, q in states]]
    init = np.array([0.0 if q == tagged else 1.0 for _, q in states])
    init /= init.sum()
    terminal = np.array([q == tagged for _, q in states])

    def reward(s, a, s2):
        r, q = states[s]
        if a[0] == TAG_ACTION:
            if states[s2][1] == tagged:
                return (10.0, -10.0)
            return (-10.0, -1.0)
        return (-1.0, -1.0)

    env = TabularEnv("tag", space, trans, [obs_r, obs_o], init, terminal, reward)
    env.map = m
    env.states = states
    return env


# ---------------------------------------------------------------- Poc-Man*

@dataclass(frozen=True)
class PocState:
    agents: tuple[int, ...]
    ghosts: tuple[int, ...]
    food: frozenset


class PocManEnv:
    """Two foragers, four ghosts, food on a random subset of 'o' cells.

    Observation (9 bits): noisy wall bits N,E,S,W (bits 8..5), ghost in line of
    sight N,E,S,W (bits 4..1), food in an adjacent cell (bit 0).  Ghosts chase
    the nearest agent with probability ``chase_prob``, else move randomly.  The
    episode ends when a ghost catches an agent or no food is left.
    """

    explicit = False
    domain = "pocman"

    def __init__(self, m: MapSpec | None = None, p_noise: float = 0.1, chase_prob: float = 0.75,
                 food_prob: float = 0.5):
        self.map = m if m is not None else MapSpec.builtin("pocman")
        self.p_noise = p_noise
        self.chase_prob = chase_prob
        self.food_prob = food_prob
        self.starts = self.map.marked("P")
        self.ghost_starts = self.map.marked("X")
        self.food_cells = self.map.marked("o")
        if len(self.starts) < 2:
            raise InvalidArgumentError("Poc-Man map needs two 'P' starts")
        self.space = AgentSpace((4, 4), (512, 512))
        n = len(self.map.cells)
        self._nbr = [[self.map.neighbor(c, d) for d in range(4)] for c in range(n)]
        self._bits = [self.map.wall_bits(c) for c in range(n)]

    def _dist(self, c1, c2):
        (r1, k1), (r2, k2) = self.map.cells[c1], self.map.cells[c2]
        return abs(r1 - r2) + abs(k1 - k2)

    def reset(self, rng) -> EpisodeState:
        food = frozenset(c for c in self.food_cells if rng.random() < self.food_prob)
        return EpisodeState(PocState(tuple(self.starts[:2]), tuple(self.ghost_starts), food), rng)

    def _ghost_move(self, g, agents, rng):
        cand = sorted(set(self._nbr[g]) - {g}) or [g]
        if rng.random() < self.chase_prob:
            target = min(agents, key=lambda a: (self._dist(g, a), a))
            best = min(self._dist(c, target) for c in cand)
            cand = [c for c in cand if self._dist(c, target) == best]
        return cand[int(rng.integers(len(cand)))]

    def _sight(self, cell, ghosts) -> int:
        bits = 0
        for d in range(4):
            c = cell
            while True:
                nxt = self._nbr[c][d]
                if nxt == c:
                    break
                c = nxt
                if c in ghosts:
                    bits |= 8 >> d
                    break
        return bits

    def _observe(self, cell, st: PocState, rng) -> int:
        walls = self._bits[cell]
        flips = sum((rng.random() < self.p_noise) << (3 - d) for d in range(4))
        ghosts = self._sight(cell, set(st.ghosts))
        food = int(any(n in st.food for n in self._nbr[cell] if n != cell))
        return ((walls ^ flips) << 5) | (ghosts << 1) | food

    def step(self, st: EpisodeState, a: tuple[int, ...]):
        s: PocState = st.state
        rng = st.rng
        agents = tuple(self._nbr[c][d] for c, d in zip(s.agents, a))
        food = set(s.food)
        rewards = []
        for c in agents:
            r = -1.0
            if c in food:
                food.discard(c)
                r += 1.0
            rewards.append(r)
        ghosts = tuple(self._ghost_move(g, agents, rng) for g in s.ghosts)
        new = PocState(agents, ghosts, frozenset(food))
        caught = any(c in ghosts for c in agents)
        o = tuple(self._observe(c, new, rng) for c in agents)
        st.state = new
        return o, tuple(rewards), bool(caught or not food)


# ---------------------------------------------------------------- public API

def make_env(domain: str, p_noise: float = 0.1, map_path: str | Path | None = None):
    """Build a domain by name: tag, gridworld, colored_gridworld, pocman, gridworld3."""
    m = MapSpec.from_file(map_path) if map_path else None
    if domain == "tag":
        return make_tag(m, p_noise)
    if domain == "gridworld":
        return make_gridworld(m, p_noise)
    if domain == "colored_gridworld":
        return make_gridworld(m, p_noise, colored=True)
    if domain == "gridworld3":
        return make_gridworld(m, p_noise, n_agents=3)
    if domain == "pocman":
        return PocManEnv(m, p_noise)
    raise InvalidArgumentError(f"unknown domain {domain!r}; expected one of {DOMAINS}")


def env_step(env, st: EpisodeState, a: Sequence[int]):
    """Advance one step: returns (joint observation, per-agent rewards, done)."""
    if st.done:
        raise InvalidStateError("episode is over")
    a = tuple(int(x) for x in a)
    if len(a) != env.space.num_agents or any(not 0 <= x < n for x, n in zip(a, env.space.n_actions)):
        raise InvalidArgumentError(f"invalid joint action {a}")
    o, r, done = env.step(st, a)
    st.t += 1
    st.done = done
    return o, r, done


def random_joint_action(space: AgentSpace, rng) -> tuple[int, ...]:
    return tuple(int(rng.integers(n)) for n in space.n_actions)


def generate_trajectories(env, n_episodes: int, max_len: int, seed: int) -> TrajectorySet:
    """Uniform-random exploration until done or ``max_len`` steps."""
    if n_episodes < 1 or max_len < 1:
        raise InvalidArgumentError("n_episodes and max_len must be >= 1")
    rng = np.random.default_rng(seed)
    episodes = []
    for _ in range(n_episodes):
        st = env.reset(rng)
        steps = []
        while not st.done and st.t < max_len:
            a = random_joint_action(env.space, rng)
            o, r, _ = env_step(env, st, a)
            steps.append(Step(a, o, r))
        episodes.append(tuple(steps))
    return TrajectorySet(episodes)


def filter_belief(env: TabularEnv, h: History) -> np.ndarray:
    """Belief over joint states after ``h``, given the episode is still running."""
    if not env.explicit:
        raise InvalidArgumentError("exact filtering needs explicit kernels")
    b = env.init.copy()
    for a, o in h:
        b = env.trans[env.space.action_index(a)].T @ b
        b = b * env.obs_likelihood(a, o)
        b[env.terminal] = 0.0
        z = b.sum()
        if z <= 0.0:
            raise UndefinedHistoryError("history has zero likelihood under the model")
        b /= z
    return b


def belief_oracle(env: TabularEnv, h: History, a: Sequence[int]) -> np.ndarray:
    """Exact ``p(o | h, a)`` over joint observations (row-major, agent 0 slowest)."""
    b = filter_belief(env, h)
    b2 = env.trans[env.space.action_index(tuple(a))].T @ b
    return env.joint_obs_dist(b2, tuple(a))


def exact_test_prob(env: TabularEnv, h: History, test) -> float:
    """``p(t | h)`` for a joint test by chaining exact one-step conditionals."""
    b = filter_belief(env, h)
    prob = 1.0
    for a, o in test:
        b = env.trans[env.space.action_index(a)].T @ b
        b = b * env.obs_likelihood(a, o)
        z = b.sum()
        prob *= z
        if z <= 0.0:
            return 0.0
        b[env.terminal] = 0.0
        if b.sum() <= 0.0:
            return prob
        b /= b.sum()
    return float(prob)


def exact_dynamics_tensor(env: TabularEnv, tests, hists) -> np.ndarray:
    """Noise-free counterpart of the estimated tensor (zero-likelihood histories
    give zero columns; mixed-length cells stay zero)."""
    from .estimation import joint_test
    out = np.zeros(tests.shape + (len(hists),))
    lens = tests.lengths
    for k, h in enumerate(hists.histories):
        try:
            filter_belief(env, h)
        except UndefinedHistoryError:
            continue
        for idx in itertools.product(*(range(n) for n in tests.shape)):
            if len({int(lens[p][i]) for p, i in enumerate(idx)}) != 1:
                continue
            t = joint_test([tests.tests[p][i] for p, i in enumerate(idx)])
            out[idx + (k,)] = exact_test_prob(env, h, t)
    return out


def mc_oracle(env, h: History, a: Sequence[int], n_rollouts: int, seed: int,
              condition_actions: bool = True):
    """Monte-Carlo estimate of ``p(o | h, a)`` by rejection sampling.

    Rollouts follow the uniform exploration policy and are kept when their
    prefix reproduces ``h`` then ``a``.  Because that policy ignores
    observations, ``condition_actions=True`` draws the actions already
    conditioned on matching (every rollout survives the action check) and only
    the observations are rejected; ``False`` rejects on actions as well.
    Returns ``(distribution, retained_count)``; with nothing retained the
    distribution is uniform and a warning is logged.
    """
    if n_rollouts < 1:
        raise InvalidArgumentError("n_rollouts must be >= 1")
    rng = np.random.default_rng(seed)
    space = env.space
    a = tuple(int(x) for x in a)
    steps = list(h) + [(a, None)]
    n_act = space.n_joint_actions
    counts = np.zeros(space.n_joint_obs)
    if env.explicit:
        states = env.sample_init(rng, n_rollouts)
        for ah, oh in steps:
            if not condition_actions:
                states = states[rng.integers(n_act, size=states.size) == space.action_index(ah)]
            states = env.sample_next(states, space.action_index(ah), rng)
            obs = env.sample_obs(states, ah, rng)
            if oh is None:
                flat = np.ravel_multi_index(obs.T, space.n_obs)
                counts += np.bincount(flat, minlength=space.n_joint_obs)
                break
            keep = np.all(obs == np.asarray(oh), axis=1) & ~env.terminal[states]
            states = states[keep]
    else:
        for _ in range(n_rollouts):
            st = env.reset(rng)
            for ah, oh in steps:
                if not condition_actions and random_joint_action(space, rng) != tuple(ah):
                    break
                o, _, done = env_step(env, st, ah)
                if oh is None:
                    counts[space.obs_index(o)] += 1
                elif tuple(o) != tuple(oh) or done:
                    break
    retained = int(counts.sum())
    if retained == 0:
        log.warning("mc_oracle retained no rollouts; returning the uniform distribution")
        return np.full(space.n_joint_obs, 1.0 / space.n_joint_obs), 0
    return counts / retained, retained


def random_factored_pomdp(seed: int = 0, n_local: int = 2, n_actions: int = 2, n_obs: int = 2,
                          n_agents: int = 2) -> TabularEnv:
    """Small random POMDP over local states ``(s_1..s_N)``.

    Agent ``p`` moves its own component with a kernel that may depend on the
    whole joint state, and observes its own component only, so the joint
    one-step observation probability factorizes given the state and the
    dynamics tensor has CP rank at most the number of joint states.
    """
    rng = np.random.default_rng(seed)
    states = _product_states([n_local] * n_agents)
    n = len(states)
    local_t = rng.dirichlet(np.ones(n_local), size=(n_agents, n, n_actions))
    local_o = rng.dirichlet(np.ones(n_obs), size=(n_agents, n_local))
    space = AgentSpace((n_actions,) * n_agents, (n_obs,) * n_agents)
    trans = []
    for a in space.joint_actions():
        t = np.ones((n, n))
        for j, s2 in enumerate(states):
            for p in range(n_agents):
                t[:, j] *= local_t[p, :, a[p], s2[p]]
        trans.append(t)
    obs = [local_o[p][[s[p] for s in states]] for p in range(n_agents)]
    init = rng.dirichlet(np.ones(n))
    env = TabularEnv("factored", space, trans, obs, init)
    env.states = states
    return env


def random_sensing_pomdp(seed: int = 0, n_states: int = 3, n_actions: int = 2, n_obs: int = 2,
                         n_agents: int = 2) -> TabularEnv:
    """Small random POMDP where actions only choose what each agent senses.

    The world state drifts by one action-independent kernel and agent ``p``
    observes it through ``O_p(o | s', a_p)``.  The one-step dynamics tensor is
    then a sum of ``n_states`` rank-one terms whose factor matrices have full
    column rank, so its CP rank equals the linear dimension ``n_states``.
    """
    rng = np.random.default_rng(seed)
    drift = rng.dirichlet(np.ones(n_states), size=n_states)
    space = AgentSpace((n_actions,) * n_agents, (n_obs,) * n_agents)
    obs = [rng.dirichlet(np.ones(n_obs), size=(n_actions, n_states)) for _ in range(n_agents)]
    init = rng.dirichlet(np.ones(n_states))
    return TabularEnv("sensing", space, [drift] * space.n_joint_actions, obs, init)
