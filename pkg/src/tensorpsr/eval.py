"""Absolute-error evaluation and the multi-round experiment protocol.

For every test episode the predictor is filtered along the observed prefix and
asked for a distribution over the next joint observation; the error is
``|p_hat(o) - p(o)|`` on the observation that actually followed, bucketed by
step ``k`` (``k = 1`` is the prediction from the empty history).
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .baselines import ProjectionSpec, learn_cpsr, learn_tpsr
from .decomp import DecompConfig
from .envs import generate_trajectories, make_env, mc_oracle
from .errors import InvalidArgumentError, UndefinedHistoryError
from .estimation import (AgentSpace, TrajectorySet, build_history_set, build_sds_matrix,
                         build_sds_tensor, build_test_sets)
from .psr import (PsrModel, config_hash, filter_update, learn_psr, predict_next_obs_dist)

log = logging.getLogger(__name__)

METHODS = ("CP", "NCP", "TD", "NTD", "TPSR", "CPSR", "uniform")
CSV_COLUMNS = ("domain", "method", "rank", "round", "step_k", "ae_mean", "ae_std", "n_queries",
               "skipped", "t_preprocess_s", "t_model_s", "t_predict_s")


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


# ---------------------------------------------------------------- predictors

class Predictor(Protocol):
    def start(self): ...
    def next_obs_dist(self, state, a) -> np.ndarray: ...
    def update(self, state, a, o): ...


class PsrPredictor:
    def __init__(self, model: PsrModel):
        self.model = model
        self.resets = 0

    def start(self):
        return self.model.x0.copy()

    def next_obs_dist(self, state, a):
        return predict_next_obs_dist(self.model, state, a)

    def update(self, state, a, o):
        x, reset = filter_update(self.model, state, (tuple(a), tuple(o)))
        self.resets += reset
        return x


class UniformPredictor:
    def __init__(self, space: AgentSpace):
        self.space = space

    def start(self):
        return None

    def next_obs_dist(self, state, a):
        return np.full(self.space.n_joint_obs, 1.0 / self.space.n_joint_obs)

    def update(self, state, a, o):
        return None


# ---------------------------------------------------------------- oracles

class BeliefOracle:
    """Exact ``p(o_t | h_t, a_t)`` along an episode, by incremental filtering."""

    def __init__(self, env):
        if not getattr(env, "explicit", False):
            raise InvalidArgumentError("the belief oracle needs a domain with explicit kernels")
        self.env = env

    def episode_probs(self, episode, key: int = 0) -> list[float] | None:
        env, sp = self.env, self.env.space
        b = env.init.copy()
        out = []
        for a, o in episode:
            b = env.trans[sp.action_index(a)].T @ b
            out.append(float(env.joint_obs_dist(b, a)[sp.obs_index(o)]))
            b = b * env.obs_likelihood(a, o)
            b[env.terminal] = 0.0
            z = b.sum()
            if z <= 0.0:
                if len(out) < len(episode):
                    return None
                break
            b /= z
        return out


class McOracle:
    """Roll-out estimate per step; seeds derive from (seed, episode key, step)."""

    def __init__(self, env, n_rollouts: int = 10_000, seed: int = 0):
        self.env = env
        self.n_rollouts = n_rollouts
        self.seed = seed

    def episode_probs(self, episode, key: int = 0) -> list[float] | None:
        sp = self.env.space
        out = []
        for j, (a, o) in enumerate(episode):
            dist, kept = mc_oracle(self.env, tuple(episode[:j]), a, self.n_rollouts,
                                   derive_seed(self.seed, key, j))
            if kept == 0:
                return None
            out.append(float(dist[sp.obs_index(o)]))
        return out


# ---------------------------------------------------------------- AE

@dataclass
class AeResult:
    sums: np.ndarray
    sq_sums: np.ndarray
    counts: np.ndarray
    skipped: int = 0

    @property
    def mean(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.counts > 0, self.sums / np.maximum(self.counts, 1), np.nan)

    @property
    def std(self) -> np.ndarray:
        m = self.mean
        with np.errstate(invalid="ignore"):
            var = np.where(self.counts > 0, self.sq_sums / np.maximum(self.counts, 1) - m ** 2,
                           np.nan)
        return np.sqrt(np.maximum(var, 0.0))


def absolute_error(predictor: Predictor, episodes: Sequence, oracle, max_len: int | None = None,
                   keys: Sequence[int] | None = None, cache: dict | None = None) -> AeResult:
    """Per-step mean of ``|p_hat(o) - p(o)|`` on the observed next observation.

    ``episodes`` are joint histories (tuples of ``(a, o)``).  Episodes whose
    oracle is undefined are skipped and counted.  ``cache`` maps keys to
    oracle outputs so repeated rounds reuse them.
    """
    if max_len is None:
        max_len = max((len(e) for e in episodes), default=0)
    sums = np.zeros(max_len)
    sq = np.zeros(max_len)
    counts = np.zeros(max_len, dtype=np.int64)
    skipped = 0
    sp_obs = None
    for n, ep in enumerate(episodes):
        key = keys[n] if keys is not None else n
        if cache is not None and key in cache:
            probs = cache[key]
        else:
            try:
                probs = oracle.episode_probs(ep, key)
            except UndefinedHistoryError:
                probs = None
            if cache is not None:
                cache[key] = probs
        if probs is None:
            skipped += 1
            continue
        state = predictor.start()
        for k, ((a, o), p) in enumerate(zip(ep[:max_len], probs)):
            dist = predictor.next_obs_dist(state, a)
            if sp_obs is None:
                sp_obs = oracle.env.space
            err = abs(float(dist[sp_obs.obs_index(o)]) - p)
            sums[k] += err
            sq[k] += err * err
            counts[k] += 1
            state = predictor.update(state, a, o)
    return AeResult(sums, sq, counts, skipped)


# ---------------------------------------------------------------- experiments

@dataclass(frozen=True)
class ExperimentConfig:
    domain: str = "gridworld"
    methods: tuple[str, ...] = ("NCP", "NTD", "TPSR", "CPSR", "uniform")
    rank: int = 20
    rounds: int = 20
    n_train_master: int = 2000
    train_len: int = 10
    n_test_master: int = 3000
    test_len: int = 15
    n_train: int = 500
    n_test: int = 1000
    oracle: str = "belief"
    mc_rollouts: int = 10_000
    seed: int = 0
    alpha: float = 0.0
    lambda_r: float = 1e-6
    p_noise: float = 0.1
    max_test_len: int = 1
    min_count: int = 1
    max_hist_len: int = 10
    max_histories: int = 2000
    enumerate_one_step: bool = True
    max_iters: int = 500
    tol: float = 1e-8
    init: str = "svd"
    cpsr_d: int = 0
    map_path: str | None = None
    record_timings: bool = True

    def __post_init__(self):
        raw = self.methods.split(",") if isinstance(self.methods, str) else self.methods
        methods = (m.strip() for m in raw)
        object.__setattr__(self, "methods", tuple("uniform" if m.lower() == "uniform" else m.upper()
                                                  for m in methods if m))
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise InvalidArgumentError(f"unknown methods {bad}")
        if self.rounds < 1 or min(self.n_train, self.n_test, self.n_train_master,
                                  self.n_test_master, self.train_len, self.test_len, self.rank) < 1:
            raise InvalidArgumentError("rounds, sizes and rank must be >= 1")
        if self.n_train > self.n_train_master or self.n_test > self.n_test_master:
            raise InvalidArgumentError("per-round sample larger than the master corpus")
        if self.alpha < 0 or self.lambda_r < 0:
            raise InvalidArgumentError("alpha and lambda_r must be >= 0")
        if self.oracle not in ("belief", "mc"):
            raise InvalidArgumentError(f"unknown oracle {self.oracle!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["methods"] = list(self.methods)
        return d

    @property
    def hash(self) -> str:
        d = self.to_dict()
        d.pop("record_timings")
        return config_hash(d)


@dataclass
class AeReport:
    config: ExperimentConfig
    rows: list[dict] = field(default_factory=list)
    round_rows: list[dict] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)

    def ae(self, method: str, k: int = 1) -> float:
        for r in self.rows:
            if r["method"] == method and r["step_k"] == k:
                return r["ae_mean"]
        raise KeyError((method, k))

    def round_ae(self, method: str, k: int = 1) -> list[float]:
        return [r["ae_mean"] for r in self.round_rows if r["method"] == method and r["step_k"] == k]

    def summary(self) -> dict:
        methods = sorted({r["method"] for r in self.rows})
        return {
            "config": self.config.to_dict(),
            "config_hash": self.config.hash,
            "ae_step1": {m: self.ae(m, 1) for m in methods},
            "failures": self.failures,
        }

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"report": out / "report.csv", "rounds": out / "report_rounds.csv",
                 "summary": out / "summary.json"}
        for key, rows in (("report", self.rows), ("rounds", self.round_rows)):
            with open(paths[key], "w", newline="", encoding="utf-8") as fh:
                w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
                w.writeheader()
                for r in rows:
                    w.writerow({k: _fmt(r[k]) for k in CSV_COLUMNS})
        paths["summary"].write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n",
                                    encoding="utf-8")
        return paths


def _fmt(v):
    if isinstance(v, float):
        return "nan" if np.isnan(v) else repr(v)
    return v


def learn_method(method: str, cfg: ExperimentConfig, sds, sdm, round_seed: int) -> PsrModel:
    if method in ("CP", "NCP", "TD", "NTD"):
        dcfg = DecompConfig(method, cfg.rank, cfg.max_iters, cfg.tol, round_seed, cfg.init)
        return learn_psr(sds, sds.hists, dcfg, cfg.lambda_r)
    r = min(cfg.rank, *sdm.matrix.shape)
    if method == "TPSR":
        return learn_tpsr(sdm, sdm.hists, r, cfg.lambda_r)
    d = cfg.cpsr_d or min(4 * r, sdm.matrix.shape[0])
    return learn_cpsr(sdm, sdm.hists, ProjectionSpec(d, seed=round_seed), r, cfg.lambda_r)


def make_oracle(cfg: ExperimentConfig, env):
    if cfg.oracle == "belief":
        return BeliefOracle(env)
    return McOracle(env, cfg.mc_rollouts, derive_seed(cfg.seed, 3))


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None,
                   env=None) -> AeReport:
    """Master corpora once, then per round: sample, estimate, learn, evaluate."""
    env = env if env is not None else make_env(cfg.domain, cfg.p_noise, cfg.map_path)
    oracle = make_oracle(cfg, env)
    train_master = generate_trajectories(env, cfg.n_train_master, cfg.train_len,
                                         derive_seed(cfg.seed, 1))
    test_master = generate_trajectories(env, cfg.n_test_master, cfg.test_len,
                                        derive_seed(cfg.seed, 2))
    test_keys_all = test_master.keys
    cache: dict = {}
    clock = time.perf_counter if cfg.record_timings else (lambda: 0.0)
    per_round: dict[str, list[tuple[AeResult, tuple[float, float, float]]]] = {}
    report = AeReport(cfg)
    space = env.space
    needs_matrix = any(m in ("TPSR", "CPSR") for m in cfg.methods)
    needs_tensor = any(m != "uniform" for m in cfg.methods)

    for rnd in range(cfg.rounds):
        rng = np.random.default_rng([cfg.seed, rnd])
        train_idx = np.sort(rng.choice(cfg.n_train_master, cfg.n_train, replace=False))
        test_idx = np.sort(rng.choice(cfg.n_test_master, cfg.n_test, replace=False))
        train = train_master.subset(train_idx.tolist())
        test_eps = [test_keys_all[i] for i in test_idx]
        round_seed = derive_seed(cfg.seed, 100 + rnd)

        t0 = clock()
        sds = sdm = None
        if needs_tensor:
            tests = build_test_sets(train, space, cfg.max_test_len, cfg.min_count,
                                    cfg.enumerate_one_step)
            hists = build_history_set(train, cfg.max_hist_len, cfg.min_count, cfg.max_histories)
            sds = build_sds_tensor(train, tests, hists, space, cfg.alpha)
        t_tensor = clock() - t0
        t0 = clock()
        if needs_matrix:
            sdm = build_sds_matrix(train, sds.tests, sds.hists, space, cfg.alpha, sds=sds)
        t_matrix = clock() - t0

        for method in cfg.methods:
            try:
                t0 = clock()
                if method == "uniform":
                    predictor = UniformPredictor(space)
                    t_pre = 0.0
                else:
                    predictor = PsrPredictor(learn_method(method, cfg, sds, sdm, round_seed))
                    t_pre = t_tensor + (t_matrix if method in ("TPSR", "CPSR") else 0.0)
                t_model = clock() - t0
                t0 = clock()
                res = absolute_error(predictor, test_eps, oracle, cfg.test_len,
                                     keys=test_idx.tolist(), cache=cache)
                t_pred = clock() - t0
            except Exception as exc:  # a failing method must not abort the others
                log.warning("round %d: %s failed: %s", rnd, method, exc)
                report.failures.append({"round": rnd, "method": method, "error": repr(exc)})
                continue
            per_round.setdefault(method, []).append((res, (t_pre, t_model, t_pred)))
            for k in range(cfg.test_len):
                report.round_rows.append(_row(cfg, method, rnd, k + 1, float(res.mean[k]),
                                              float(res.std[k]), int(res.counts[k]), res.skipped,
                                              (t_pre, t_model, t_pred)))
    for method in cfg.methods:
        runs = per_round.get(method)
        if not runs:
            continue
        means = np.array([r.mean for r, _ in runs])
        times = np.mean([t for _, t in runs], axis=0)
        for k in range(cfg.test_len):
            col = means[:, k]
            col = col[~np.isnan(col)]
            m = float(np.mean(col)) if col.size else float("nan")
            s = float(np.std(col)) if col.size else float("nan")
            n = int(sum(r.counts[k] for r, _ in runs))
            skipped = int(sum(r.skipped for r, _ in runs))
            report.rows.append(_row(cfg, method, "all", k + 1, m, s, n, skipped, tuple(times)))
    if out_dir is not None:
        report.write(out_dir)
    return report


def _row(cfg, method, rnd, k, mean, std, n, skipped, times) -> dict:
    rank = "" if method == "uniform" else cfg.rank
    return {"domain": cfg.domain, "method": method, "rank": rank, "round": rnd, "step_k": k,
            "ae_mean": mean, "ae_std": std, "n_queries": n, "skipped": skipped,
            "t_preprocess_s": float(times[0]), "t_model_s": float(times[1]),
            "t_predict_s": float(times[2])}


def evaluate_model(model: PsrModel | None, env, trajs: TrajectorySet, oracle,
                   max_len: int | None = None) -> AeResult:
    """AE of a stored model (or the uniform predictor when ``model`` is None)."""
    predictor = UniformPredictor(env.space) if model is None else PsrPredictor(model)
    return absolute_error(predictor, trajs.keys, oracle, max_len)
