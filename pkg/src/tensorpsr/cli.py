"""Command-line entry point: gen, learn, eval, compare, inspect.

Every subcommand accepts ``--config FILE`` holding ``key = value`` lines
(``#`` starts a comment); keys are the long option names with dashes or
underscores.  Explicit command-line flags override the file.

Exit codes: 0 ok, 2 bad configuration, 3 I/O failure, 4 learning failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError

EXIT_CONFIG, EXIT_IO, EXIT_LEARN = 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _opt_str(v):
    return None if v in (None, "", "none", "None") else str(v)


# option name -> (type, default); None default with required=True is checked later
GEN_OPTS = {"domain": (str, "gridworld"), "episodes": (int, 2000), "max_len": (int, 10),
            "seed": (int, 0), "out": (str, None), "p_noise": (float, 0.1), "map": (_opt_str, None)}
LEARN_OPTS = {"method": (str, "ncp"), "rank": (str, "20"), "traj": (str, None), "out": (str, None),
              "domain": (_opt_str, None), "max_test_len": (int, 1), "min_count": (int, 1),
              "max_hist_len": (int, 10), "max_histories": (int, 2000),
              "enumerate_one_step": (_bool, True), "alpha": (float, 0.0),
              "lambda_r": (float, 1e-6), "seed": (int, 0), "max_iters": (int, 500),
              "tol": (float, 1e-8), "init": (str, "svd"), "cpsr_d": (int, 0)}
EVAL_OPTS = {"model": (_opt_str, None), "traj": (str, None), "domain": (str, "gridworld"),
             "out": (str, None), "oracle": (str, "belief"), "rollouts": (int, 10_000),
             "seed": (int, 0), "p_noise": (float, 0.1), "map": (_opt_str, None),
             "max_len": (int, 0)}
REQUIRED = {"gen": ("out",), "learn": ("traj", "out"), "eval": ("traj", "out"),
            "compare": ("out",)}


def _experiment_opts() -> dict:
    from .eval import ExperimentConfig
    out = {}
    for f in dataclasses.fields(ExperimentConfig):
        default = f.default
        if f.name == "methods":
            out[f.name] = (str, ",".join(default))
        elif isinstance(default, bool):
            out[f.name] = (_bool, default)
        elif default is None:
            out[f.name] = (_opt_str, None)
        else:
            out[f.name] = (type(default), default)
    out["out"] = (str, None)
    return out


def read_config(path: str | Path) -> dict[str, str]:
    """Parse a ``key = value`` file into raw strings."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read config {path}: {exc.strerror}") from exc
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(EXIT_CONFIG, f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve(cmd: str, schema: dict, args: argparse.Namespace) -> dict:
    """Merge defaults, config file and flags; reject unknown keys, coerce types."""
    raw: dict = {}
    if getattr(args, "config", None):
        raw.update(read_config(args.config))
    for key, val in getattr(args, "set", None) or []:
        raw[key.replace("-", "_")] = val
    for key in schema:
        val = getattr(args, key, None)
        if val is not None:
            raw[key] = val
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise CliError(EXIT_CONFIG, f"unknown configuration keys: {', '.join(unknown)}")
    out = {}
    for key, (typ, default) in schema.items():
        if key in raw:
            try:
                out[key] = typ(raw[key])
            except (TypeError, ValueError) as exc:
                raise CliError(EXIT_CONFIG, f"bad value for {key}: {raw[key]!r}") from exc
        else:
            out[key] = default
    for key in REQUIRED.get(cmd, ()):
        if out.get(key) in (None, ""):
            raise CliError(EXIT_CONFIG, f"missing required option --{key.replace('_', '-')}")
    return out


def _need_file(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_IO, f"no such file: {path}")
    return p


def _out_path(path: str, is_dir: bool = False) -> Path:
    p = Path(path)
    parent = p if is_dir and p.exists() else p.parent
    if not parent.exists() and not is_dir:
        raise CliError(EXIT_IO, f"output directory does not exist: {parent}")
    if is_dir and p.exists() and not p.is_dir():
        raise CliError(EXIT_IO, f"not a directory: {p}")
    return p


def _env(domain: str, p_noise: float, map_path):
    from .envs import make_env
    if map_path:
        _need_file(map_path)
    try:
        return make_env(domain, p_noise, map_path)
    except InvalidArgumentError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc


def _read_traj(path: str):
    from .estimation import read_trajectories
    try:
        return read_trajectories(_need_file(path))
    except InvalidArgumentError as exc:
        raise CliError(EXIT_IO, str(exc)) from exc


# ---------------------------------------------------------------- subcommands

def cmd_gen(opts: dict) -> str:
    from .envs import generate_trajectories
    from .estimation import write_trajectories
    out = _out_path(opts["out"])
    env = _env(opts["domain"], opts["p_noise"], opts["map"])
    if opts["episodes"] < 1 or opts["max_len"] < 1:
        raise CliError(EXIT_CONFIG, "episodes and max-len must be >= 1")
    trajs = generate_trajectories(env, opts["episodes"], opts["max_len"], opts["seed"])
    write_trajectories(trajs, out)
    return f"wrote {len(trajs)} episodes to {out}"


def _rank(text: str):
    parts = [int(p) for p in str(text).replace(" ", "").split(",") if p]
    if not parts:
        raise ValueError("empty rank")
    return parts[0] if len(parts) == 1 else tuple(parts)


def cmd_learn(opts: dict) -> str:
    from .baselines import ProjectionSpec, learn_cpsr, learn_tpsr
    from .decomp import DecompConfig
    from .estimation import (build_history_set, build_sds_matrix, build_sds_tensor,
                             build_test_sets)
    from .psr import config_hash, learn_psr
    out = _out_path(opts["out"])
    trajs = _read_traj(opts["traj"])
    method = opts["method"].upper()
    try:
        rank = _rank(opts["rank"])
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"bad rank {opts['rank']!r}") from exc
    if method not in ("CP", "NCP", "TD", "NTD", "TPSR", "CPSR"):
        raise CliError(EXIT_CONFIG, f"unknown method {opts['method']!r}")
    if opts["alpha"] < 0 or opts["lambda_r"] < 0:
        raise CliError(EXIT_CONFIG, "alpha and lambda-r must be >= 0")
    try:
        dcfg = None
        if method not in ("TPSR", "CPSR"):
            dcfg = DecompConfig(method, rank, opts["max_iters"], opts["tol"], opts["seed"],
                                opts["init"])
        elif not isinstance(rank, int):
            raise InvalidArgumentError("matrix methods take a single rank")
    except InvalidArgumentError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc
    if opts["domain"]:
        space = _env(opts["domain"], 0.1, None).space
    else:
        try:
            space = trajs.infer_space()
        except InvalidArgumentError as exc:
            raise CliError(EXIT_IO, str(exc)) from exc
    try:
        trajs.validate(space)
    except InvalidArgumentError as exc:
        raise CliError(EXIT_IO, f"trajectories do not fit the domain: {exc}") from exc
    try:
        tests = build_test_sets(trajs, space, opts["max_test_len"], opts["min_count"],
                                opts["enumerate_one_step"])
        hists = build_history_set(trajs, opts["max_hist_len"], opts["min_count"],
                                  opts["max_histories"])
        sds = build_sds_tensor(trajs, tests, hists, space, opts["alpha"])
        if dcfg is not None:
            model = learn_psr(sds, hists, dcfg, opts["lambda_r"])
        else:
            sdm = build_sds_matrix(trajs, tests, hists, space, opts["alpha"], sds=sds)
            r = min(rank, *sdm.matrix.shape)
            if method == "TPSR":
                model = learn_tpsr(sdm, hists, r, opts["lambda_r"])
            else:
                d = opts["cpsr_d"] or min(4 * r, sdm.matrix.shape[0])
                model = learn_cpsr(sdm, hists, ProjectionSpec(d, seed=opts["seed"]), r,
                                   opts["lambda_r"])
    except (InvalidArgumentError, np.linalg.LinAlgError, ValueError, MemoryError) as exc:
        raise CliError(EXIT_LEARN, f"learning failed: {exc}") from exc
    prov = {k: v for k, v in opts.items() if k not in ("traj", "out")}
    model.meta.update({"config": prov, "config_hash": config_hash(prov),
                       "n_episodes": len(trajs), "n_histories": len(hists)})
    try:
        model.save(out)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {out}: {exc.strerror}") from exc
    return f"wrote {method} model (R={model.R}) to {out}"


def cmd_eval(opts: dict) -> str:
    from .eval import BeliefOracle, McOracle, evaluate_model
    from .psr import PsrModel
    out = _out_path(opts["out"], is_dir=True)
    model = None
    if opts["model"] and opts["model"] != "uniform":
        try:
            model = PsrModel.load(_need_file(opts["model"]))
        except (InvalidArgumentError, json.JSONDecodeError) as exc:
            raise CliError(EXIT_IO, f"cannot read model: {exc}") from exc
    trajs = _read_traj(opts["traj"])
    env = _env(opts["domain"], opts["p_noise"], opts["map"])
    if model is not None and model.space != env.space:
        raise CliError(EXIT_CONFIG, "model and domain have different action/observation spaces")
    try:
        trajs.validate(env.space)
    except InvalidArgumentError as exc:
        raise CliError(EXIT_IO, f"trajectories do not fit the domain: {exc}") from exc
    if opts["oracle"] == "belief":
        try:
            oracle = BeliefOracle(env)
        except InvalidArgumentError as exc:
            raise CliError(EXIT_CONFIG, str(exc)) from exc
    elif opts["oracle"] == "mc":
        oracle = McOracle(env, opts["rollouts"], opts["seed"])
    else:
        raise CliError(EXIT_CONFIG, f"unknown oracle {opts['oracle']!r}")
    res = evaluate_model(model, env, trajs, oracle, opts["max_len"] or None)
    method = "uniform" if model is None else model.meta.get("method", "model")
    rank = "" if model is None else model.R
    rows = []
    for k in range(res.counts.size):
        rows.append({"domain": opts["domain"], "method": method, "rank": rank, "round": 0,
                     "step_k": k + 1, "ae_mean": float(res.mean[k]), "ae_std": float(res.std[k]),
                     "n_queries": int(res.counts[k]), "skipped": res.skipped,
                     "t_preprocess_s": 0.0, "t_model_s": 0.0, "t_predict_s": 0.0})
    from .eval import CSV_COLUMNS, _fmt
    from .psr import config_hash
    try:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: _fmt(r[k]) for k in CSV_COLUMNS})
        summary = {"config": opts, "config_hash": config_hash(opts), "skipped": res.skipped,
                   "ae_step1": rows[0]["ae_mean"] if rows else None}
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                          encoding="utf-8")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write report: {exc.strerror}") from exc
    return f"AE(1) = {rows[0]['ae_mean']:.6f} over {rows[0]['n_queries']} queries; report in {out}"


def cmd_compare(opts: dict) -> str:
    from .eval import ExperimentConfig, run_experiment
    out = _out_path(opts.pop("out"), is_dir=True)
    if opts.get("map_path"):
        _need_file(opts["map_path"])
    try:
        cfg = ExperimentConfig(**opts)
    except (InvalidArgumentError, TypeError) as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc
    if cfg.oracle == "belief" and cfg.domain == "pocman":
        raise CliError(EXIT_CONFIG, "Poc-Man* has no explicit kernels; use oracle = mc")
    try:
        report = run_experiment(cfg)
    except InvalidArgumentError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc
    try:
        report.write(out)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write report: {exc.strerror}") from exc
    parts = [f"{m}={v:.4f}" for m, v in report.summary()["ae_step1"].items()]
    return f"AE(1): {' '.join(parts)}; report in {out}"


def inspect_model(path: str) -> str:
    from .psr import PsrModel, valid_mask
    try:
        model = PsrModel.load(_need_file(path))
    except (InvalidArgumentError, json.JSONDecodeError) as exc:
        raise CliError(EXIT_IO, f"cannot read model: {exc}") from exc
    sp = model.space
    n_pairs = sp.n_joint_actions * sp.n_joint_obs
    covered = sum(model.one_step_tuple(a, o) is not None
                  for a in sp.joint_actions() for o in sp.joint_observations())
    mt = model.mtilde[valid_mask(model.tests)]
    norms = np.linalg.norm(mt, axis=1)
    big = [np.linalg.norm(m) for m in model.Mtilde.values()]
    meta = model.meta
    lines = [
        f"method: {meta.get('method', '?')}",
        f"R={model.R}",
        f"ranks: {meta.get('rank', '?')}",
        f"agents: {sp.num_agents}  actions: {list(sp.n_actions)}  observations: {list(sp.n_obs)}",
        f"tests per agent: {list(model.tests.shape)}",
        f"one-step coverage: {covered}/{n_pairs} joint pairs have a prediction vector",
        f"transition matrices: {len(model.Mtilde)} learned, {n_pairs - len(model.Mtilde)} "
        f"flagged (no data, zero parameters)",
        f"|x0| = {np.linalg.norm(model.x0):.6g}",
        f"|m~|: mean {norms.mean():.6g}  max {norms.max():.6g}  zero rows {int(np.sum(norms == 0))}",
    ]
    if big:
        lines.append(f"|M~|_F: mean {np.mean(big):.6g}  max {np.max(big):.6g}")
    if "fit_error" in meta:
        lines.append(f"fit error: {meta['fit_error']:.6g} after {meta.get('n_iters')} sweeps")
    if "config_hash" in meta:
        lines.append(f"config hash: {meta['config_hash']}")
    return "\n".join(lines)


# ---------------------------------------------------------------- parser

def _add_opts(p: argparse.ArgumentParser, schema: dict) -> None:
    p.add_argument("--config", help="key = value configuration file")
    for key in schema:
        p.add_argument("--" + key.replace("_", "-"), dest=key, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tensorpsr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="cmd", required=True)
    _add_opts(sub.add_parser("gen", help="generate trajectories (JSONL)"), GEN_OPTS)
    _add_opts(sub.add_parser("learn", help="learn a model from trajectories"), LEARN_OPTS)
    _add_opts(sub.add_parser("eval", help="AE report for a stored model"), EVAL_OPTS)
    cmp = sub.add_parser("compare", help="multi-round method comparison")
    _add_opts(cmp, _experiment_opts())
    cmp.add_argument("--set", nargs=2, action="append", metavar=("KEY", "VALUE"),
                     help="override any configuration key")
    ins = sub.add_parser("inspect", help="summarize a model file")
    ins.add_argument("model")
    return parser


def run_cli(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.cmd == "inspect":
            msg = inspect_model(args.model)
        else:
            schema = {"gen": GEN_OPTS, "learn": LEARN_OPTS, "eval": EVAL_OPTS}.get(args.cmd)
            if schema is None:
                schema = _experiment_opts()
            opts = resolve(args.cmd, schema, args)
            msg = {"gen": cmd_gen, "learn": cmd_learn, "eval": cmd_eval,
                   "compare": cmd_compare}[args.cmd](opts)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(msg)
    return 0


def main() -> None:
    sys.exit(run_cli())
