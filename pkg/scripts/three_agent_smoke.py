"""Learn an order-4 model on the three-agent maze and check its predictions.

Every kept history is filtered through the model and every joint action's
next-observation distribution is checked for finiteness and simplex validity;
AE(1) is compared with the uniform predictor under the exact belief oracle.
"""

import argparse
import time

import numpy as np

from tensorpsr.decomp import DecompConfig
from tensorpsr.envs import generate_trajectories, make_env
from tensorpsr.estimation import build_history_set, build_sds_tensor, build_test_sets
from tensorpsr.eval import BeliefOracle, PsrPredictor, UniformPredictor, absolute_error
from tensorpsr.psr import filter_update, learn_psr, predict_next_obs_dist


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--method", default="NCP")
    ap.add_argument("--rank", type=int, default=10)
    ap.add_argument("--train", type=int, default=500)
    ap.add_argument("--test", type=int, default=300)
    ap.add_argument("--max-histories", type=int, default=100)
    ap.add_argument("--alpha", type=float, default=0.01)
    ap.add_argument("--seed", type=int, default=11)
    args = ap.parse_args()

    t0 = time.perf_counter()
    env = make_env("gridworld3")
    sp = env.space
    train = generate_trajectories(env, args.train, 10, args.seed)
    test = generate_trajectories(env, args.test, 10, args.seed + 1)
    tests = build_test_sets(train, sp, 1, 1, enumerate_one_step=False)
    hists = build_history_set(train, 10, 1, args.max_histories)
    sds = build_sds_tensor(train, tests, hists, sp, args.alpha)
    print(f"tensor shape {sds.tensor.shape} ({sds.tensor.nbytes / 2**20:.0f} MiB), "
          f"{time.perf_counter() - t0:.1f}s")
    rank = args.rank if args.method in ("CP", "NCP") else (args.rank,) * 4
    model = learn_psr(sds, hists, DecompConfig(args.method, rank, seed=0), 1e-6)
    print(f"{args.method} fit error {model.meta['fit_error']:.4f}, {time.perf_counter() - t0:.1f}s")

    bad = 0
    for h in hists.histories:
        x = model.x0
        for ao in h:
            x, _ = filter_update(model, x, ao)
        for a in sp.joint_actions():
            p = predict_next_obs_dist(model, x, a)
            bad += not (np.all(np.isfinite(p)) and p.min() >= 0 and abs(p.sum() - 1) <= 1e-9)
    print(f"invalid predictions: {bad} of {len(hists) * sp.n_joint_actions}")

    oracle, cache = BeliefOracle(env), {}
    ae_m = absolute_error(PsrPredictor(model), test.keys, oracle, cache=cache).mean
    ae_u = absolute_error(UniformPredictor(sp), test.keys, oracle, cache=cache).mean
    for k in range(3):
        print(f"AE({k + 1}) {args.method}={ae_m[k]:.4f} uniform={ae_u[k]:.4f}")
    print(f"total {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
