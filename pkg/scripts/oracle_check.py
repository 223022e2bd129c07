"""Compare roll-out and exact-belief next-observation laws at the empty history.

For each joint action prints the total-variation distance of the roll-out
estimate and the TV that pure multinomial sampling from the exact law gives
at the same sample size (mean and standard deviation over redraws).
"""

import argparse

import numpy as np

from tensorpsr.envs import belief_oracle, make_env, mc_oracle


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--domain", default="gridworld")
    ap.add_argument("--rollouts", type=int, default=100_000)
    ap.add_argument("--seed", type=int, default=8)
    ap.add_argument("--redraws", type=int, default=200)
    args = ap.parse_args()
    env = make_env(args.domain)
    n = args.rollouts
    rng = np.random.default_rng(args.seed)
    print(f"{'action':>8} {'TV':>8} {'E[TV]':>8} {'sd':>8}  z")
    for a in env.space.joint_actions():
        p = belief_oracle(env, (), a)
        dist, _ = mc_oracle(env, (), a, n, args.seed)
        tv = 0.5 * np.abs(dist - p).sum()
        null = np.array([0.5 * np.abs(rng.multinomial(n, p) / n - p).sum()
                         for _ in range(args.redraws)])
        print(f"{str(a):>8} {tv:8.4f} {null.mean():8.4f} {null.std():8.4f}  "
              f"{(tv - null.mean()) / null.std():+.2f}")


if __name__ == "__main__":
    main()
