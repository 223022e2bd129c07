"""AE(1) and fit error of a decomposition model as the Laplace weight varies.

Without smoothing, histories seen once contribute 0/1 slices that dominate the
least-squares objective and the empty-history slice is fitted poorly.
"""

import argparse

from tensorpsr.eval import ExperimentConfig, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--domain", default="gridworld")
    ap.add_argument("--method", default="NCP")
    ap.add_argument("--alphas", default="0,0.001,0.01,0.1,1")
    ap.add_argument("--max-histories", type=int, default=500)
    ap.add_argument("--rounds", type=int, default=1)
    args = ap.parse_args()
    print(f"{'alpha':>8} {'AE(1)':>8} {'AE(2)':>8} {'uniform':>8}")
    for alpha in (float(a) for a in args.alphas.split(",")):
        cfg = ExperimentConfig(domain=args.domain, methods=(args.method, "uniform"),
                               rounds=args.rounds, alpha=alpha, max_histories=args.max_histories,
                               n_test=300, test_len=2, record_timings=False)
        rep = run_experiment(cfg)
        print(f"{alpha:8g} {rep.ae(args.method, 1):8.4f} {rep.ae(args.method, 2):8.4f} "
              f"{rep.ae('uniform', 1):8.4f}")


if __name__ == "__main__":
    main()
