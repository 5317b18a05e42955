#!/usr/bin/env python3
"""Long-time bias and MSE of the time-average estimator.

Fits the 1/(n delta) legs of the estimator error against a stationary
proxy from one long run.
"""

import argparse

from snselab.experiments import StationaryBiasConfig, stationary_bias_study


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--replicas", type=int, default=64)
    args = ap.parse_args()

    cfg = StationaryBiasConfig(replicas=args.replicas)
    report = stationary_bias_study(cfg, args.seed)
    print(f"stationary proxy = {report.scalars['stationary_proxy']:.5f}")
    print(f"{'n':>6} {'t':>7} {'bias':>12} {'mse':>12}")
    for rb, rm in zip(report.tables["bias"], report.tables["mse"]):
        print(f"{rb['n']:>6} {rb['t']:>7.1f} {rb['bias']:>12.5e} {rm['mse']:>12.5e}")
    print(f"bias decay exponent = {report.scalars['bias_exponent']:.3f}  "
          f"mse decay exponent = {report.scalars['mse_exponent']:.3f}")


if __name__ == "__main__":
    main()
