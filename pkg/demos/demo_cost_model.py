"""Operator runtime prediction: rich features vs. a collapsed proxy length.

Kernel runtimes for attention depend on how sequence lengths are spread
across the batch, not just on their total. This demo fits two regressors on
the same synthetic profiling suite: one sees the full distributional feature
set, the other sees only sqrt(sum of squared lengths). On high-variance
batches the proxy collapses distinct workloads onto one point and its error
CDF falls apart.

Run:  python3 demos/demo_cost_model.py
"""

from frontier_sim.costmodel.forest import ForestHyperparams
from frontier_sim.costmodel.model import OperatorDataset, eval_model, fit_model
from frontier_sim.costmodel.synthetic import (
    make_attention_suite,
    make_grouped_gemm_suite,
    sqrt_proxy_dataset,
)

import numpy as np


def main():
    print("generating 4000 synthetic attention batches (high length variance)...")
    suite, feats = make_attention_suite(4000, seed=21, noise=0.03, sigma=1.3)
    hp = ForestHyperparams(n_trees=40, max_depth=12, min_leaf=2)

    rich_model, rich_report = fit_model(suite, hp, seed=5)
    proxy_model, proxy_report = fit_model(sqrt_proxy_dataset(suite, feats), hp, seed=5)

    holdout = np.arange(0, len(suite), 5)
    rich_cdf = eval_model(rich_model, OperatorDataset(
        suite.schema, suite.X[holdout], suite.y[holdout]))
    proxy = sqrt_proxy_dataset(suite, feats)
    proxy_cdf = eval_model(proxy_model, OperatorDataset(
        proxy.schema, proxy.X[holdout], proxy.y[holdout]))

    print(f"\n{'threshold':>10} {'rich features':>14} {'sqrt proxy':>11}")
    for t in (0.05, 0.10, 0.20, 0.40):
        print(f"{t:>10.2f} {rich_cdf.cdf(t):>14.3f} {proxy_cdf.cdf(t):>11.3f}")
    print(f"\nmedian relative error: rich {rich_cdf.median:.3f}, "
          f"proxy {proxy_cdf.median:.3f}")

    print("\nfitting the grouped-GEMM predictor (expert load features)...")
    gg_suite, _ = make_grouped_gemm_suite(3000, seed=12, noise=0.02)
    _, gg_report = fit_model(gg_suite, hp, seed=7)
    for threshold, fraction in sorted(gg_report.holdout_cdf.items()):
        print(f"held-out cdf({threshold:.2f}) = {fraction:.3f}")


if __name__ == "__main__":
    main()
