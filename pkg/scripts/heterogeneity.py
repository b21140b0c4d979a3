"""Client dissimilarity and label entropy as the Dirichlet concentration varies.

    python3 scripts/heterogeneity.py --seeds 20
"""

import argparse

import numpy as np

from cahfp.analysis import client_gradients, estimate_zeta2
from cahfp.data import class_entropy, client_weights, dirichlet_partition, synth_dataset
from cahfp.nn import init_params, mlp


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--alphas", type=float, nargs="+", default=[0.05, 0.1, 0.5, 1.0, 10.0, 100.0])
    ap.add_argument("--clients", type=int, default=10)
    args = ap.parse_args()

    print(f"{'alpha':>8}  {'entropy':>8}  {'zeta2':>10}")
    for alpha in args.alphas:
        ent, zeta = [], []
        for seed in range(args.seeds):
            ds = synth_dataset(10, 32, 200, 4.0, seed=seed)
            arch = mlp(32, [32], 10)
            w = init_params(arch, np.random.default_rng([seed, 7]))
            part = dirichlet_partition(ds.y, args.clients, alpha, seed=seed, max_retries=1000)
            _, grads = client_gradients(arch, w, [(ds.x[s], ds.y[s]) for s in part.shards])
            ent.append(class_entropy(ds.y, part.shards, 10))
            zeta.append(estimate_zeta2(client_weights(part), grads))
        print(f"{alpha:>8g}  {np.mean(ent):>8.3f}  {np.mean(zeta):>10.4g}")


if __name__ == "__main__":
    main()
