#!/usr/bin/env python
"""Variance and semivariogram of generated fields over many seeds."""

import argparse
import math

import numpy as np

from ptrack.geostat import empirical_variogram, generate_field


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--nx", type=int, default=300)
    p.add_argument("--ny", type=int, default=60)
    p.add_argument("--corr-len", type=float, default=10.0)
    p.add_argument("--seeds", type=int, default=10)
    args = p.parse_args()

    lags = np.array([1, 2, 5, 10, 20, 30], dtype=float)
    var, gam = [], []
    for seed in range(args.seeds):
        f = generate_field(args.nx, args.ny, corr_len=args.corr_len, seed=seed)
        var.append(f.values.var())
        gam.append(empirical_variogram(f, lags)[0])
    print(f"variance: mean {np.mean(var):.3f}  min {np.min(var):.3f}  max {np.max(var):.3f}")
    print("lag    gamma   model")
    for lag, g in zip(lags, np.mean(gam, axis=0)):
        print(f"{lag:4.0f}  {g:.3f}   {1 - math.exp(-lag / args.corr_len):.3f}")


if __name__ == "__main__":
    main()
