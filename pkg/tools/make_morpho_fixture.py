#!/usr/bin/env python3
"""Build a Morpho-MNIST-style dataset from the 5k MNIST subset bundled with mlxtend.

Real Morpho-MNIST files are not available offline, so this script produces
files in the same layout (gzip IDX images plus a CSV attribute table) for the
end-to-end acceptance runs. Each raw digit is perturbed to attributes drawn
from a known SCM, matching the causal graph t -> i, with s and the label as
roots:

    t = 0.5 + Gamma(shape=10, scale=0.2)
    i = 191 * sigmoid(0.5 * eps_i + 2 t - 5) + 64,   eps_i ~ N(0, 1)
    s ~ N(0, 0.25)   (radians)

Thickness is imposed by redrawing the stroke as a tube of the required width
around its skeleton at 4x resolution, slant by shearing, intensity by
rescaling brightness.

    python tools/make_morpho_fixture.py --out data/morpho
"""
from __future__ import annotations

import argparse
import csv
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage.morphology import skeletonize

from cgmexplain.data import write_idx
from cgmexplain.morphometrics import binarize, measure_slant, measure_thickness, upsample

SCALE = 4


def sample_scm(rng, n):
    t = 0.5 + rng.gamma(10.0, 0.2, size=n)
    i = 191.0 / (1.0 + np.exp(-(0.5 * rng.standard_normal(n) + 2.0 * t - 5.0))) + 64.0
    s = rng.normal(0.0, 0.25, size=n)
    return t, i, s


def _tube(skel_dist, radius):
    return skel_dist <= radius


def _shear_up(img, shear):
    weights = img.sum(axis=1)
    r_c = float(np.dot(np.arange(img.shape[0]), weights) / weights.sum())
    matrix = np.array([[1.0, 0.0], [shear, 1.0]])
    return ndimage.affine_transform(img, matrix, offset=[0.0, -shear * r_c], order=1)


def perturb(image, thickness, intensity, slant):
    """Return a uint8 28x28 digit with the requested morphology."""
    mask = binarize(upsample(image, SCALE), 0.5)
    skel = skeletonize(mask)
    skel_dist = ndimage.distance_transform_edt(~skel)
    radius = max(thickness * SCALE / 2.0 - 0.5, 0.5)
    for _ in range(3):
        tube = _tube(skel_dist, radius)
        measured = measure_thickness(tube, SCALE)
        if not np.isfinite(measured) or abs(measured - thickness) < 0.05:
            break
        radius = max(radius * thickness / measured, 0.5)
    tube = _tube(skel_dist, radius).astype(np.float64)

    tan_now = np.tan(measure_slant(tube > 0.5))
    up = _shear_up(tube, np.tan(slant) - tan_now)
    up = ndimage.gaussian_filter(up, 1.0)
    small = up.reshape(28, SCALE, 28, SCALE).mean(axis=(1, 3))
    small /= small.max()
    median = np.median(small[small >= 0.5])
    small = np.clip(small * (intensity / 255.0) / median, 0.0, 1.0)
    return np.round(small * 255.0).astype(np.uint8)


def build_split(raw, labels, variants, rng):
    n = len(raw) * variants
    src = np.repeat(np.arange(len(raw)), variants)
    order = rng.permutation(n)
    src = src[order]
    t, i, s = sample_scm(rng, n)
    images = np.stack([perturb(raw[src[k]], t[k], i[k], s[k]) for k in range(n)])
    rows = [
        {"index": k, "thickness": t[k], "intensity": i[k], "slant": s[k], "label": int(labels[src[k]])}
        for k in range(n)
    ]
    return images, rows


def write_split(out: Path, prefix: str, images, rows):
    write_idx(out / f"{prefix}-images-idx3-ubyte.gz", images)
    with open(out / f"{prefix}-morpho.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["index", "thickness", "intensity", "slant", "label"])
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--out", type=Path, required=True)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--n-test-digits", type=int, default=1000)
    parser.add_argument("--train-variants", type=int, default=2)
    parser.add_argument("--test-variants", type=int, default=2)
    args = parser.parse_args(argv)

    from mlxtend.data import mnist_data

    X, y = mnist_data()
    X = X.reshape(-1, 28, 28) / 255.0
    rng = np.random.default_rng(args.seed)
    perm = rng.permutation(len(X))
    test_idx, train_idx = perm[: args.n_test_digits], perm[args.n_test_digits :]

    args.out.mkdir(parents=True, exist_ok=True)
    for prefix, idx, variants in (("train", train_idx, args.train_variants), ("t10k", test_idx, args.test_variants)):
        images, rows = build_split(X[idx], y[idx], variants, rng)
        write_split(args.out, prefix, images, rows)
        print(f"{prefix}: {len(rows)} images -> {args.out}")


if __name__ == "__main__":
    main()
