"""Robustness perturbations: density-scaled Gaussian noise and random downsampling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .pointcloud import PointCloud
from .spatial import build_index

NOISE_SCALES = (0.01, 0.03, 0.05)
DOWNSAMPLE_RATIOS = (0.8, 0.7, 0.6)


@dataclass(frozen=True)
class DensityEstimate:
    s_density: float
    n_samples: int
    k: int
    seed: int

    def to_dict(self) -> dict:
        return {"s_density": self.s_density, "n_samples": self.n_samples, "k": self.k, "seed": self.seed}


def sampling_density(cloud: PointCloud, seed: int = 0, k: int = 10, sample_divisor: int = 10) -> DensityEstimate:
    """Mean over floor(N/10) random points of the mean distance to their k=10 nearest neighbours."""
    n = cloud.n
    m = n // sample_divisor
    if n <= k or m < 1:
        raise ValueError(f"sampling density needs more than {k} points (and N/{sample_divisor} >= 1), got {n}")
    rows = sample_rows(n, seed, sample_divisor)
    _, dist = build_index(cloud).neighbors(k, rows=rows)
    return DensityEstimate(float(dist.mean(axis=1).mean()), m, k, seed)


def sample_rows(n: int, seed: int, sample_divisor: int = 10) -> np.ndarray:
    """The point indices `sampling_density` draws for a cloud of n points."""
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=n // sample_divisor, replace=False))


def add_gaussian_noise(cloud: PointCloud, scale: float, density: DensityEstimate, seed: int = 0) -> PointCloud:
    """Isotropic zero-mean noise with per-axis std = scale * s_density. Normals and labels carried over."""
    if scale < 0:
        raise ValueError("noise scale must be nonnegative")
    sigma = scale * density.s_density
    if sigma == 0:
        return PointCloud(cloud.points, cloud.normals, cloud.labels)
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, size=cloud.points.shape)
    return PointCloud(cloud.points + noise, cloud.normals, cloud.labels)


def random_downsample(cloud: PointCloud, ratio: float, seed: int = 0) -> tuple[PointCloud, np.ndarray]:
    """Uniformly keep floor(ratio * N) points. Returns the cloud and the kept original indices (ascending)."""
    if not 0 < ratio <= 1:
        raise ValueError("ratio must lie in (0, 1]")
    m = math.floor(ratio * cloud.n + 1e-9)
    if m < 1:
        raise ValueError(f"ratio {ratio} keeps no points of {cloud.n}")
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(cloud.n, size=m, replace=False))
    return cloud.subset(keep), keep
