"""Seeded toy distributions and the Gaussian base measure.

Every generator is a pure function of its arguments and ``seed``; ``seed`` may
be an int or an existing ``numpy.random.Generator`` (which is then consumed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# 8-gaussian / 25-gaussian geometry before the global rescale into [-1, 1]^2.
RING_RADIUS = 2.0
RING_STD = 0.02
GRID_STD = 0.05
RESCALE = 1.0 / 2.5

SWISS_T_RANGE = (1.5 * np.pi, 4.5 * np.pi)
SWISS_NOISE = 0.01
SWISS_SCALE = 0.9


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Uniformly weighted particles, one per row."""

    points: np.ndarray

    def __post_init__(self):
        p = np.array(self.points, dtype=np.float64)
        if p.ndim != 2 or p.shape[0] == 0:
            raise ValueError(f"need a nonempty (n, dim) array, got shape {p.shape}")
        object.__setattr__(self, "points", p)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self):
        return self.points.shape[0]


def _check_n(n):
    if int(n) < 1:
        raise ValueError(f"need n >= 1, got {n}")
    return int(n)


def swiss_roll(n, seed, noise=SWISS_NOISE, scale=SWISS_SCALE, return_angle=False):
    n = _check_n(n)
    rng = np.random.default_rng(seed)
    lo, hi = SWISS_T_RANGE
    t = rng.uniform(lo, hi, size=n)
    pts = scale * np.stack([t * np.cos(t), t * np.sin(t)], axis=1) / hi
    pts = pts + noise * rng.standard_normal((n, 2))
    pts = np.clip(pts, -1.0, 1.0)
    m = EmpiricalMeasure(pts)
    return (m, t) if return_angle else m


def gaussian_mixture(centers, std, n, seed) -> EmpiricalMeasure:
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    if centers.size == 0:
        raise ValueError("empty centers")
    if std < 0:
        raise ValueError("std must be nonnegative")
    n = _check_n(n)
    rng = np.random.default_rng(seed)
    comp = rng.integers(0, centers.shape[0], size=n)
    noise = rng.standard_normal((n, centers.shape[1]))
    return EmpiricalMeasure(centers[comp] + std * noise)


def ring_centers(k=8, radius=RING_RADIUS, rescale=RESCALE):
    ang = 2.0 * np.pi * np.arange(k) / k
    return rescale * radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def grid_centers(side=5, half_width=2.0, rescale=RESCALE):
    ticks = np.linspace(-half_width, half_width, side)
    gx, gy = np.meshgrid(ticks, ticks, indexing="ij")
    return rescale * np.stack([gx.ravel(), gy.ravel()], axis=1)


def eight_gaussians(n, seed, std=RING_STD, rescale=RESCALE):
    return gaussian_mixture(ring_centers(8, rescale=rescale), rescale * std, n, seed)


def twenty_five_gaussians(n, seed, std=GRID_STD, rescale=RESCALE):
    return gaussian_mixture(grid_centers(rescale=rescale), rescale * std, n, seed)


def gaussian_noise(dim, std, n, seed) -> EmpiricalMeasure:
    if std < 0:
        raise ValueError("std must be nonnegative")
    n = _check_n(n)
    rng = np.random.default_rng(seed)
    return EmpiricalMeasure(std * rng.standard_normal((n, int(dim))))


TOY_SIZES = {"swiss_roll": 500, "8gaussians": 500, "25gaussians": 1000}


def toy(name: str, n=None, seed=0) -> EmpiricalMeasure:
    n = TOY_SIZES[name] if n is None else n
    if name == "swiss_roll":
        return swiss_roll(n, seed)
    if name == "8gaussians":
        return eight_gaussians(n, seed)
    if name == "25gaussians":
        return twenty_five_gaussians(n, seed)
    raise ValueError(f"unknown toy dataset {name!r}")


def toy_geometry(name: str) -> dict:
    """Geometry constants that affect the numbers, for manifests and hashing."""
    if name == "swiss_roll":
        return {"swiss_t_lo": SWISS_T_RANGE[0], "swiss_t_hi": SWISS_T_RANGE[1],
                "swiss_noise": SWISS_NOISE, "swiss_scale": SWISS_SCALE}
    if name == "8gaussians":
        return {"ring_radius": RING_RADIUS, "ring_std": RING_STD, "rescale": RESCALE}
    if name == "25gaussians":
        return {"grid_half_width": 2.0, "grid_std": GRID_STD, "rescale": RESCALE}
    return {}


def toy_modes(name: str):
    """``(centers, component_std)`` in final coordinates, for mixture toys."""
    if name == "8gaussians":
        return ring_centers(8), RESCALE * RING_STD
    if name == "25gaussians":
        return grid_centers(), RESCALE * GRID_STD
    raise ValueError(f"{name!r} has no discrete modes")


def write_csv(path, points, header=("x", "y")) -> None:
    points = np.asarray(points, dtype=np.float64).reshape(-1, len(header))
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in points:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_csv(path) -> np.ndarray:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty file")
    rows = [[float(v) for v in ln.split(",")] for ln in lines[1:]]
    ncol = len(lines[0].split(","))
    return np.array(rows, dtype=np.float64).reshape(-1, ncol)
