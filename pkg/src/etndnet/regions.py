"""Rectangle sampling on the feature-map grid.

Every perturbation acts on an axis-aligned rectangle whose size is drawn
as an area proportion and an aspect ratio (height / width), in the style
of random erasing. One :class:`RegionSet` is drawn per mini-batch and
shared by all of its feature maps.

All randomness comes from an explicitly passed ``numpy.random.Generator``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import GridTooSmall, SamplingExhausted


@dataclass(frozen=True)
class GridShape:
    height: int
    width: int

    def __post_init__(self):
        if int(self.height) < 1 or int(self.width) < 1:
            raise GridTooSmall(f"grid must be at least 1x1, got {self.height}x{self.width}")

    @property
    def area(self) -> int:
        return self.height * self.width


@dataclass(frozen=True)
class Region:
    """Integer rectangle: columns ``x:x+w``, rows ``y:y+h``."""

    x: int
    y: int
    w: int
    h: int

    @property
    def area(self) -> int:
        return self.w * self.h

    @property
    def rows(self) -> slice:
        return slice(self.y, self.y + self.h)

    @property
    def cols(self) -> slice:
        return slice(self.x, self.x + self.w)

    def fits(self, grid: GridShape) -> bool:
        return (
            self.x >= 0 and self.y >= 0 and self.w >= 1 and self.h >= 1
            and self.x + self.w <= grid.width and self.y + self.h <= grid.height
        )

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x, self.y, self.w, self.h)


@dataclass(frozen=True)
class PerturbationConfig:
    area_min: float = 0.02
    area_max: float = 0.4
    aspect_min: float = 0.3
    aspect_max: float = 1 / 0.3
    fixed_mode: bool = False
    fixed_area: float = 0.3
    fixed_aspect: float = 0.3
    max_rejection_attempts: int = 100

    def __post_init__(self):
        if not 0 < self.area_min <= self.area_max <= 1:
            raise ValueError(f"need 0 < area_min <= area_max <= 1, got [{self.area_min}, {self.area_max}]")
        if not 0 < self.aspect_min <= self.aspect_max:
            raise ValueError(f"need 0 < aspect_min <= aspect_max, got [{self.aspect_min}, {self.aspect_max}]")
        if not 0 < self.fixed_area <= 1 or self.fixed_aspect <= 0:
            raise ValueError("fixed_area must lie in (0, 1] and fixed_aspect must be positive")
        if self.max_rejection_attempts < 1:
            raise ValueError("max_rejection_attempts must be >= 1")

    @classmethod
    def fixed(cls, area: float = 0.3, aspect: float = 0.3, **kw) -> "PerturbationConfig":
        """DropBlock-style config: every region has the same proportion and aspect."""
        return cls(fixed_mode=True, fixed_area=area, fixed_aspect=aspect, **kw)


@dataclass(frozen=True)
class RegionSet:
    erase: Region
    transform_src: Region
    transform_dst: Region
    noise: Region

    def __post_init__(self):
        if (self.transform_src.w, self.transform_src.h) != (self.transform_dst.w, self.transform_dst.h):
            raise ValueError("transform regions must share their size")

    def to_dict(self) -> dict:
        return {k: getattr(self, k).as_tuple() for k in ("erase", "transform_src", "transform_dst", "noise")}


def round_half_up(value: float) -> int:
    # all inputs are positive, so half-up equals half-away-from-zero
    return int(math.floor(value + 0.5))


def region_size(grid: GridShape, area: float, aspect: float) -> tuple[int, int]:
    """Integer (w, h) for a region covering ``area`` of the grid with h/w = ``aspect``."""
    target = area * grid.area
    h = round_half_up(math.sqrt(target * aspect))
    w = round_half_up(math.sqrt(target / aspect))
    return min(max(w, 1), grid.width), min(max(h, 1), grid.height)


def _draw_shape(rng, cfg: PerturbationConfig) -> tuple[float, float]:
    if cfg.fixed_mode:
        return cfg.fixed_area, cfg.fixed_aspect
    area = rng.uniform(cfg.area_min, cfg.area_max)
    aspect = rng.uniform(cfg.aspect_min, cfg.aspect_max)
    return float(area), float(aspect)


def _draw_point(rng, grid: GridShape, cfg: PerturbationConfig, w: int, h: int) -> tuple[int, int]:
    if cfg.fixed_mode:
        # the shape never changes, so rejection would just be uniform over valid placements
        return int(rng.integers(0, grid.width - w + 1)), int(rng.integers(0, grid.height - h + 1))
    x = int(rng.integers(0, grid.width))
    y = int(rng.integers(0, grid.height))
    return x, y


def _check(grid: GridShape) -> GridShape:
    if not isinstance(grid, GridShape):
        grid = GridShape(*grid)
    return grid


def sample_region(rng, grid: GridShape, cfg: PerturbationConfig = PerturbationConfig()) -> Region:
    """Sample one region by rejection.

    On a containment failure the whole draw (proportion, aspect and point)
    is restarted. Raises :class:`SamplingExhausted` after
    ``cfg.max_rejection_attempts`` failures.
    """
    grid = _check(grid)
    for _ in range(cfg.max_rejection_attempts):
        area, aspect = _draw_shape(rng, cfg)
        w, h = region_size(grid, area, aspect)
        x, y = _draw_point(rng, grid, cfg, w, h)
        region = Region(x, y, w, h)
        if region.fits(grid):
            return region
    raise SamplingExhausted(f"no region fit a {grid.height}x{grid.width} grid in {cfg.max_rejection_attempts} attempts")


def sample_transform_pair(rng, grid: GridShape, cfg: PerturbationConfig = PerturbationConfig()) -> tuple[Region, Region]:
    """Sample a (source, destination) pair sharing one size.

    The two placements are independent and may overlap or coincide.
    """
    grid = _check(grid)
    for _ in range(cfg.max_rejection_attempts):
        area, aspect = _draw_shape(rng, cfg)
        w, h = region_size(grid, area, aspect)
        x1, y1 = _draw_point(rng, grid, cfg, w, h)
        x2, y2 = _draw_point(rng, grid, cfg, w, h)
        src, dst = Region(x1, y1, w, h), Region(x2, y2, w, h)
        if src.fits(grid) and dst.fits(grid):
            return src, dst
    raise SamplingExhausted(f"no transform pair fit a {grid.height}x{grid.width} grid in {cfg.max_rejection_attempts} attempts")


def sample_batch_regions(rng, grid: GridShape, cfg: PerturbationConfig = PerturbationConfig()) -> RegionSet:
    """One erase region, one transform pair and one noise region, in that draw order."""
    grid = _check(grid)
    erase = sample_region(rng, grid, cfg)
    src, dst = sample_transform_pair(rng, grid, cfg)
    noise = sample_region(rng, grid, cfg)
    return RegionSet(erase, src, dst, noise)


def make_rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Independent child generators, e.g. one per worker or per image."""
    return rng.spawn(n)
