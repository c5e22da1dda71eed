"""Feature-map perturbations: erase, transform and noise.

Feature maps are torch tensors laid out ``(batch, channels, height, width)``.
Every operation returns a new tensor and leaves its input untouched. The
operators are non-parametric, so autograd flows through the cells they do
not overwrite (and, for transform, from the destination back to the source).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ShapeMismatch
from .regions import GridShape, Region, RegionSet

TRANSFORM_MODES = ("copy", "swap")


def grid_of(batch: torch.Tensor) -> GridShape:
    if batch.dim() != 4:
        raise ShapeMismatch(f"expected a (B, C, H, W) batch, got shape {tuple(batch.shape)}")
    return GridShape(batch.shape[2], batch.shape[3])


def _require_fit(batch: torch.Tensor, *regions: Region) -> None:
    grid = grid_of(batch)
    for r in regions:
        if not r.fits(grid):
            raise ShapeMismatch(f"region {r.as_tuple()} does not fit a {grid.height}x{grid.width} grid")


def erase(batch: torch.Tensor, region: Region) -> torch.Tensor:
    """Zero every channel of the region's cells."""
    _require_fit(batch, region)
    out = batch.clone()
    out[:, :, region.rows, region.cols] = 0
    return out


def transform(batch: torch.Tensor, src: Region, dst: Region, mode: str = "copy") -> torch.Tensor:
    """Move the content of ``src`` onto ``dst``.

    ``copy`` leaves ``src`` as it was; ``swap`` also writes the old ``dst``
    content into ``src``. Reads come from the unmodified input, so
    overlapping regions are well defined. In swap mode, cells in the overlap
    take the value copied into ``dst``.
    """
    if (src.w, src.h) != (dst.w, dst.h):
        raise ShapeMismatch(f"transform regions differ in size: {src.as_tuple()} vs {dst.as_tuple()}")
    if mode not in TRANSFORM_MODES:
        raise ValueError(f"transform mode must be one of {TRANSFORM_MODES}, got {mode!r}")
    _require_fit(batch, src, dst)
    out = batch.clone()
    if mode == "swap":
        out[:, :, src.rows, src.cols] = batch[:, :, dst.rows, dst.cols]
    out[:, :, dst.rows, dst.cols] = batch[:, :, src.rows, src.cols]
    return out


def uniform_like(rng: np.random.Generator, shape, like: torch.Tensor) -> torch.Tensor:
    # draw in the target precision so float32 casts can never round up to 1.0
    dtype = np.float64 if like.dtype == torch.float64 else np.float32
    values = rng.random(tuple(shape), dtype=dtype)
    return torch.from_numpy(values).to(device=like.device, dtype=like.dtype)


def noise(batch: torch.Tensor, region: Region, rng: np.random.Generator) -> torch.Tensor:
    """Replace the region's cells with independent Uniform[0, 1) draws."""
    _require_fit(batch, region)
    out = batch.clone()
    b, c = batch.shape[:2]
    out[:, :, region.rows, region.cols] = uniform_like(rng, (b, c, region.h, region.w), batch)
    return out


@dataclass
class AdversarialBatch:
    clean: torch.Tensor
    erased: torch.Tensor
    transformed: torch.Tensor
    noised: torch.Tensor
    regions: RegionSet

    def views(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        return self.clean, self.erased, self.transformed, self.noised

    def detach(self) -> "AdversarialBatch":
        return AdversarialBatch(*(t.detach() for t in self.views()), regions=self.regions)


def make_adversarial_batch(clean: torch.Tensor, regions: RegionSet, rng: np.random.Generator,
                           transform_mode: str = "copy") -> AdversarialBatch:
    return AdversarialBatch(
        clean=clean,
        erased=erase(clean, regions.erase),
        transformed=transform(clean, regions.transform_src, regions.transform_dst, transform_mode),
        noised=noise(clean, regions.noise, rng),
        regions=regions,
    )
