"""Robustness probes for a trained model, plus heatmap export.

Feature-level attacks perturb the extracted feature map before pooling;
``image_erase`` zeroes a rectangle of the normalized input image. Unlike
training, every image gets its own independently sampled region.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import data as D
from .evaluation import EvalSet, RankingResult, evaluate
from .model import ReIDModel
from .perturb import erase, noise, transform
from .regions import GridShape, PerturbationConfig, sample_region, sample_transform_pair

ATTACK_KINDS = ("feature_erase", "feature_transform", "feature_noise", "image_erase")
APPLY_TO = ("query", "gallery", "both")
_SPLIT_CODE = {"query": 0, "gallery": 1}


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "feature_erase"
    perturbation: PerturbationConfig = field(default_factory=PerturbationConfig)
    seed: int = 0
    apply_to: str = "both"

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"attack kind must be one of {', '.join(ATTACK_KINDS)}; got {self.kind!r}")
        if self.apply_to not in APPLY_TO:
            raise ValueError(f"apply_to must be one of {', '.join(APPLY_TO)}; got {self.apply_to!r}")

    def to_dict(self) -> dict:
        p = self.perturbation
        return {"kind": self.kind, "seed": self.seed, "apply_to": self.apply_to,
                "perturbation": {k: getattr(p, k) for k in p.__dataclass_fields__}}


def _image_rng(spec: AttackSpec, split: str, i: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, ATTACK_KINDS.index(spec.kind), _SPLIT_CODE.get(split, 2), i])


def _perturb_map(fmap: torch.Tensor, kind: str, rng, cfg: PerturbationConfig) -> torch.Tensor:
    grid = GridShape(fmap.shape[2], fmap.shape[3])
    if kind == "feature_transform":
        src, dst = sample_transform_pair(rng, grid, cfg)
        return transform(fmap, src, dst)
    region = sample_region(rng, grid, cfg)
    if kind == "feature_erase":
        return erase(fmap, region)
    return noise(fmap, region, rng)


@torch.no_grad()
def attacked_embed(model: ReIDModel, images: torch.Tensor, spec: AttackSpec, split: str = "query",
                   offset: int = 0) -> torch.Tensor:
    """Embeddings through the perturbed path.

    Image ``j`` of the batch uses the generator keyed by
    ``(seed, kind, split, offset + j)``, so results do not depend on batching.
    """
    model.eval()
    if spec.kind == "image_erase":
        grid = GridShape(images.shape[2], images.shape[3])
        images = images.clone()
        for j in range(images.shape[0]):
            r = sample_region(_image_rng(spec, split, offset + j), grid, spec.perturbation)
            images[j, :, r.rows, r.cols] = 0
        return model.embed(images)
    maps = model.extract(images)
    out = [_perturb_map(maps[j:j + 1], spec.kind, _image_rng(spec, split, offset + j), spec.perturbation)
           for j in range(maps.shape[0])]
    return model.embed_maps(torch.cat(out))


@torch.no_grad()
def embed_split(model: ReIDModel, index: D.DatasetIndex, split: str, spec: AttackSpec | None = None,
                batch_size: int = 256) -> np.ndarray:
    model.eval()
    ids = index.split(split)
    size = (model.cfg.image_h, model.cfg.image_w)
    chunks = []
    for start in range(0, len(ids), batch_size):
        x = torch.from_numpy(D.load_batch(index, ids[start:start + batch_size], size))
        if spec is None:
            chunks.append(model.embed(x))
        else:
            chunks.append(attacked_embed(model, x, spec, split, offset=start))
    return torch.cat(chunks).numpy()


def eval_set(model: ReIDModel, index: D.DatasetIndex, spec: AttackSpec | None = None) -> EvalSet:
    q_spec = spec if spec is not None and spec.apply_to in ("query", "both") else None
    g_spec = spec if spec is not None and spec.apply_to in ("gallery", "both") else None
    q_ids, g_ids = index.split("query"), index.split("gallery")
    return EvalSet(
        embed_split(model, index, "query", q_spec), index.labels(q_ids),
        embed_split(model, index, "gallery", g_spec), index.labels(g_ids),
        index.cameras(q_ids), index.cameras(g_ids),
    )


def clean_eval(model, index, metric="euclidean", cross_camera_filter=True, max_rank=20) -> RankingResult:
    return evaluate(eval_set(model, index), metric, max_rank, cross_camera_filter)


def attack_eval(model, index, spec: AttackSpec, metric="euclidean", cross_camera_filter=True,
                max_rank=20) -> RankingResult:
    result = evaluate(eval_set(model, index, spec), metric, max_rank, cross_camera_filter)
    result.info["attack"] = spec.to_dict()
    return result


# ---------------------------------------------------------------- heatmaps

def normalize_heatmap(values: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant map becomes 0.5 everywhere."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.full_like(values, 0.5)
    return (values - lo) / (hi - lo)


@torch.no_grad()
def heatmap(model: ReIDModel, image: np.ndarray, statistic: str = "mean") -> np.ndarray:
    """Channel statistic of the feature map, upsampled to the image size, in [0, 1]."""
    model.eval()
    h, w = model.cfg.image_h, model.cfg.image_w
    x = torch.from_numpy(D.augment(image, None, False, (h, w)))[None]
    fmap = model.extract(x)[0]
    if statistic == "mean":
        stat = fmap.mean(0)
    elif statistic == "max":
        stat = fmap.amax(0)
    else:
        raise ValueError(f"statistic must be 'mean' or 'max', got {statistic!r}")
    norm = torch.from_numpy(normalize_heatmap(stat.double().numpy()))
    up = F.interpolate(norm[None, None], size=image.shape[:2], mode="bilinear", align_corners=False)[0, 0]
    return up.clamp(0, 1).numpy()


def overlay(image: np.ndarray, heat: np.ndarray, alpha: float = 0.5, cmap: str = "jet") -> np.ndarray:
    from matplotlib import colormaps

    colored = colormaps[cmap](heat)[..., :3] * 255.0
    blended = (1 - alpha) * image.astype(np.float64) + alpha * colored
    return np.clip(np.rint(blended), 0, 255).astype(np.uint8)


def export_heatmap(model: ReIDModel, image: np.ndarray, path, statistic: str = "mean", alpha: float = 0.5) -> np.ndarray:
    """Write the color-mapped heatmap blended over ``image``; returns the raw [0, 1] heatmap."""
    from PIL import Image

    heat = heatmap(model, image, statistic)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(overlay(image, heat, alpha)).save(path)
    return heat
