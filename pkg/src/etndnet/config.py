"""Flat ``key = value`` run configuration shared by every CLI command.

Files hold one key per line; ``#`` starts a comment. Command-line
overrides (``--set key=value``) win over the file, which wins over the
defaults. :meth:`RunConfig.to_text` writes every key back out, so the echo
of a run is itself a complete config.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from . import data as D
from .errors import ConfigError
from .losses import LossWeights
from .model import ModelConfig
from .regions import PerturbationConfig
from .trainer import TrainConfig

OUTPUT_ROOT_ENV = "ETNDNET_OUTPUT_ROOT"
MODES = {"etnd": LossWeights(), "baseline": LossWeights(0.0, 0.0, 0.0)}


def _doc(text: str, default):
    return field(default=default, metadata={"doc": text})


@dataclass
class RunConfig:
    # run
    output_dir: str = _doc("output directory; empty means $ETNDNET_OUTPUT_ROOT/<command>", "")
    seed: int = _doc("seed for model init, batch order, augmentation and regions", 0)
    # model
    preset: str = _doc("backbone: desk | paper", "desk")
    image_h: int = _doc("input height, multiple of 16", 128)
    image_w: int = _doc("input width, multiple of 16", 64)
    desk_widths: str = _doc("channel widths of the four desk stages", "16,32,64,64")
    pooling: str = _doc("global pooling before the classifier: avg | max", "avg")
    # data
    data_dir: str = _doc("image directory with train/query/gallery folders; empty uses the synthetic set", "")
    synth_num_identities: int = _doc("synthetic training identities", 50)
    synth_num_test_identities: int = _doc("synthetic query/gallery identities (disjoint from training)", 100)
    synth_images_per_identity: int = _doc("synthetic training images per identity", 16)
    synth_query_per_identity: int = _doc("synthetic query images per test identity", 4)
    synth_gallery_per_identity: int = _doc("synthetic gallery images per test identity", 4)
    synth_occlusion_prob: float = _doc("probability that a synthetic query is occluded", 1.0)
    synth_occlusion_area_min: float = _doc("smallest occluder, as a fraction of the image", 0.2)
    synth_occlusion_area_max: float = _doc("largest occluder, as a fraction of the image", 0.4)
    synth_occluder: str = _doc("occluder style: texture | background | pedestrian | mixed", "mixed")
    synth_seed: int = _doc("seed of the synthetic renderer", 0)
    # training
    epochs: int = _doc("training epochs", 40)
    base_lr: float = _doc("initial learning rate of both optimizers", 3e-3)
    lr_decay_factor: float = _doc("learning rate multiplier at each milestone", 0.1)
    lr_decay_epochs: str = _doc("comma separated milestone epochs", "16,28")
    batch_p: int = _doc("identities per batch", 8)
    batch_k: int = _doc("images per identity in a batch", 8)
    lambda1: float = _doc("weight of the erasing defense", 0.1)
    lambda2: float = _doc("weight of the transforming defense", 0.15)
    lambda3: float = _doc("weight of the noising defense", 0.1)
    epsilon: float = _doc("label smoothing", 0.1)
    game_mode: str = _doc("full (alternating min-max) | no_game (single joint update)", "full")
    transform_mode: str = _doc("feature transform semantics: copy | swap", "copy")
    forward_mode: str = _doc("extractor phase reuses the maps (shared_forward) or recomputes them (fresh_forward)",
                             "shared_forward")
    weight_decay: float = _doc("L2 penalty of both optimizers", 5e-4)
    adam_beta1: float = _doc("Adam beta1", 0.9)
    adam_beta2: float = _doc("Adam beta2", 0.999)
    adam_eps: float = _doc("Adam epsilon", 1e-8)
    checkpoint_every: int = _doc("also save a checkpoint every N epochs (0 = only at the end)", 0)
    aug_flip_prob: float = _doc("horizontal flip probability", 0.5)
    aug_padding: int = _doc("pad-and-crop margin in pixels; -1 scales 10 px at 256 rows to the image height", -1)
    aug_erase_prob: float = _doc("random erasing probability", 0.5)
    # perturbation regions (training and feature attacks)
    region_area_min: float = _doc("smallest region, as a fraction of the feature grid", 0.02)
    region_area_max: float = _doc("largest region, as a fraction of the feature grid", 0.4)
    region_aspect_min: float = _doc("smallest height/width ratio", 0.3)
    region_aspect_max: float = _doc("largest height/width ratio", 1 / 0.3)
    region_fixed_mode: bool = _doc("use one fixed region proportion and aspect", False)
    region_fixed_area: float = _doc("area fraction in fixed mode", 0.3)
    region_fixed_aspect: float = _doc("height/width ratio in fixed mode", 0.3)
    # evaluation
    metric: str = _doc("euclidean | cosine", "euclidean")
    max_rank: int = _doc("length of the CMC curve", 20)
    cross_camera_filter: bool = _doc("drop gallery items sharing identity and camera with the query", True)
    # attacks, ablation, heatmaps
    attack_kind: str = _doc("feature_erase | feature_transform | feature_noise | image_erase", "feature_erase")
    attack_apply_to: str = _doc("query | gallery | both", "both")
    attack_seed: int = _doc("seed of the per-image attack regions", 0)
    ablate_seeds: str = _doc("comma separated training seeds for the ablation table", "0,1,2")
    heatmap_count: int = _doc("query images rendered when no image paths are given", 8)
    heatmap_statistic: str = _doc("channel statistic: mean | max", "mean")
    heatmap_alpha: float = _doc("heatmap opacity over the image", 0.5)

    def __post_init__(self):
        self.validate()

    # ---------------------------------------------------------------- io

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        values = parse_text(Path(path).read_text(), str(path)) if path else {}
        for item in overrides:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(item, "overrides must look like key=value")
            values[key.strip()] = value.strip()
        return cls.from_strings(values)

    @classmethod
    def from_strings(cls, values: dict) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(key, "unknown key")
            kwargs[key] = _coerce(key, raw, types[key])
        return cls(**kwargs)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"# {f.metadata['doc']}")
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def with_mode(self, mode: str) -> "RunConfig":
        if mode not in MODES:
            raise ConfigError("mode", f"must be one of {', '.join(MODES)}, got {mode!r}")
        w = MODES[mode]
        return replace(self, lambda1=w.lambda1, lambda2=w.lambda2, lambda3=w.lambda3)

    def resolve_output(self, command: str) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / command

    # -------------------------------------------------------- validation

    def validate(self) -> None:
        def check(ok, name, message):
            if not ok:
                raise ConfigError(name, message)

        check(self.preset in ("desk", "paper"), "preset", "must be desk or paper")
        for name in ("image_h", "image_w"):
            v = getattr(self, name)
            check(v > 0 and v % 16 == 0, name, f"must be a positive multiple of 16, got {v}")
        check(self.pooling in ("avg", "max"), "pooling", "must be avg or max")
        check(len(_ints(self.desk_widths, "desk_widths")) == 4, "desk_widths", "needs four widths")
        check(self.synth_occluder in D.OCCLUDER_STYLES, "synth_occluder",
              f"must be one of {', '.join(D.OCCLUDER_STYLES)}")
        check(self.epochs >= 1, "epochs", "must be >= 1")
        check(self.base_lr > 0, "base_lr", "must be positive")
        check(self.batch_p >= 1 and self.batch_k >= 1, "batch_p", "batch_p and batch_k must be >= 1")
        for name in ("lambda1", "lambda2", "lambda3", "epsilon", "weight_decay"):
            check(getattr(self, name) >= 0, name, "must be non-negative")
        check(self.epsilon < 1, "epsilon", "must be < 1")
        check(self.game_mode in ("full", "no_game"), "game_mode", "must be full or no_game")
        check(self.transform_mode in ("copy", "swap"), "transform_mode", "must be copy or swap")
        check(self.forward_mode in ("shared_forward", "fresh_forward"), "forward_mode",
              "must be shared_forward or fresh_forward")
        check(self.metric in ("euclidean", "cosine"), "metric", "must be euclidean or cosine")
        check(self.max_rank >= 1, "max_rank", "must be >= 1")
        check(self.heatmap_statistic in ("mean", "max"), "heatmap_statistic", "must be mean or max")
        check(0 <= self.heatmap_alpha <= 1, "heatmap_alpha", "must lie in [0, 1]")
        _ints(self.lr_decay_epochs, "lr_decay_epochs")
        check(len(_ints(self.ablate_seeds, "ablate_seeds")) >= 1, "ablate_seeds", "needs at least one seed")
        if self.data_dir:
            check(Path(self.data_dir).is_dir(), "data_dir", f"no such directory: {self.data_dir}")
        # the domain objects carry their own range checks
        for name, build in (("region", self.perturbation), ("synth", self.synth_spec)):
            try:
                build()
            except ValueError as err:
                raise ConfigError(name, str(err)) from None

    # -------------------------------------------------------- builders

    def perturbation(self) -> PerturbationConfig:
        return PerturbationConfig(self.region_area_min, self.region_area_max, self.region_aspect_min,
                                  self.region_aspect_max, self.region_fixed_mode, self.region_fixed_area,
                                  self.region_fixed_aspect)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda3)

    def train_config(self, seed: int | None = None) -> TrainConfig:
        weights = self.loss_weights()
        return TrainConfig(
            epochs=self.epochs, base_lr=self.base_lr, lr_decay_factor=self.lr_decay_factor,
            lr_decay_epochs=_ints(self.lr_decay_epochs, "lr_decay_epochs"), batch_p=self.batch_p,
            batch_k=self.batch_k, loss_weights=weights, epsilon=self.epsilon, perturbation=self.perturbation(),
            seed=self.seed if seed is None else seed, game_mode=self.game_mode,
            # with every weight at zero the adversarial views cannot matter
            adversarial=weights.total > 0, transform_mode=self.transform_mode, forward_mode=self.forward_mode,
            weight_decay=self.weight_decay, adam_betas=(self.adam_beta1, self.adam_beta2), adam_eps=self.adam_eps,
            augment=D.AugmentConfig(self.aug_flip_prob, None if self.aug_padding < 0 else self.aug_padding,
                                    self.aug_erase_prob),
            checkpoint_every=self.checkpoint_every,
        )

    def model_config(self, num_classes: int) -> ModelConfig:
        return ModelConfig(self.preset, num_classes, self.image_h, self.image_w,
                           _ints(self.desk_widths, "desk_widths"), self.pooling)

    def synth_spec(self) -> D.SynthSpec:
        return D.SynthSpec(
            num_identities=self.synth_num_identities, num_test_identities=self.synth_num_test_identities,
            images_per_identity=self.synth_images_per_identity, query_per_identity=self.synth_query_per_identity,
            gallery_per_identity=self.synth_gallery_per_identity, image_h=self.image_h, image_w=self.image_w,
            occlusion_prob=self.synth_occlusion_prob,
            occlusion_area=(self.synth_occlusion_area_min, self.synth_occlusion_area_max),
            occluder=self.synth_occluder, seed=self.synth_seed,
        )

    def dataset(self) -> D.DatasetIndex:
        if self.data_dir:
            return D.load_directory(self.data_dir)
        return D.synth_generate(self.synth_spec())

    def seeds(self) -> list[int]:
        return _ints(self.ablate_seeds, "ablate_seeds")


def parse_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{n}", "expected key = value")
        values[key.strip()] = value.strip()
    return values


def _ints(text: str, name: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise ConfigError(name, f"expected comma separated integers, got {text!r}") from None


def _coerce(key: str, raw, kind):
    kind = kind if isinstance(kind, str) else kind.__name__
    if not isinstance(raw, str):
        return raw
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(key, f"expected {kind}, got {raw!r}") from None
    return raw


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)
