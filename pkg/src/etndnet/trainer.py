"""Alternating min-max training of the extractor and classifier.

Each iteration extracts feature maps once, samples one batch-shared
:class:`RegionSet`, updates the classifier against the detached
representations (ascending the adversarial terms), then updates the
extractor through the freshly updated, frozen classifier (descending them).
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import data as D
from .errors import NonFiniteLoss
from .losses import (LossWeights, ce_loss, classifier_phase_objective, component_losses, extractor_phase_objective,
                     smoothed_targets)
from .model import ModelConfig, ReIDModel
from .perturb import make_adversarial_batch
from .regions import GridShape, PerturbationConfig, sample_batch_regions

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "etndnet-checkpoint/1"
GAME_MODES = ("full", "no_game")
FORWARD_MODES = ("shared_forward", "fresh_forward")

# independent random streams, each keyed by (seed, stream, counter)
STREAM_ORDER, STREAM_AUGMENT, STREAM_REGIONS, STREAM_NOISE = 10, 11, 12, 13


@dataclass
class TrainConfig:
    epochs: int = 120
    base_lr: float = 3e-4
    lr_decay_factor: float = 0.1
    lr_decay_epochs: tuple = (40, 70)
    batch_p: int = 8
    batch_k: int = 8
    loss_weights: LossWeights = field(default_factory=LossWeights)
    epsilon: float = 0.1
    perturbation: PerturbationConfig = field(default_factory=PerturbationConfig)
    seed: int = 0
    game_mode: str = "full"
    adversarial: bool = True
    transform_mode: str = "copy"
    forward_mode: str = "shared_forward"
    weight_decay: float = 5e-4
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    augment: D.AugmentConfig = field(default_factory=D.AugmentConfig)
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.game_mode not in GAME_MODES:
            raise ValueError(f"game_mode must be one of {GAME_MODES}, got {self.game_mode!r}")
        if self.forward_mode not in FORWARD_MODES:
            raise ValueError(f"forward_mode must be one of {FORWARD_MODES}, got {self.forward_mode!r}")
        self.lr_decay_epochs = tuple(int(e) for e in self.lr_decay_epochs)

    @property
    def batch_size(self) -> int:
        return self.batch_p * self.batch_k

    def lr_at(self, epoch: int) -> float:
        passed = sum(1 for e in self.lr_decay_epochs if epoch >= e)
        return self.base_lr * self.lr_decay_factor ** passed

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        return d


@dataclass
class TrainState:
    model: ReIDModel
    opt_extractor: torch.optim.Optimizer
    opt_classifier: torch.optim.Optimizer
    seed: int
    epoch: int = 0
    iteration: int = 0
    updates: int = 0

    @property
    def rng_state(self) -> dict:
        # every stream is a pure function of these counters
        return {"seed": self.seed, "epoch": self.epoch, "iteration": self.iteration}


def stream(seed: int, kind: int, counter: int) -> np.random.Generator:
    return np.random.default_rng([seed, kind, counter])


def _adam(params, cfg: TrainConfig):
    return torch.optim.Adam(params, lr=cfg.base_lr, betas=tuple(cfg.adam_betas), eps=cfg.adam_eps,
                            weight_decay=cfg.weight_decay)


def init_state(cfg: TrainConfig, model_cfg: ModelConfig) -> TrainState:
    torch.manual_seed(cfg.seed)
    model = ReIDModel(model_cfg)
    return TrainState(model, _adam(model.extractor.parameters(), cfg), _adam(model.classifier.parameters(), cfg),
                      seed=cfg.seed)


def set_lr(state: TrainState, lr: float) -> None:
    for opt in (state.opt_extractor, state.opt_classifier):
        for group in opt.param_groups:
            group["lr"] = lr


def _check_finite(state: TrainState, values: dict, dump_dir=None) -> None:
    if all(v is None or math.isfinite(v) for v in values.values()):
        return
    log.error("non-finite loss at iteration %d: %s", state.iteration, values)
    if dump_dir is not None:
        save_checkpoint(state, Path(dump_dir) / "nonfinite_state.pt")
    raise NonFiniteLoss(state.iteration, values)


def _classify_all(model: ReIDModel, views, stats_from_clean: bool, frozen: bool):
    return [model.classifier(v, update_stats=stats_from_clean and i == 0, frozen=frozen) for i, v in enumerate(views)]


def _views(state: TrainState, maps: torch.Tensor, cfg: TrainConfig, regions):
    if regions is None:
        return [maps]
    noise_rng = stream(state.seed, STREAM_NOISE, state.iteration)
    return list(make_adversarial_batch(maps, regions, noise_rng, cfg.transform_mode).views())


def _objective(logits, targets, cfg: TrainConfig, phase: str):
    if len(logits) == 1:
        loss = ce_loss(logits[0], targets)
        return loss, [loss.item()]
    fn = classifier_phase_objective if phase == "classifier" else extractor_phase_objective
    return fn(*logits, targets, cfg.loss_weights), [v.item() for v in component_losses(*logits, targets)]


def train_step(state: TrainState, images: torch.Tensor, labels: torch.Tensor, cfg: TrainConfig, dump_dir=None) -> dict:
    """One iteration of the game; returns the step metrics.

    With ``cfg.adversarial`` off this is the plain baseline trainer: the same
    two-update schedule on the clean term only.
    """
    model = state.model
    model.train()
    targets = smoothed_targets(labels, model.cfg.num_classes, cfg.epsilon, dtype=images.dtype)
    maps = model.extract(images)
    regions = None
    if cfg.adversarial:
        grid = GridShape(maps.shape[2], maps.shape[3])
        regions = sample_batch_regions(stream(state.seed, STREAM_REGIONS, state.iteration), grid, cfg.perturbation)
    views = _views(state, maps, cfg, regions)

    record = {"iteration": state.iteration, "epoch": state.epoch, "lr": state.opt_extractor.param_groups[0]["lr"]}
    obj_w_value = None
    if cfg.game_mode == "full":
        # classifier phase: the extractor output is a constant
        logits = _classify_all(model, [v.detach() for v in views], stats_from_clean=True, frozen=False)
        obj_w, comps = _objective(logits, targets, cfg, "classifier")
        obj_w_value = obj_w.item()
        _check_finite(state, {"objective_classifier": obj_w_value}, dump_dir)
        state.opt_classifier.zero_grad(set_to_none=True)
        obj_w.backward()
        state.opt_classifier.step()
        state.updates += 1
        if cfg.forward_mode == "fresh_forward":
            views = _views(state, model.extract(images), cfg, regions)
        # extractor phase: the updated classifier is frozen, running stats included
        logits = _classify_all(model, views, stats_from_clean=False, frozen=True)
        obj_e, _ = _objective(logits, targets, cfg, "extractor")
        optimizers = [state.opt_extractor]
    else:
        # no game: a single update; the classifier learns from the clean term only
        logits = [model.classifier(views[0], update_stats=True)]
        logits += [model.classifier(v, update_stats=False, frozen=True) for v in views[1:]]
        obj_e, comps = _objective(logits, targets, cfg, "extractor")
        optimizers = [state.opt_extractor, state.opt_classifier]
    obj_e_value = obj_e.item()
    _check_finite(state, {"objective_extractor": obj_e_value}, dump_dir)
    for opt in optimizers:
        opt.zero_grad(set_to_none=True)
    obj_e.backward()
    for opt in optimizers:
        opt.step()
    state.updates += 1

    for i, name in enumerate(("loss_clean", "loss_e", "loss_t", "loss_n")):
        record[name] = comps[i] if i < len(comps) else None
    record["objective_classifier"] = obj_w_value
    record["objective_extractor"] = obj_e_value
    if regions is not None:
        record["regions"] = regions.to_dict()
    state.iteration += 1
    return record


def iterations_per_epoch(index: D.DatasetIndex, cfg: TrainConfig) -> int:
    return math.ceil(len(index.split("train")) / cfg.batch_size)


def train(cfg: TrainConfig, index: D.DatasetIndex, model_cfg: ModelConfig | None = None, out_dir=None,
          state: TrainState | None = None, stop_at: int | None = None, log_file=None) -> tuple[TrainState, list[dict]]:
    """Run (or resume) the epoch loop.

    ``stop_at`` halts after that global iteration count, which is how a run
    is split for checkpoint round-trip checks.
    """
    if model_cfg is None:
        h, w = index.image(index.split("train")[0]).shape[:2]
        model_cfg = ModelConfig(num_classes=index.num_train_ids, image_h=h, image_w=w)
    if state is None:
        state = init_state(cfg, model_cfg)
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    size = (state.model.cfg.image_h, state.model.cfg.image_w)
    ipe = iterations_per_epoch(index, cfg)
    records = []
    sink = open(log_file, "a") if log_file else None
    try:
        while state.iteration // ipe < cfg.epochs:
            epoch = state.iteration // ipe
            state.epoch = epoch
            set_lr(state, cfg.lr_at(epoch))
            batches = D.epoch_batches(stream(state.seed, STREAM_ORDER, epoch), index, cfg.batch_p, cfg.batch_k)
            for b in range(state.iteration - epoch * ipe, ipe):
                if stop_at is not None and state.iteration >= stop_at:
                    return state, records
                idx = batches[b]
                aug_rng = stream(state.seed, STREAM_AUGMENT, state.iteration)
                images = torch.from_numpy(D.load_batch(index, idx, size, aug_rng, True, cfg.augment))
                labels = torch.from_numpy(index.labels(idx))
                rec = train_step(state, images, labels, cfg, dump_dir=out_dir)
                records.append(rec)
                if sink:
                    sink.write(json.dumps(rec) + "\n")
            state.epoch = epoch + 1
            log.info("epoch %d done, loss_clean %.4f", epoch, records[-1]["loss_clean"] if records else float("nan"))
            if out_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(state, out_dir / f"checkpoint_epoch{epoch + 1}.pt", cfg)
    finally:
        if sink:
            sink.close()
    return state, records


# ------------------------------------------------------------- checkpoints

def save_checkpoint(state: TrainState, path, cfg: TrainConfig | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "preset": state.model.cfg.preset,
        "model_config": state.model.cfg.to_dict(),
        "parameters": state.model.state_dict(),
        "opt_extractor": state.opt_extractor.state_dict(),
        "opt_classifier": state.opt_classifier.state_dict(),
        "epoch": state.epoch,
        "iteration": state.iteration,
        "updates": state.updates,
        "seed": state.seed,
        "rng_state": state.rng_state,
        "train_config": cfg.to_dict() if cfg else None,
    }, path)


def load_checkpoint(path, cfg: TrainConfig | None = None) -> TrainState:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unknown checkpoint format {blob.get('format')!r}")
    model_cfg = ModelConfig(**blob["model_config"])
    cfg = cfg or TrainConfig()
    model = ReIDModel(model_cfg)
    model.load_state_dict(blob["parameters"])
    state = TrainState(model, _adam(model.extractor.parameters(), cfg), _adam(model.classifier.parameters(), cfg),
                       seed=blob["seed"], epoch=blob["epoch"], iteration=blob["iteration"], updates=blob["updates"])
    state.opt_extractor.load_state_dict(blob["opt_extractor"])
    state.opt_classifier.load_state_dict(blob["opt_classifier"])
    return state


def load_model(path) -> ReIDModel:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    model = ReIDModel(ModelConfig(**blob["model_config"]))
    model.load_state_dict(blob["parameters"])
    model.eval()
    return model


def with_weights(cfg: TrainConfig, ed: bool, td: bool, nd: bool, base: LossWeights = LossWeights()) -> TrainConfig:
    """Config for one ablation row: disabled defenses get a zero weight."""
    w = LossWeights(base.lambda1 if ed else 0.0, base.lambda2 if td else 0.0, base.lambda3 if nd else 0.0)
    return replace(cfg, loss_weights=w)
