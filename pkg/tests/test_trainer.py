import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from etndnet import data as D
from etndnet import trainer as T
from etndnet.errors import NonFiniteLoss
from etndnet.losses import LossWeights
from etndnet.model import ModelConfig


@pytest.fixture(scope="module")
def index():
    return D.synth_generate(D.SynthSpec(num_identities=6, num_test_identities=3, images_per_identity=4,
                                        query_per_identity=1, gallery_per_identity=2, image_h=64, image_w=32))


MODEL = ModelConfig(num_classes=6, image_h=64, image_w=32, desk_widths=(4, 6, 8, 8))


def cfg(**kw):
    base = dict(epochs=1, batch_p=3, batch_k=2, base_lr=1e-3, seed=0)
    base.update(kw)
    return T.TrainConfig(**base)


def batch(index, seed=0, n=6):
    idx = D.pk_sample(np.random.default_rng(seed), index, 3, n // 3)
    return torch.from_numpy(D.load_batch(index, idx, (64, 32))), torch.from_numpy(index.labels(idx))


def snapshot(module):
    return [p.detach().clone() for p in module.parameters()]


def same(a, b):
    return all(torch.equal(x, y) for x, y in zip(a, b))


def test_lr_schedule():
    c = T.TrainConfig()
    assert c.lr_at(0) == pytest.approx(3e-4)
    assert c.lr_at(39) == pytest.approx(3e-4)
    assert c.lr_at(40) == pytest.approx(3e-5)
    assert c.lr_at(70) == pytest.approx(3e-6)
    assert c.lr_at(119) == pytest.approx(3e-6)
    desk = T.TrainConfig(epochs=20, lr_decay_epochs=(8, 14))
    assert [desk.lr_at(e) for e in (0, 7, 8, 13, 14, 19)] == pytest.approx([3e-4, 3e-4, 3e-5, 3e-5, 3e-6, 3e-6])


def test_config_validation():
    with pytest.raises(ValueError):
        cfg(game_mode="bogus")
    with pytest.raises(ValueError):
        cfg(forward_mode="bogus")


def test_phase_isolation(index, monkeypatch):
    state = T.init_state(cfg(), MODEL)
    model = state.model
    seen = []
    real_step = state.opt_classifier.step

    def checked_step(*a, **kw):
        before = snapshot(model.extractor)
        out = real_step(*a, **kw)
        seen.append(same(before, snapshot(model.extractor)))
        return out

    monkeypatch.setattr(state.opt_classifier, "step", checked_step)
    real_ext = state.opt_extractor.step

    def checked_ext(*a, **kw):
        before = snapshot(model.classifier)
        out = real_ext(*a, **kw)
        seen.append(same(before, snapshot(model.classifier)))
        return out

    monkeypatch.setattr(state.opt_extractor, "step", checked_ext)
    for s in range(3):
        T.train_step(state, *batch(index, s), cfg())
    assert seen == [True, True] * 3


def test_classifier_phase_leaves_extractor_without_gradient(index, monkeypatch):
    state = T.init_state(cfg(), MODEL)
    grads = []
    real_step = state.opt_classifier.step

    def spy(*a, **kw):
        grads.append([p.grad for p in state.model.extractor.parameters()])
        return real_step(*a, **kw)

    monkeypatch.setattr(state.opt_classifier, "step", spy)
    T.train_step(state, *batch(index), cfg())
    assert all(g is None for g in grads[0])


def test_update_counts(index):
    full = T.init_state(cfg(), MODEL)
    T.train_step(full, *batch(index), cfg())
    assert full.updates == 2 and full.iteration == 1
    ng = T.init_state(cfg(game_mode="no_game"), MODEL)
    T.train_step(ng, *batch(index), cfg(game_mode="no_game"))
    assert ng.updates == 1


def test_running_stats_follow_clean_view_only(index):
    c = cfg()
    a, b = T.init_state(c, MODEL), T.init_state(replace(c,
                      adversarial=False), MODEL)
    images, labels = batch(index)
    T.train_step(a, images, labels, c)
    T.train_step(b, images, labels, replace(c,
                      adversarial=False))
    bn_a, bn_b = a.model.classifier.bn, b.model.classifier.bn
    assert torch.equal(bn_a.running_mean, bn_b.running_mean)
    assert torch.equal(bn_a.running_var, bn_b.running_var)


def test_zero_weights_equal_baseline_trainer(index):
    zero = cfg(loss_weights=LossWeights(0, 0, 0))
    base = cfg(adversarial=False)
    a, b = T.init_state(zero, MODEL), T.init_state(base, MODEL)
    for s in range(3):
        images, labels = batch(index, s)
        ra = T.train_step(a, images, labels, zero)
        rb = T.train_step(b, images, labels, base)
        assert ra["loss_clean"] == pytest.approx(rb["loss_clean"], abs=1e-6)
    for x, y in zip(a.model.parameters(), b.model.parameters()):
        assert torch.allclose(x, y, atol=1e-6)


def test_record_fields(index):
    state = T.init_state(cfg(), MODEL)
    rec = T.train_step(state, *batch(index), cfg())
    assert {"iteration", "epoch", "lr", "loss_clean", "loss_e", "loss_t", "loss_n",
            "objective_classifier", "objective_extractor", "regions"} <= set(rec)
    w = LossWeights()
    expected = rec["loss_clean"] - w.lambda1 * rec["loss_e"] - w.lambda2 * rec["loss_t"] - w.lambda3 * rec["loss_n"]
    assert rec["objective_classifier"] == pytest.approx(expected, rel=1e-5)


def test_fresh_forward_runs(index):
    c = cfg(forward_mode="fresh_forward")
    state = T.init_state(c, MODEL)
    rec = T.train_step(state, *batch(index), c)
    assert math.isfinite(rec["objective_extractor"])


def test_non_finite_loss_aborts(index, tmp_path):
    state = T.init_state(cfg(), MODEL)
    images, labels = batch(index)
    with torch.no_grad():
        state.model.classifier.fc.weight.fill_(float("nan"))
    with pytest.raises(NonFiniteLoss) as err:
        T.train_step(state, images, labels, cfg(), dump_dir=tmp_path)
    assert err.value.iteration == 0
    assert (tmp_path / "nonfinite_state.pt").exists()


def _strip(records):
    return [{k: v for k, v in r.items()} for r in records]


def test_training_is_deterministic(index):
    c = cfg(epochs=2)
    _, r1 = T.train(c, index, MODEL)
    _, r2 = T.train(c, index, MODEL)
    assert len(r1) == 2 * T.iterations_per_epoch(index, c)
    assert _strip(r1) == _strip(r2)


def test_checkpoint_resume_matches(index, tmp_path):
    c = cfg(epochs=2)
    full, records = T.train(c, index, MODEL)
    half, first = T.train(c, index, MODEL, stop_at=3)
    T.save_checkpoint(half, tmp_path / "ck.pt", c)
    resumed = T.load_checkpoint(tmp_path / "ck.pt", c)
    resumed, rest = T.train(c, index, state=resumed)
    joined = first + rest
    assert len(joined) == len(records)
    for a, b in zip(joined, records):
        for key in ("loss_clean", "loss_e", "objective_extractor"):
            assert a[key] == pytest.approx(b[key], abs=1e-6)
    for x, y in zip(resumed.model.state_dict().values(), full.model.state_dict().values()):
        assert torch.allclose(x.double(), y.double(), atol=1e-6)


def test_log_file(index, tmp_path):
    import json

    T.train(cfg(), index, MODEL, log_file=tmp_path / "log.jsonl")
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert len(lines) == T.iterations_per_epoch(index, cfg()) and "loss_clean" in json.loads(lines[0])


def test_with_weights():
    c = T.with_weights(cfg(), True, False, True)
    assert c.loss_weights.as_tuple() == (0.1, 0.0, 0.1)


def test_baseline_training_reduces_clean_loss():
    spec = D.SynthSpec(num_identities=8, num_test_identities=2, images_per_identity=24, image_h=64, image_w=32)
    idx = D.synth_generate(spec)
    c = T.TrainConfig(epochs=10, batch_p=8, batch_k=4, base_lr=3e-3, lr_decay_epochs=(), seed=0,
                      adversarial=False)
    _, records = T.train(c, idx, ModelConfig(num_classes=8, image_h=64, image_w=32, desk_widths=(8, 16, 32, 32)))
    last = np.mean([r["loss_clean"] for r in records[-4:]])
    assert last < 0.5 * math.log(8)


def test_train_step_descends_extractor_objective(index):
    from etndnet.losses import extractor_phase_objective, smoothed_targets
    from etndnet.perturb import make_adversarial_batch
    from etndnet.regions import GridShape, sample_batch_regions

    def objective(state, images, labels, regions, seed):
        m = state.model
        with torch.no_grad():
            views = make_adversarial_batch(m.extract(images), regions, T.stream(seed, T.STREAM_NOISE, 0)).views()
            logits = [m.classifier(v, update_stats=False) for v in views]
            return extractor_phase_objective(*logits, smoothed_targets(labels, 6, 0.1)).item()

    wins = 0
    for seed in range(10):
        c = cfg(seed=seed, base_lr=1e-4)
        state = T.init_state(c, ModelConfig(num_classes=6, image_h=64, image_w=32))
        images, labels = batch(index, seed)
        regions = sample_batch_regions(T.stream(seed, T.STREAM_REGIONS, 0), GridShape(4, 2), c.perturbation)
        before = objective(state, images, labels, regions, seed)
        T.train_step(state, images, labels, c)
        wins += objective(state, images, labels, regions, seed) < before
    assert wins >= 8
