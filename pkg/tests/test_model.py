import numpy as np
import pytest
import torch

from etndnet.errors import ShapeMismatch
from etndnet.losses import ce_loss, smoothed_targets
from etndnet.model import ModelConfig, ReIDModel, count_flops, count_parameters
from oracles import finite_difference_check


@pytest.fixture(scope="module")
def paper_model():
    torch.manual_seed(0)
    return ReIDModel(ModelConfig(preset="paper", num_classes=702, image_h=256, image_w=128))


def small(**kw):
    torch.manual_seed(0)
    cfg = dict(num_classes=5, image_h=64, image_w=32, desk_widths=(4, 6, 8, 8))
    cfg.update(kw)
    return ReIDModel(ModelConfig(**cfg))


def test_paper_feature_map_shape(paper_model):
    paper_model.eval()
    with torch.no_grad():
        fmap = paper_model.extract(torch.zeros(1, 3, 256, 128))
    assert tuple(fmap.shape) == (1, 2048, 16, 8)


def test_paper_parameter_count(paper_model):
    assert abs(count_parameters(paper_model) - 24.9e6) <= 0.02 * 24.9e6


def test_paper_flops_reported(paper_model):
    # multiply-adds counted as two FLOPs; about 4.1 G multiply-adds per image
    macs = count_flops(paper_model) / 2
    assert 3.5e9 < macs < 4.5e9


def test_desk_grid():
    m = small()
    m.eval()
    with torch.no_grad():
        assert tuple(m.extract(torch.zeros(2, 3, 64, 32)).shape) == (2, 8, 4, 2)
    assert m.cfg.grid == (4, 2)


def test_wrong_input_size():
    with pytest.raises(ShapeMismatch):
        small().extract(torch.zeros(1, 3, 32, 32))


def test_eval_determinism():
    m = small()
    m.eval()
    x = torch.randn(3, 3, 64, 32)
    with torch.no_grad():
        assert torch.equal(m.extract(x), m.extract(x))


def test_zero_map_logits_follow_shift():
    m = small()
    m.eval()
    zeros = torch.zeros(2, 8, 4, 2)
    with torch.no_grad():
        assert torch.count_nonzero(m.classify(zeros)) == 0
        m.classifier.bn.bias.copy_(torch.randn(8))
        expected = m.classifier.fc.weight @ m.classifier.bn.bias
        assert torch.allclose(m.classify(zeros), expected.expand(2, -1), atol=1e-6)


def test_pooling_is_mean_and_linear():
    m = small()
    x = torch.rand(4, 8, 4, 2, dtype=torch.float64)
    pooled = m.classifier.pool(x)
    assert torch.allclose(pooled, x.reshape(4, 8, -1).mean(-1), atol=1e-6)
    assert torch.allclose(m.classifier.pool(3.5 * x), 3.5 * pooled)


def test_max_pooling_option():
    m = small(pooling="max")
    x = torch.rand(2, 8, 4, 2)
    assert torch.equal(m.classifier.pool(x), x.amax(dim=(2, 3)))


def test_classify_shapes_and_channel_check():
    m = small()
    assert tuple(m.classify(torch.rand(6, 8, 4, 2)).shape) == (6, 5)
    with pytest.raises(ShapeMismatch):
        m.classify(torch.rand(6, 7, 4, 2))


def test_embedding_contract():
    m = small()
    m.eval()
    img = torch.randn(1, 3, 64, 32)
    with torch.no_grad():
        e = m.embed(torch.cat([img, img]))
    assert e.shape == (2, 8)
    assert torch.equal(e[0], e[1])
    assert torch.dist(e[0], e[1]).item() == 0.0


def test_update_stats_flag_leaves_running_stats():
    m = small()
    m.train()
    before = m.classifier.bn.running_mean.clone()
    m.classify(torch.rand(4, 8, 4, 2) + 1, update_stats=False)
    assert torch.equal(before, m.classifier.bn.running_mean)
    m.classify(torch.rand(4, 8, 4, 2) + 1)
    assert not torch.equal(before, m.classifier.bn.running_mean)


def test_frozen_classifier_gets_no_gradient():
    m = small()
    m.train()
    out = m.classify(torch.rand(4, 8, 4, 2, requires_grad=True), frozen=True).sum()
    out.backward()
    assert all(p.grad is None for p in m.classifier.parameters())


def test_end_to_end_gradients_match_finite_differences():
    m = small().double()
    m.train()
    x = torch.randn(4, 3, 64, 32, dtype=torch.float64)
    q = smoothed_targets(torch.tensor([0, 1, 2, 3]), 5, 0.1, dtype=torch.float64)
    errors = finite_difference_check(lambda: ce_loss(m(x), q), list(m.parameters()), 40, np.random.default_rng(0))
    assert max(errors) <= 1e-3
