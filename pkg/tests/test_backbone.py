import pytest
import torch

from malenia.backbone import Backbone, FeaturePyramid
from malenia.errors import ShapeError


@pytest.fixture(scope="module")
def backbone():
    torch.manual_seed(0)
    return Backbone(token_dim=32)


def test_pyramid_shapes_32(backbone):
    pyramid = backbone(torch.randn(1, 1, 32, 32, 32))
    assert pyramid.f1.shape == (1, 32, 1, 1, 1)  # 1/32 resolution
    assert pyramid.f2.shape == (1, 32, 2, 2, 2)  # 1/16
    assert pyramid.f3.shape == (1, 32, 4, 4, 4)  # 1/8
    assert pyramid.f4.shape == (1, 32, 32, 32, 32)  # full resolution


def test_pyramid_shapes_96():
    torch.manual_seed(0)
    backbone = Backbone(token_dim=32)
    pyramid = backbone(torch.randn(1, 1, 96, 96, 96))
    assert pyramid.f1.shape == (1, 32, 3, 3, 3)
    assert pyramid.f2.shape == (1, 32, 6, 6, 6)
    assert pyramid.f3.shape == (1, 32, 12, 12, 12)
    assert pyramid.f4.shape == (1, 32, 96, 96, 96)


def test_pyramid_levels_property(backbone):
    pyramid = backbone(torch.randn(1, 1, 32, 32, 32))
    assert pyramid.levels == (pyramid.f1, pyramid.f2, pyramid.f3)


def test_backbone_rejects_non_divisible_input(backbone):
    with pytest.raises(ShapeError):
        backbone(torch.randn(1, 1, 30, 32, 32))


def test_backbone_rejects_wrong_rank(backbone):
    with pytest.raises(ShapeError):
        backbone(torch.randn(1, 32, 32, 32))


def test_backbone_output_finite_and_differentiable(backbone):
    x = torch.randn(1, 1, 32, 32, 32, requires_grad=True)
    pyramid = backbone(x)
    assert all(torch.isfinite(f).all() for f in pyramid.levels)
    pyramid.f4.sum().backward()
    assert x.grad is not None and torch.isfinite(x.grad).all()


def test_feature_pyramid_validates_scales():
    f = lambda s: torch.zeros(1, 8, s, s, s)
    FeaturePyramid(f1=f(1), f2=f(2), f3=f(4), f4=f(32))
    with pytest.raises(ShapeError):
        FeaturePyramid(f1=f(1), f2=f(4), f3=f(4), f4=f(32))


def test_backbone_batch_independence(backbone):
    """Normalization must not mix samples across the batch axis."""
    a = torch.randn(1, 1, 32, 32, 32)
    b = torch.randn(1, 1, 32, 32, 32)
    together = backbone(torch.cat([a, b]))
    alone = backbone(a)
    assert torch.allclose(together.f4[0], alone.f4[0], atol=1e-5)
