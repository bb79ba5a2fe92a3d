import numpy as np
import pytest

from eamnet import ConfigurationError, DimensionError, ValidationError
from eamnet.explain import Heatmap, colorize, colormap, grad_cam, mass_inside, overlay
from eamnet.model import Model, build_backbone, default_blocks, make_variant


@pytest.fixture(scope="module")
def model():
    g = make_variant(build_backbone(default_blocks(1, (4, 8, 32)), 3, (1, 28, 28)), "eam")
    return Model(g, seed=4)


@pytest.fixture
def image():
    return np.random.default_rng(8).random((1, 28, 28))


def test_range_and_shapes(model, image):
    hm = grad_cam(model, image)
    assert hm.values.shape == (7, 7)
    assert hm.upsampled.shape == (28, 28)
    for arr in (hm.values, hm.upsampled):
        assert arr.min() >= 0.0
        assert arr.max() == 1.0 or not arr.any()
    assert hm.tap == "block_2"


def test_deterministic(model, image):
    a = grad_cam(model, image, 1)
    b = grad_cam(model, image, 1)
    np.testing.assert_array_equal(a.upsampled, b.upsampled)


def test_default_class_is_prediction(model, image):
    pred = int(model.forward(image[None]).logits.data.argmax())
    assert grad_cam(model, image).target_class == pred


def test_zero_gradient_class_gives_zero_map(model, image):
    m = Model(model.graph, model.state())
    m.params["head.weight"][:, 2] = 0.0
    hm = grad_cam(m, image, 2)
    assert not hm.values.any() and not hm.upsampled.any()


def test_other_taps(model, image):
    assert grad_cam(model, image, tap="block_1").values.shape == (14, 14)
    assert grad_cam(model, image, tap="eam1.conv_1").values.shape == (2, 2)


def test_unknown_tap_lists_choices(model, image):
    with pytest.raises(ConfigurationError, match="block_1"):
        grad_cam(model, image, tap="block_9")


def test_class_out_of_range(model, image):
    with pytest.raises(ValidationError):
        grad_cam(model, image, 3)


def test_batch_rejected(model):
    with pytest.raises(DimensionError):
        grad_cam(model, np.zeros((2, 1, 28, 28)))


def test_colormap_table():
    lut = colormap()
    assert lut.shape == (256, 3) and lut.dtype == np.uint8
    assert tuple(lut[0]) == (0, 0, 128)
    assert tuple(lut[255]) == (128, 0, 0)
    # cold end blue-dominant, hot end red-dominant
    assert lut[:64, 2].mean() > lut[:64, 0].mean()
    assert lut[-64:, 0].mean() > lut[-64:, 2].mean()


def test_overlay_blend_arithmetic():
    values = np.array([[0.0, 1.0], [0.5, 0.25]])
    hm = Heatmap(values, values, "t", 0)
    img = np.array([[[0.2, 0.4], [0.6, 0.8]]])
    out = overlay(hm, img, 0.5).data[0]
    lut = colormap() / 255.0
    for (r, c), v in np.ndenumerate(values):
        expected = 0.5 * img[0, r, c] + 0.5 * lut[int(np.rint(v * 255))]
        np.testing.assert_array_equal(out[:, r, c], expected)
    np.testing.assert_array_equal(overlay(hm, img, 0.0).data[0], colorize(values))
    np.testing.assert_array_equal(overlay(hm, img, 1.0).data[0], np.repeat(img, 3, axis=0))


def test_overlay_validation():
    hm = Heatmap(np.zeros((2, 2)), np.zeros((2, 2)), "t", 0)
    with pytest.raises(ValidationError):
        overlay(hm, np.zeros((1, 2, 2)), 1.5)
    with pytest.raises(DimensionError):
        overlay(hm, np.zeros((1, 3, 3)), 0.5)


def test_mass_inside():
    up = np.zeros((4, 4))
    up[1:3, 1:3] = 1.0
    up[0, 0] = 1.0
    hm = Heatmap(up, up, "t", 0)
    assert mass_inside(hm, (1, 1, 3, 3)) == 0.8
    assert mass_inside(Heatmap(up * 0, up * 0, "t", 0), (0, 0, 4, 4)) == 0.0
