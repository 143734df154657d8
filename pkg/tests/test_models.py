import numpy as np
import pytest

from lesionforge import ops
from lesionforge.errors import ConfigError, DimensionError
from lesionforge.layers import Conv2d
from lesionforge.models import (DAEConfig, ModelGraph, ResNetConfig, build_dae, build_resnet, count_conv_layers,
                                load_model, predict, save_model)
from lesionforge.tensor import GradientTape, Tensor, backward, load_tensor


@pytest.fixture(scope="module")
def resnet101():
    return build_resnet(ResNetConfig.preset("resnet101"), seed=0)


def test_resnet101_conv_count_and_head(resnet101):
    assert count_conv_layers(resnet101) == 1 + 3 * (3 + 4 + 23 + 3) + 4 == 104
    assert resnet101.layers[-1].weight.shape[0] == 7


def test_resnet101_shape_audit(resnet101):
    blocks = resnet101.blocks()
    assert [b.name.split(".")[0] for b in blocks].count("stage3") == 23
    in_ch = 64
    for b in blocks:
        stage = int(b.name[5]) - 1
        width = 64 * 2 ** stage
        assert b.conv1.weight.shape == (width, in_ch, 1, 1)
        assert b.conv2.weight.shape == (width, width, 3, 3)
        assert b.conv3.weight.shape == (4 * width, width, 1, 1)
        first = b.name.endswith("block0")
        assert b.shortcut == ("projection" if first else "identity")
        assert b.conv2.stride == (2 if first and stage > 0 else 1)
        in_ch = 4 * width
    assert resnet101.layers[-1].weight.shape == (7, 2048)


def test_tiny_conv_count():
    assert count_conv_layers(build_resnet(ResNetConfig.preset("tiny"))) == 17


def test_empty_graph_has_no_convs():
    assert count_conv_layers(ModelGraph("empty", None)) == 0


def test_input_below_stem_rejected():
    with pytest.raises(ConfigError):
        build_resnet(ResNetConfig.preset("tiny", input_size=(5, 5, 3)))


def test_forward_shape_and_mismatch():
    g = build_resnet(ResNetConfig.preset("tiny"), seed=1)
    assert g.forward(Tensor(np.zeros((2, 3, 32, 32), np.float32))).shape == (2, 7)
    with pytest.raises(DimensionError):
        g.forward(Tensor(np.zeros((2, 3, 16, 16), np.float32)))


def test_parameter_names_unique_and_stable():
    a = build_resnet(ResNetConfig.preset("tiny"), seed=1)
    b = build_resnet(ResNetConfig.preset("tiny"), seed=2)
    assert list(a.parameters()) == list(b.parameters())
    assert a.param_hash() != b.param_hash()
    assert a.param_hash() == build_resnet(ResNetConfig.preset("tiny"), seed=1).param_hash()


def test_zero_init_residual_blocks_pass_shortcut_through():
    cfg = ResNetConfig.preset("tiny", stage_blocks=(2, 2, 1, 1), zero_init_residual=True)
    g = build_resnet(cfg, seed=3)
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 32, 32)).astype(np.float32))
    checked = 0
    for layer in g.layers:
        if layer in g.blocks():
            out = layer(x).data
            assert not layer.residual(x).data.any()
            if layer.shortcut == "identity":
                np.testing.assert_array_equal(out, x.data)
                checked += 1
            else:
                np.testing.assert_array_equal(out, ops.relu(layer.shortcut_path(x)).data)
        x = layer(x)
    assert checked == 2


def test_gradient_reaches_stem_with_zero_init_residual():
    cfg = ResNetConfig.preset("tiny", zero_init_residual=True)
    g = build_resnet(cfg, seed=4, dtype=np.float64)
    x = Tensor(np.random.default_rng(1).standard_normal((2, 3, 32, 32)), dtype=np.float64)
    with GradientTape() as tape:
        loss = ops.softmax_cross_entropy(g.forward(x, train=True), [0, 1])
    grads = backward(tape, loss)
    assert loss.item() > 0
    assert np.abs(grads["stem.conv.weight"].data).max() > 0


def test_predict_rows_are_distributions():
    g = build_resnet(ResNetConfig.preset("tiny"), seed=5)
    x = np.random.default_rng(2).standard_normal((5, 3, 32, 32)).astype(np.float32)
    probs, labels = predict(g, x, batch_size=2)
    assert probs.shape == (5, 7)
    assert np.abs(probs.sum(axis=1) - 1).max() < 1e-6
    np.testing.assert_array_equal(labels, probs.argmax(axis=1))


def test_zero_head_gives_uniform_probabilities():
    g = build_resnet(ResNetConfig.preset("tiny", zero_head=True), seed=5)
    probs, labels = predict(g, np.ones((2, 3, 32, 32), np.float32))
    np.testing.assert_allclose(probs, 1 / 7, atol=1e-7)
    assert labels.tolist() == [0, 0]


def test_predict_golden(data_dir):
    golden = load_tensor(data_dir / "predict_golden.ltd").data
    graph = build_resnet(ResNetConfig.preset("tiny"), seed=123)
    x = np.random.default_rng(7).standard_normal((3, 3, 32, 32)).astype(np.float32)
    probs, _ = predict(graph, x)
    assert probs.tobytes() == golden.tobytes()


def test_predict_rejects_autoencoder():
    with pytest.raises(ConfigError):
        predict(build_dae(DAEConfig()), np.zeros((1, 3, 32, 32), np.float32))


# ---------------------------------------------------------------- autoencoder

def test_dae_compression_check():
    with pytest.raises(ConfigError, match="not fewer"):
        DAEConfig(encoder_channels=(32, 64)).validate()
    DAEConfig(encoder_channels=(16, 8)).validate()
    assert DAEConfig().latent_shape() == (8, 8, 8)


def test_dae_indivisible_input():
    with pytest.raises(ConfigError, match="divisible"):
        DAEConfig(input_size=(30, 32, 3)).validate()


def test_dae_conv_count_and_shape():
    g = build_dae(DAEConfig(), seed=0)
    assert count_conv_layers(g) == 5
    x = Tensor(np.random.default_rng(0).uniform(size=(2, 3, 32, 32)).astype(np.float32))
    y = g.forward(x).data
    assert y.shape == x.shape
    assert y.min() >= 0 and y.max() <= 1
    assert g.encode(x).shape == (2, 8, 8, 8)


def test_dae_output_range_on_extreme_inputs():
    g = build_dae(DAEConfig(), seed=1)
    y = g.forward(Tensor(np.full((1, 3, 32, 32), 1e3, np.float32))).data
    assert y.min() >= 0 and y.max() <= 1


def test_zero_dae_outputs_half():
    g = build_dae(DAEConfig(), seed=0)
    for p in g.parameters().values():
        p.assign(np.zeros(p.shape))
    y = g.forward(Tensor(np.random.default_rng(0).uniform(size=(2, 3, 32, 32)).astype(np.float32))).data
    assert (y == 0.5).all()


# ---------------------------------------------------------------- checkpoints

@pytest.mark.parametrize("build", [lambda: build_resnet(ResNetConfig.preset("tiny"), seed=9),
                                   lambda: build_dae(DAEConfig(encoder_channels=(8, 4)), seed=9)])
def test_checkpoint_save_load_save_identical(tmp_path, build):
    g = build()
    save_model(tmp_path / "a", g, {"epoch": 3, "seed": 9})
    loaded, meta, extras = load_model(tmp_path / "a")
    assert meta["epoch"] == "3" and not extras
    assert loaded.param_hash() == g.param_hash()
    assert loaded.config == g.config
    save_model(tmp_path / "b", loaded, {"epoch": 3, "seed": 9})
    for f in sorted((tmp_path / "a").iterdir()):
        assert (tmp_path / "b" / f.name).read_bytes() == f.read_bytes(), f.name
    assert sorted(p.name for p in (tmp_path / "a").iterdir()) == sorted(p.name for p in (tmp_path / "b").iterdir())


def test_he_init_scale():
    g = build_resnet(ResNetConfig.preset("resnet50", input_size=(64, 64, 3)), seed=0)
    conv = next(layer for layer in g.walk() if isinstance(layer, Conv2d) and layer.weight.size > 50000)
    f, c, kh, kw = conv.weight.shape
    assert abs(conv.weight.data.std() - np.sqrt(2 / (c * kh * kw))) / np.sqrt(2 / (c * kh * kw)) < 0.05
