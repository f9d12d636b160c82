import numpy as np
import pytest

from vcead import ShapeError, Tensor, no_grad
from vcead import nets
from vcead.nets import (
    Autoencoder, Classifier, ModelBundle, PRESETS, SemiSupervisedNet,
    build_bundle, count_parameters, get_preset, load_checkpoint,
    save_checkpoint,
)

RNG = lambda s=0: np.random.default_rng(s)


# ---------------------------------------------------------------------------
# hand-computed per-layer parameter formulas, kept deliberately independent
# of the Module machinery: plain arithmetic over the preset tables


def hand_encoder_params(preset, in_channels=3):
    k = preset.stem_kernel
    total = preset.stem_channels * in_channels * k * k + 2 * preset.stem_channels
    cur = preset.stem_channels
    for b in preset.blocks:
        exp = int(round(cur * b.expansion_ratio))
        if exp != cur:
            total += exp * cur + 2 * exp  # 1x1 expand + affine
        total += exp * b.kernel * b.kernel + 2 * exp  # depthwise + affine
        if b.use_squeeze_excite:
            r = max(1, exp // 4)
            total += exp * r + r  # fc1 weight + bias
            total += r * exp + exp  # fc2 weight + bias
        total += b.out_channels * exp + 2 * b.out_channels  # project + affine
        cur = b.out_channels
    total += preset.latent_channels * cur + 2 * preset.latent_channels
    return total


def hand_decoder_widths(preset, image_channels=3):
    entering = []
    if preset.stem_stride == 2:
        entering.append(image_channels)
    cur = preset.stem_channels
    for b in preset.blocks:
        if b.stride == 2:
            entering.append(cur)
        cur = b.out_channels
    widths = list(reversed(entering))
    if widths:
        widths[-1] = max(widths[-1], 8)
    return widths


def hand_decoder_params(preset, image_channels=3):
    total = 0
    cur = preset.latent_channels
    for w in hand_decoder_widths(preset, image_channels):
        total += cur * 3 * 3 + 2 * cur  # depthwise 3x3 + affine
        total += w * cur + 2 * w  # pointwise + affine
        cur = w
    total += image_channels * cur + image_channels  # final biased 1x1
    return total


def hand_classifier_head_params(preset):
    return preset.latent_channels * 2 + 2


def hand_semi_head_params(preset):
    return preset.latent_channels * 64 + 64 + 64 * 2 + 2


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_parameter_counts_match_hand_formulas(name):
    preset = get_preset(name)
    enc = nets.Encoder(preset, 3, rng=RNG())
    assert count_parameters(enc) == hand_encoder_params(preset)
    dec = nets.Decoder(preset, 3, rng=RNG())
    assert count_parameters(dec) == hand_decoder_params(preset)
    clf_head = nets.ClassifierHead(preset.latent_channels, rng=RNG())
    assert count_parameters(clf_head) == hand_classifier_head_params(preset)
    semi_head = nets.SemiHead(preset.latent_channels, rng=RNG())
    assert count_parameters(semi_head) == hand_semi_head_params(preset)


def test_dense_count_example():
    d = nets.Dense(10, 2, rng=RNG())
    assert count_parameters(d) == 22


def test_depthwise_separable_pair_count_example():
    # depthwise 3x3 over 8 channels + pointwise 8->16, biases on both:
    # 8*9+8 + 8*16+16 = 224
    class Pair(nets.Module):
        def __init__(self):
            self.dw = nets.DepthwiseConv2d(8, 3, bias=True, rng=RNG())
            self.pw = nets.Conv2d(8, 16, 1, bias=True, rng=RNG())

    assert count_parameters(Pair()) == 224


def test_mobilenet_small_full_under_budget():
    preset = get_preset("mobilenet_small_full")
    enc = nets.Encoder(preset, 3, rng=RNG())
    head = nets.ClassifierHead(preset.latent_channels, rng=RNG())
    assert count_parameters(enc) + count_parameters(head) <= 4_000_000


# ---------------------------------------------------------------------------
# shape contracts


def test_desk_tiny_latent_shape():
    preset = get_preset("desk_tiny")
    assert preset.latent_shape((3, 32, 32)) == (32, 4, 4)
    enc = nets.Encoder(preset, 3, rng=RNG())
    with no_grad():
        z = enc(Tensor(np.zeros((2, 3, 32, 32), dtype=np.float32)))
    assert z.shape == (2, 32, 4, 4)


def test_identity_width_preserves_spatial():
    preset = get_preset("identity_width")
    enc = nets.Encoder(preset, 3, rng=RNG())
    with no_grad():
        z = enc(Tensor(np.zeros((1, 3, 21, 13), dtype=np.float32)))
    assert z.shape == (1, 8, 21, 13)


def test_mobilenet_small_full_latent():
    preset = get_preset("mobilenet_small_full")
    assert preset.latent_shape((3, 224, 224)) == (576, 7, 7)


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_declared_latent_matches_probe_forward(name):
    preset = get_preset(name)
    s = preset.total_stride
    h = w = max(s, 8 if s <= 8 else s)
    enc = nets.Encoder(preset, 3, rng=RNG())
    with no_grad():
        z = enc(Tensor(np.zeros((1, 3, h, w), dtype=np.float32)))
    assert z.shape == (1,) + preset.latent_shape((3, h, w))


@pytest.mark.parametrize("size", [32, 64])
def test_encoder_decoder_roundtrip_shape(size):
    ae = Autoencoder(get_preset("desk_tiny"), rng=RNG())
    with no_grad():
        out = ae(Tensor(np.random.default_rng(0).uniform(
            size=(1, 3, size, size)).astype(np.float32)))
    assert out.shape == (1, 3, size, size)


def test_decoder_output_in_unit_interval():
    ae = Autoencoder(get_preset("desk_tiny"), rng=RNG(3))
    for seed in range(5):
        x = np.random.default_rng(seed).uniform(size=(2, 3, 16, 16))
        with no_grad():
            out = ae(Tensor(x.astype(np.float32)))
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0


def test_encoder_rejects_indivisible_input():
    enc = nets.Encoder(get_preset("desk_tiny"), 3, rng=RNG())
    with pytest.raises(ShapeError, match="divisible.*8"):
        enc(Tensor(np.zeros((1, 3, 30, 30), dtype=np.float32)))


def test_forward_helpers_validate_channels():
    bundle = build_bundle("desk_tiny", seed=0)
    with pytest.raises(ShapeError, match="classifier"):
        nets.classifier_forward(bundle, np.zeros((1, 4, 32, 32), dtype=np.float32))


def test_zero_weight_classifier_gives_zero_logits():
    bundle = build_bundle("desk_tiny", seed=0)
    for p in bundle.classifier.parameters():
        p.data = np.zeros_like(p.data)
    with no_grad():
        logits = nets.classifier_forward(
            bundle, np.random.default_rng(1).uniform(size=(3, 3, 32, 32)))
    assert np.array_equal(logits.data, np.zeros((3, 2), dtype=np.float32))


def test_semi_head_consumes_pooled_latent():
    preset = get_preset("desk_tiny")
    head = nets.SemiHead(preset.latent_channels, rng=RNG())
    assert head.fc1.weight.shape[0] == preset.latent_channels
    bundle = build_bundle("desk_tiny", seed=0)
    with no_grad():
        logits = nets.semi_forward(
            bundle, np.zeros((2, 3, 32, 32), dtype=np.float32))
    assert logits.shape == (2, 2)


def test_residual_block_identity_when_body_zeroed():
    spec = nets.BlockSpec(2.0, 8, 3, 1, True, "relu")
    block = nets.InvertedResidual(8, spec, rng=RNG(2))
    for _, p in block.named_parameters():
        p.data = np.zeros_like(p.data)
    x = np.random.default_rng(0).uniform(size=(2, 8, 6, 6)).astype(np.float32)
    with no_grad():
        out = block(Tensor(x))
    assert np.array_equal(out.data, x)


def test_block_spec_validation():
    with pytest.raises(ValueError, match="stride"):
        nets.BlockSpec(1.0, 8, 3, 3)
    with pytest.raises(ValueError, match="expansion_ratio"):
        nets.BlockSpec(0.5, 8)
    with pytest.raises(ValueError, match="out_channels"):
        nets.BlockSpec(1.0, 0)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    bundle = build_bundle("desk_tiny", seed=7)
    bundle.classifier.trained = True
    path = tmp_path / "clf.ckpt"
    save_checkpoint(path, bundle.classifier)
    loaded = load_checkpoint(path)
    assert loaded.kind == "classifier"
    assert loaded.trained
    orig = dict(bundle.classifier.named_parameters())
    for name, p in loaded.named_parameters():
        assert np.array_equal(p.data, orig[name].data)
        assert p.data.dtype == orig[name].data.dtype


@pytest.mark.parametrize("cls", [Classifier, Autoencoder, SemiSupervisedNet])
def test_checkpoint_all_learner_kinds(tmp_path, cls):
    net = cls(get_preset("stem_only"), rng=RNG(1))
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, net)
    loaded = load_checkpoint(path)
    assert type(loaded) is cls
    assert count_parameters(loaded) == count_parameters(net)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"format": "something-else"}')
    with pytest.raises(ValueError, match="checkpoint"):
        load_checkpoint(path)


def test_f64_network_checkpoint_preserves_dtype(tmp_path):
    net = Classifier(get_preset("stem_only"), rng=RNG(0), dtype=np.float64)
    path = tmp_path / "c64.ckpt"
    save_checkpoint(path, net)
    loaded = load_checkpoint(path)
    assert all(p.data.dtype == np.float64 for p in loaded.parameters())
