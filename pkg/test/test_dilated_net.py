"""Tests for the dilated network and its checkpoints."""

import math
import struct

import numpy as np
import pytest

from aortaseg import dilated_net as dn
from aortaseg import tensor_core as tc
from aortaseg.errors import (
    CorruptCheckpointError,
    InvalidArgumentError,
    InvalidCheckpointError,
    InvalidSpecError,
)
from aortaseg.trainer import soft_dice_loss

# pylint: disable=redefined-outer-name


@pytest.fixture
def net() -> dn.Network:
    """Canonical four-class network."""
    return dn.build_network(4, np.random.default_rng(0))


def micro_spec(num_classes=4, width=8, batch_norm=True, dropout=0.5):
    """Three layer network for gradient checks."""
    layers = (
        dn.LayerSpec(dn.CONV3X3, 1, width, 2),
        dn.LayerSpec(
            dn.CONV1X1,
            width,
            width,
            1,
            has_batch_norm=batch_norm,
            dropout_before=dropout,
        ),
        dn.LayerSpec(
            dn.CONV1X1,
            width,
            num_classes,
            1,
            dropout_before=dropout,
            activation="softmax",
        ),
    )
    return dn.NetworkSpec(layers, num_classes)


def constant_network(spec):
    """Network with weights 1/fan_in, zero biases and identity batch norms."""
    net = dn.build_network(spec.num_classes, np.random.default_rng(0), spec, np.float64)
    for conv in net.convs:
        fan_in = conv.weights.shape[1] * conv.weights.shape[2] ** 2
        conv.weights[...] = 1.0 / fan_in
    return net


def test_canonical_geometry():
    """The canonical network sees 131x131 voxels."""
    spec = dn.canonical_spec(4)
    assert len(spec.layers) == 10
    assert dn.receptive_field(spec) == (131, 131)
    assert [layer.dilation for layer in spec.layers[:8]] == [1, 1, 2, 4, 8, 16, 32, 1]
    assert spec.layers[8].has_batch_norm and spec.layers[8].dropout_before == 0.5
    assert spec.layers[9].activation == "softmax"
    assert spec.layers[9].dropout_before == 0.5


def test_parameter_count():
    """Parameter counts of the four- and two-class networks."""
    assert dn.parameter_count(dn.canonical_spec(4)) == 66308
    assert dn.parameter_count(dn.canonical_spec(2)) == 66242
    net = dn.build_network(4, np.random.default_rng(0))
    assert sum(p.size for p in net.parameters()) == 66308


def test_spec_validation():
    """Malformed specs are rejected."""
    good = micro_spec()
    with pytest.raises(InvalidSpecError):
        dn.NetworkSpec(good.layers, 2).validate()
    with pytest.raises(InvalidSpecError):
        dn.NetworkSpec(good.layers[:2], 3).validate()
    with pytest.raises(InvalidSpecError):
        dn.LayerSpec(dn.CONV1X1, 1, 1, 2).validate()
    with pytest.raises(InvalidArgumentError):
        dn.build_network(3, np.random.default_rng(0))


def test_initialisation(net):
    """Weights are He-uniform and biases zero."""
    first = net.convs[1].weights
    bound = math.sqrt(6.0 / (32 * 9))
    assert np.abs(first).max() <= bound
    assert np.abs(first).max() > 0.9 * bound
    assert all(not conv.bias.any() for conv in net.convs)
    assert net.dtype == np.float32


def test_output_shapes(net):
    """281 inputs give 151 outputs and 131 inputs give a single position."""
    out = net.forward(np.zeros((1, 1, 281, 281), dtype=np.float32))
    assert out.shape == (1, 4, 151, 151)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-5)
    single = np.zeros((2, 1, 131, 131), dtype=np.float32)
    assert net.forward(single).shape == (2, 4, 1, 1)
    with pytest.raises(InvalidArgumentError):
        net.forward(np.zeros((1, 1, 130, 140), dtype=np.float32))


def test_receptive_field_perturbation():
    """A single perturbed input voxel changes exactly a 131x131 output block."""
    net = constant_network(dn.canonical_spec(4))
    size = 263
    base = np.ones((1, 1, size, size))
    perturbed = base.copy()
    perturbed[0, 0, size // 2, size // 2] += 1.0
    diff = np.abs(net.forward(perturbed, logits=True) - net.forward(base, logits=True))
    rows, cols = np.nonzero(diff.max(axis=1)[0])
    assert rows.max() - rows.min() + 1 == 131
    assert cols.max() - cols.min() + 1 == 131


def test_tiling_equivalence():
    """Overlapping 281 crops reproduce the output of a 300x300 slice."""
    spec = dn.canonical_spec(4, width=6)
    net = dn.build_network(4, np.random.default_rng(3), spec, np.float64)
    image = np.random.default_rng(4).random((1, 1, 300, 300))
    full = net.forward(image)
    assert full.shape == (1, 4, 170, 170)
    for row in (0, 19):
        for col in (0, 19):
            crop = net.forward(image[:, :, row : row + 281, col : col + 281])
            tile = full[:, :, row : row + 151, col : col + 151]
            assert np.abs(crop - tile).max() <= 1e-5


def test_infer_mode_leaves_network_untouched(net):
    """Inference keeps running statistics fixed and needs no rng."""
    before = net.norms[8].running_mean.copy()
    net.forward(np.random.default_rng(0).random((1, 1, 140, 140), dtype=np.float32))
    np.testing.assert_array_equal(net.norms[8].running_mean, before)
    with pytest.raises(InvalidArgumentError):
        net.forward(np.zeros((1, 1, 131, 131), dtype=np.float32), mode="train")


def test_copy_and_astype_are_independent(net):
    """Copies share no arrays with the original."""
    wide = net.astype(np.float64)
    assert wide.dtype == np.float64 and net.dtype == np.float32
    assert all(p.dtype == np.float64 for p in wide.parameters())
    clone = net.copy()
    clone.convs[0].weights[...] = 0.0
    assert np.abs(net.convs[0].weights).max() > 0.0
    np.testing.assert_array_equal(wide.convs[1].weights, net.convs[1].weights)


def test_end_to_end_gradient():
    """A three layer network with dropout passes a 64-bit gradient check."""
    spec = micro_spec()
    net = dn.build_network(4, np.random.default_rng(5), spec, np.float64)
    for conv in net.convs:
        conv.bias[...] = np.random.default_rng(6).normal(size=conv.bias.shape)
    images = np.random.default_rng(7).random((2, 1, 9, 9))
    labels = np.random.default_rng(8).integers(0, 4, size=(2, 5, 5))

    def probabilities():
        # same dropout masks on every pass
        return net.forward(images, "train", np.random.default_rng(9))

    def loss():
        return soft_dice_loss(probabilities(), labels)[0]

    _, grad = soft_dice_loss(probabilities(), labels)
    analytic = net.backward(grad)
    for param, grad_param in zip(net.parameters(), analytic):
        numeric = tc.numerical_gradient(loss, param)
        if np.abs(numeric).max() < 1e-8:
            # bias ahead of batch norm
            assert np.abs(grad_param).max() < 1e-8
            continue
        assert tc.max_relative_error(grad_param, numeric) <= 1e-4


def test_checkpoint_round_trip(net, tmp_path):
    """Saving and loading restores every parameter bit-exactly."""
    net.metadata = dn.TrainingMetadata(iteration=500, seed=7, validation_score=0.875)
    path = tmp_path / "model.adcn"
    dn.save_checkpoint(net, path)
    loaded = dn.load_checkpoint(path, expected_classes=4)
    assert loaded.spec == net.spec
    for a, b in zip(net.parameters(), loaded.parameters()):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(loaded.norms[8].running_var, net.norms[8].running_var)
    assert loaded.metadata == net.metadata
    assert dn.checkpoint_bytes(loaded) == path.read_bytes()


def test_checkpoint_corruption(net, tmp_path):
    """Flipped bits, truncation and bad magic are rejected."""
    data = bytearray(dn.checkpoint_bytes(net))
    data[100] ^= 0xFF
    with pytest.raises(CorruptCheckpointError):
        dn.network_from_bytes(bytes(data))
    with pytest.raises(CorruptCheckpointError):
        dn.network_from_bytes(dn.checkpoint_bytes(net)[:-10])
    with pytest.raises(CorruptCheckpointError):
        dn.network_from_bytes(b"XXXX" + dn.checkpoint_bytes(net)[4:])
    path = tmp_path / "two.adcn"
    dn.save_checkpoint(dn.build_network(2, np.random.default_rng(1)), path)
    with pytest.raises(InvalidCheckpointError):
        dn.load_checkpoint(path, expected_classes=4)


def test_checkpoint_layer_records(net):
    """Layer records hold kind, in, out, dilation and flags before the parameters."""
    data = dn.checkpoint_bytes(net)
    assert data[:4] == b"ADCN"
    assert struct.unpack_from("<III", data, 4) == (dn.CHECKPOINT_VERSION, 4, 10)
    offset = 16
    records = []
    for layer in net.spec.layers:
        records.append(struct.unpack_from("<BIIIB", data, offset))
        offset += 14
        offset += 4 * (layer.kernel**2 * layer.in_channels + 1) * layer.out_channels
    # one batch norm block, metadata and the crc
    assert len(data) - offset == 4 * 4 * 32 + 20 + 4
    assert records[0] == (0, 1, 32, 1, 0b010)
    assert records[6][1:4] == (32, 32, 32)
    assert records[7][1:4] == (32, 32, 1)
    # bn, relu and dropout 16/32
    assert records[8] == (1, 32, 32, 1, 1 | 1 << 1 | 16 << 3)
    assert records[9] == (1, 32, 4, 1, 2 << 1 | 16 << 3)


def test_checkpoint_dropout_resolution():
    """Dropout is stored in 1/32 steps; other rates cannot be saved."""
    spec = micro_spec(dropout=0.25)
    net = dn.build_network(4, np.random.default_rng(2), spec)
    loaded = dn.network_from_bytes(dn.checkpoint_bytes(net))
    assert loaded.spec.layers[2].dropout_before == 0.25
    odd = dn.build_network(4, np.random.default_rng(2), micro_spec(dropout=0.3))
    with pytest.raises(InvalidArgumentError):
        dn.checkpoint_bytes(odd)


def test_describe(net):
    """The description names the receptive field and parameter count."""
    text = dn.describe(net)
    assert "receptive_field=131x131" in text
    assert "parameter_count=66308" in text
    assert "layer 7: conv3x3 32->32 dilation=32 relu" in text
