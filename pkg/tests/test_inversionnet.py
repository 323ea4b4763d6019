import dataclasses
import logging
import os

import pytest
import torch
from torch.func import functional_call

from autodiff import finite_difference_check, backward
from inversionnet import ModelConfig, build_model, param_count, check_layer_algebra
from serialization import save_checkpoint, load_checkpoint, read_checkpoint
from train import l1_loss
from utils import LayerAlgebraError, ShapeMismatchError, CorruptFileError


@pytest.fixture(scope="module")
def full_model():
    return build_model(ModelConfig.from_preset("full"))


def test_full_param_count(full_model):
    assert param_count(full_model) == 24_404_802
    assert param_count(full_model, trainable_only=True) == 24_404_802


def test_full_forward_shape(full_model):
    full_model.eval()
    with torch.no_grad():
        out = full_model(torch.randn((2, 5, 1000, 70)))
    assert out.shape == (2, 1, 70, 70)


def test_tiny_param_count():
    assert param_count(build_model(ModelConfig.from_preset("tiny"))) == 323_970


@pytest.mark.parametrize("batch_size", [1, 2, 8])
def test_tiny_forward_shapes(tiny_config, batch_size):
    model = build_model(tiny_config).eval()
    with torch.no_grad():
        out = model(torch.randn((batch_size, 3, 256, 32)))
    assert out.shape == (batch_size, 1, 32, 32)


def test_same_seed_same_weights(tiny_config):
    first, second = build_model(tiny_config, seed=5), build_model(tiny_config, seed=5)
    other = build_model(tiny_config, seed=6)
    for (name, p1), p2 in zip(first.state_dict().items(), second.state_dict().values()):
        assert torch.equal(p1, p2), name
    assert not torch.equal(first.encoder.block1.conv.weight, other.encoder.block1.conv.weight)


def test_output_in_tanh_range(tiny_config):
    model = build_model(tiny_config).eval()
    with torch.no_grad():
        out = model(10.0 * torch.randn((4, 3, 256, 32)))
    assert float(out.abs().max()) <= 1.0


def test_eval_is_deterministic_and_differs_from_train(tiny_config):
    model = build_model(tiny_config)
    x = torch.randn((4, 3, 256, 32))
    model.eval()
    with torch.no_grad():
        first, second = model(x), model(x)
        model.train()
        in_train_mode = model(x)
    assert torch.equal(first, second)
    assert not torch.allclose(first, in_train_mode)


def test_frozen_model_has_no_trainable_params(tiny_config):
    model = build_model(tiny_config).requires_grad_(False)
    assert param_count(model, trainable_only=True) == 0


def test_layer_algebra_of_presets():
    shapes = dict(check_layer_algebra(ModelConfig.from_preset("full")))
    assert shapes["block8"] == (512, 1, 1)
    assert shapes["head"] == (1, 70, 70)
    assert dict(check_layer_algebra(ModelConfig.from_preset("tiny")))["head"] == (1, 32, 32)


def test_broken_config_names_failing_block(tiny_config):
    decoder = list(tiny_config.decoder)
    decoder[2] = dataclasses.replace(decoder[2], in_channels=48)
    with pytest.raises(LayerAlgebraError, match="deconv2_1"):
        check_layer_algebra(dataclasses.replace(tiny_config, decoder=decoder))

    with pytest.raises(LayerAlgebraError, match="bottleneck"):
        check_layer_algebra(dataclasses.replace(tiny_config, in_time=300))

    with pytest.raises(ValueError, match="Unknown model preset"):
        ModelConfig.from_preset("huge")


def test_wrong_input_shape(tiny_config):
    model = build_model(tiny_config)
    with pytest.raises(ShapeMismatchError, match="expected seismic input"):
        model(torch.randn((2, 5, 256, 32)))


def test_config_dict_round_trip():
    config = ModelConfig.from_preset("full")
    assert ModelConfig.from_dict(config.to_dict()) == config


def test_checkpoint_round_trip(tmp_path, tiny_config):
    model = build_model(tiny_config, seed=3)
    model.train()
    model(torch.randn((2, 3, 256, 32)))  # move the running statistics away from their defaults
    model.metadata = {"train_datasets": ["fva", "cva"]}
    path = os.path.join(str(tmp_path), "model.fwck")
    save_checkpoint(model, path)

    loaded = load_checkpoint(path)
    assert loaded.model_config == tiny_config
    assert loaded.metadata == {"train_datasets": ["fva", "cva"]}
    for (name, tensor), loaded_tensor in zip(model.state_dict().items(), loaded.state_dict().values()):
        assert tensor.dtype == loaded_tensor.dtype, name
        assert torch.equal(tensor, loaded_tensor), name


def test_truncated_checkpoint(tmp_path, tiny_config):
    path = os.path.join(str(tmp_path), "model.fwck")
    save_checkpoint(build_model(tiny_config), path)
    with open(path, "rb") as f_ckpt:
        data = f_ckpt.read()
    with open(path, "wb") as f_ckpt:
        f_ckpt.write(data[:-100])

    with pytest.raises(CorruptFileError, match="truncated"):
        read_checkpoint(path)


def test_checkpoint_save_is_logged(tmp_path, tiny_config, caplog):
    path = os.path.join(str(tmp_path), "model.fwck")
    with caplog.at_level(logging.INFO):
        save_checkpoint(build_model(tiny_config), path)
    assert any(record.levelno == logging.INFO and path in record.getMessage() for record in caplog.records)


def test_checkpoint_into_different_architecture(tmp_path, tiny_config):
    path = os.path.join(str(tmp_path), "model.fwck")
    save_checkpoint(build_model(tiny_config), path)
    with pytest.raises(ShapeMismatchError, match="encoder.block1.conv.weight"):
        load_checkpoint(path, expected_config=ModelConfig.from_preset("full"))


@pytest.mark.parametrize("param_name", ["head.conv.weight", "head.norm.weight", "head.norm.bias"])
def test_head_gradients_match_finite_differences(tiny_config, param_name):
    model = build_model(tiny_config, seed=1).to(torch.float64).eval()
    generator = torch.Generator().manual_seed(0)
    seismic = torch.randn((1, 3, 256, 32), dtype=torch.float64, generator=generator)
    cotangent = torch.randn((1, 1, 32, 32), dtype=torch.float64, generator=generator)

    def loss(value):
        return torch.sum(functional_call(model, {param_name: value}, (seismic,)) * cotangent)

    param = dict(model.named_parameters())[param_name]
    assert finite_difference_check(loss, param.detach()) < 1e-4


def test_l1_gradients_match_finite_differences(tiny_config):
    """ Central differences of the L1 loss through the whole model on 1% (at least 4) of the entries of every
        parameter. """
    model = build_model(tiny_config, seed=2).to(torch.float64).train()
    generator = torch.Generator().manual_seed(0)
    seismic = torch.randn((4, 3, 256, 32), dtype=torch.float64, generator=generator)
    with torch.no_grad():
        pred = model(seismic)
    sign = torch.where(torch.rand(pred.shape, dtype=torch.float64, generator=generator) < 0.5, -1.0, 1.0)
    # targets stay at least 0.25 away from the predictions, so no step crosses the kink of |pred - target|
    target = pred + sign * (0.25 + 0.25 * torch.rand(pred.shape, dtype=torch.float64, generator=generator))
    params = {name: param.detach().clone() for name, param in model.named_parameters()}

    def loss(values):
        return l1_loss(functional_call(model, values, (seismic,)), target)

    leaves = {name: value.clone().requires_grad_(True) for name, value in params.items()}
    analytic = backward(loss(leaves), leaves)

    h = 1e-7
    for name, value in params.items():
        num_sampled = min(value.numel(), max(4, value.numel() // 100))
        indices = torch.randperm(value.numel(), generator=generator)[:num_sampled].tolist()
        expected = analytic[name].reshape(-1)[indices]
        numeric = torch.empty_like(expected)
        with torch.no_grad():
            for idx_sample, idx in enumerate(indices):
                plus, minus = value.clone(), value.clone()
                plus.view(-1)[idx] += h
                minus.view(-1)[idx] -= h
                f_plus, f_minus = float(loss({**params, name: plus})), float(loss({**params, name: minus}))
                numeric[idx_sample] = (f_plus - f_minus) / (2 * h)

        rel_error = float(torch.linalg.norm(numeric - expected) / torch.linalg.norm(expected))
        assert rel_error < 1e-4, name
