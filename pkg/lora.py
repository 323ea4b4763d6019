import copy
import hashlib
import json
import logging
import math
import re
from dataclasses import dataclass

import torch
import torch.nn as nn
from torch.func import functional_call

from serialization import write_adapter_file, read_adapter_file
from utils import FingerprintMismatchError, ShapeMismatchError, CorruptFileError

log_to_stdout = logging.info

# Weights of every conv and transposed-conv layer of InversionNet blocks
DEFAULT_TARGET_PATTERN = r"\.conv\.weight$"


@dataclass
class LoraConfig:
    rank: int = 16
    alpha: float = 16.0
    scaling_mode: str = "alpha_over_r"  # or "alpha", which applies alpha without the 1/r normalization
    target_pattern: str = DEFAULT_TARGET_PATTERN

    def __post_init__(self):
        if int(self.rank) != self.rank or self.rank < 1:
            raise ValueError(f"LoRA rank must be a positive integer, got {self.rank}")
        if not self.alpha > 0:
            raise ValueError(f"LoRA alpha must be positive, got {self.alpha}")
        if self.scaling_mode not in ("alpha", "alpha_over_r"):
            raise ValueError(f"Unknown scaling mode '{self.scaling_mode}', expected 'alpha' or 'alpha_over_r'")
        self.rank = int(self.rank)
        self.alpha = float(self.alpha)

    @property
    def scale(self):
        return self.alpha if self.scaling_mode == "alpha" else self.alpha / self.rank

    def matches(self, param_name):
        return re.search(self.target_pattern, param_name) is not None

    def to_dict(self):
        return {
            "rank": self.rank,
            "alpha": self.alpha,
            "scaling_mode": self.scaling_mode,
            "target_pattern": self.target_pattern
        }

    @staticmethod
    def from_dict(d):
        return LoraConfig(**d)


def base_fingerprint(model):
    """ 32-byte SHA-256 over the names and shapes of the model's parameters. """
    description = [[name, list(param.shape)] for name, param in model.named_parameters()]
    return hashlib.sha256(json.dumps(description).encode("utf-8")).digest()


def effective_weight(weight, lora_A, lora_B, scale):
    """ W0 + scale * reshape(B @ A, shape of W0). W0 is not modified.

        B is [W0.shape[0], r] and A is [r, prod(W0.shape[1:])], which for conv weights [C_out, C_in, k_h, k_w] flattens
        to C_out x (C_in * k_h * k_w) and for transposed conv weights [C_in, C_out, k_h, k_w] to
        C_in x (C_out * k_h * k_w). """
    flat_cols = math.prod(weight.shape[1:])
    if lora_B.dim() != 2 or lora_A.dim() != 2 or lora_B.shape[1] != lora_A.shape[0] \
            or lora_B.shape[0] != weight.shape[0] or lora_A.shape[1] != flat_cols:
        raise ShapeMismatchError(f"LoRA factors B {list(lora_B.shape)} and A {list(lora_A.shape)} do not factor a "
                                 f"weight of shape {list(weight.shape)}")
    return weight + scale * (lora_B @ lora_A).reshape(weight.shape)


class LoraAdapter(nn.Module):
    def __init__(self, config, fingerprint, target_shapes):
        """ Low-rank factors (A, B) for each targeted weight of one base model.

            `target_shapes` is an ordered dict {parameter name: weight shape}. Factors start at zero; see `create()`
            for the standard initialization. """
        super().__init__()
        self.lora_config = config
        self.fingerprint = fingerprint
        self.targets = list(target_shapes.keys())
        self.target_shapes = {name: tuple(shape) for name, shape in target_shapes.items()}
        self.metadata = {}

        r = config.rank
        self.lora_A = nn.ParameterList([nn.Parameter(torch.zeros((r, math.prod(shape[1:]))))
                                        for shape in self.target_shapes.values()])
        self.lora_B = nn.ParameterList([nn.Parameter(torch.zeros((shape[0], r)))
                                        for shape in self.target_shapes.values()])

    @property
    def config(self):
        return self.lora_config.to_dict()

    @staticmethod
    def create(base_model, config, seed=0):
        """ A ~ N(0, 1/r) drawn from a generator seeded with `seed`, B = 0, so the adapted model starts out equal to
            the base model. """
        target_shapes = {name: tuple(param.shape) for name, param in base_model.named_parameters()
                         if config.matches(name)}
        if len(target_shapes) == 0:
            raise ValueError(f"LoRA target pattern '{config.target_pattern}' matches no parameter of the base model")

        dtype = next(base_model.parameters()).dtype
        adapter = LoraAdapter(config, base_fingerprint(base_model), target_shapes).to(dtype)
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for lora_A in adapter.lora_A:
                lora_A.copy_(torch.randn(lora_A.shape, generator=generator, dtype=dtype) / math.sqrt(config.rank))
        return adapter

    def named_factors(self):
        for name, lora_A, lora_B in zip(self.targets, self.lora_A, self.lora_B):
            yield f"{name}.lora_A", lora_A
            yield f"{name}.lora_B", lora_B

    def delta(self, target):
        """ Dense update scale * reshape(B @ A) of one targeted weight. """
        idx = self.targets.index(target)
        lora_B, lora_A = self.lora_B[idx], self.lora_A[idx]
        return self.lora_config.scale * (lora_B @ lora_A).reshape(self.target_shapes[target])

    def effective_weights(self, base_model):
        base_params = dict(base_model.named_parameters())
        return {
            name: effective_weight(base_params[name], lora_A, lora_B, self.lora_config.scale)
            for name, lora_A, lora_B in zip(self.targets, self.lora_A, self.lora_B)
        }


def _check_fingerprint(adapter, base_model, source="adapter"):
    expected = base_fingerprint(base_model)
    if adapter.fingerprint != expected:
        raise FingerprintMismatchError(f"{source} was built for a different base model: "
                                       f"adapter fingerprint {adapter.fingerprint.hex()}, "
                                       f"base model fingerprint {expected.hex()}")


class LoraModel(nn.Module):
    def __init__(self, base_model, adapter):
        """ Frozen base InversionNet whose targeted weights are replaced by W0 + s*BA on every forward pass. """
        super().__init__()
        _check_fingerprint(adapter, base_model)
        self.base = base_model
        self.base.requires_grad_(False)
        self.base.eval()
        self.adapter = adapter

    @property
    def model_config(self):
        return self.base.model_config

    @property
    def metadata(self):
        return self.adapter.metadata or self.base.metadata

    @property
    def config(self):
        return {"base": self.base.config, "lora": self.adapter.config}

    def train(self, mode=True):
        super().train(mode)
        # batch normalization of the base keeps using (and never updates) its running statistics
        self.base.eval()
        return self

    def forward(self, seismic):
        return functional_call(self.base, self.adapter.effective_weights(self.base), (seismic,))


def attach(model, config, seed=0):
    adapter = LoraAdapter.create(model, config, seed=seed)
    log_to_stdout(f"Attached LoRA adapter (rank={config.rank}, alpha={config.alpha}, mode={config.scaling_mode}) "
                  f"to {len(adapter.targets)} layers")
    return LoraModel(model, adapter)


def merge(lora_model):
    """ Returns a plain InversionNet whose weights are the effective weights of `lora_model`. The input is left
        untouched. """
    if not isinstance(lora_model, LoraModel):
        raise TypeError(f"merge expects a model with an attached LoRA adapter, got {type(lora_model).__name__} "
                        f"(already merged?)")

    merged = copy.deepcopy(lora_model.base)
    merged_params = dict(merged.named_parameters())
    with torch.no_grad():
        for name, weight in lora_model.adapter.effective_weights(lora_model.base).items():
            merged_params[name].copy_(weight)
    merged.requires_grad_(True)
    merged.metadata = dict(lora_model.metadata)
    return merged


def save_adapter(adapter, path):
    """ Writes only the A/B factors, the LoraConfig and the base fingerprint. Accepts a LoraAdapter or a LoraModel. """
    if isinstance(adapter, LoraModel):
        adapter = adapter.adapter
    write_adapter_file(path, adapter.config, adapter.fingerprint, adapter.named_factors(), metadata=adapter.metadata)


def read_adapter(path, base_model):
    """ Loads an adapter file and checks it against `base_model` without attaching it. """
    config_dict, fingerprint, metadata, tensors = read_adapter_file(path)
    try:
        config = LoraConfig.from_dict(config_dict)
    except (TypeError, ValueError) as err:
        raise CorruptFileError(f"{path}: invalid adapter config {config_dict}") from err

    expected = base_fingerprint(base_model)
    if fingerprint != expected:
        raise FingerprintMismatchError(f"adapter '{path}' was built for a different base model: "
                                       f"adapter fingerprint {fingerprint.hex()}, "
                                       f"base model fingerprint {expected.hex()}")

    target_shapes = {name: tuple(param.shape) for name, param in base_model.named_parameters()
                     if config.matches(name)}
    if len(tensors) == 0 or len(target_shapes) == 0:
        raise CorruptFileError(f"{path}: adapter holds no factors for any layer of the base model")
    adapter = LoraAdapter(config, fingerprint, target_shapes)
    expected_factors = dict(adapter.named_factors())
    if set(tensors.keys()) != set(expected_factors.keys()):
        raise CorruptFileError(f"{path}: adapter tensors do not match the targeted layers of the base model")

    adapter = adapter.to(next(iter(tensors.values())).dtype)
    with torch.no_grad():
        for name, factor in adapter.named_factors():
            if tuple(tensors[name].shape) != tuple(factor.shape):
                raise ShapeMismatchError(f"{path}: factor '{name}' has shape {list(tensors[name].shape)}, "
                                         f"expected {list(factor.shape)}")
            factor.copy_(tensors[name])
    adapter.metadata = metadata if isinstance(metadata, dict) else {}
    return adapter


def load_adapter(path, base_model):
    return LoraModel(base_model, read_adapter(path, base_model))


def swap_adapter(lora_model, new_adapter):
    """ Replaces the attached adapter in place and returns the model. The previous adapter is not modified. """
    _check_fingerprint(new_adapter, lora_model.base, source="new adapter")
    lora_model.adapter = new_adapter
    return lora_model


if __name__ == "__main__":
    from inversionnet import ModelConfig, build_model, param_count
    logging.basicConfig(level=logging.INFO)
    full_model = build_model(ModelConfig.from_preset("full"))
    adapted = attach(full_model, LoraConfig(rank=16, alpha=16))
    log_to_stdout(f"Trainable: {param_count(adapted, trainable_only=True):,} / {param_count(full_model):,}")
