""" Binary containers for model checkpoints ("FWCK") and LoRA adapters ("FWLA").

    Both share the same discipline: a fixed header, a UTF-8 JSON manifest listing (name, dtype, shape, offset, nbytes)
    for every tensor, then the raw little-endian tensor blobs in manifest order. Readers validate the whole file before
    anything is constructed from it. """
import json
import logging
import struct

import numpy as np
import torch

from inversionnet import ModelConfig, InversionNet
from utils import CorruptFileError, ShapeMismatchError

log_to_stdout = logging.info

CHECKPOINT_MAGIC = b"FWCK"
ADAPTER_MAGIC = b"FWLA"
FORMAT_VERSION = 1
FINGERPRINT_SIZE = 32

# manifest dtype code -> (numpy little-endian dtype, torch dtype)
DTYPES = {
    "f32": ("<f4", torch.float32),
    "f64": ("<f8", torch.float64),
    "i64": ("<i8", torch.int64)
}
TORCH2CODE = {torch_dtype: code for code, (_, torch_dtype) in DTYPES.items()}


def _u32(value):
    return struct.pack("<I", value)


def pack_tensors(named_tensors):
    """ Returns (manifest entries, blob bytes) for an iterable of (name, tensor) pairs. """
    entries, blobs, offset = [], [], 0
    for name, tensor in named_tensors:
        if tensor.dtype not in TORCH2CODE:
            raise TypeError(f"cannot serialize tensor '{name}' of dtype {tensor.dtype}")
        code = TORCH2CODE[tensor.dtype]
        data = tensor.detach().cpu().contiguous().numpy().astype(DTYPES[code][0], copy=False).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(tensor.shape), "offset": offset,
                        "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)

    return entries, b"".join(blobs)


def unpack_tensors(entries, blob, path="<buffer>"):
    """ Validates manifest `entries` against `blob` and returns an ordered dict name -> tensor. """
    if not isinstance(entries, list):
        raise CorruptFileError(f"{path}: manifest tensor list is malformed")

    expected_offset = 0
    for entry in entries:
        try:
            name, code, shape = entry["name"], entry["dtype"], entry["shape"]
            offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
        except (KeyError, TypeError, ValueError) as err:
            raise CorruptFileError(f"{path}: malformed manifest entry {entry!r}") from err
        if code not in DTYPES:
            raise CorruptFileError(f"{path}: tensor '{name}' has unknown dtype '{code}'")
        if any(not isinstance(dim, int) or dim < 0 for dim in shape):
            raise CorruptFileError(f"{path}: tensor '{name}' has invalid shape {shape}")
        if nbytes != int(np.prod(shape, dtype=np.int64)) * np.dtype(DTYPES[code][0]).itemsize:
            raise CorruptFileError(f"{path}: tensor '{name}' of shape {shape} cannot occupy {nbytes} bytes")
        if offset != expected_offset:
            raise CorruptFileError(f"{path}: tensor '{name}' starts at byte {offset}, expected {expected_offset}")
        expected_offset += nbytes

    if expected_offset != len(blob):
        raise CorruptFileError(f"{path}: manifest describes {expected_offset} bytes of tensor data, "
                               f"file holds {len(blob)} (truncated or padded file)")

    tensors = {}
    for entry in entries:
        np_dtype, _ = DTYPES[entry["dtype"]]
        array = np.frombuffer(blob, dtype=np_dtype, count=int(np.prod(entry["shape"], dtype=np.int64)),
                              offset=entry["offset"]).copy()
        tensors[entry["name"]] = torch.from_numpy(array).reshape(entry["shape"])

    return tensors


class _Reader:
    """ Bounds-checked sequential reads from the bytes of one file. """
    def __init__(self, data, path):
        self.data = data
        self.path = path
        self.pos = 0

    def take(self, num_bytes, what):
        if self.pos + num_bytes > len(self.data):
            raise CorruptFileError(f"{self.path}: file ends inside the {what} (truncated file)")
        chunk = self.data[self.pos: self.pos + num_bytes]
        self.pos += num_bytes
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def json(self, num_bytes, what):
        try:
            return json.loads(self.take(num_bytes, what).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as err:
            raise CorruptFileError(f"{self.path}: {what} is not valid UTF-8 JSON") from err

    def header(self, magic):
        found = self.take(len(magic), "magic")
        if found != magic:
            raise CorruptFileError(f"{self.path}: bad magic {found!r}, expected {magic!r}")
        version = self.u32("version")
        if version != FORMAT_VERSION:
            raise CorruptFileError(f"{self.path}: unsupported format version {version} "
                                   f"(this build reads version {FORMAT_VERSION})")

    def rest(self):
        return self.data[self.pos:]


def save_checkpoint(model, path, metadata=None):
    """ Writes the parameters and running statistics of an InversionNet, together with its ModelConfig. """
    entries, blob = pack_tensors(model.state_dict().items())
    manifest = json.dumps({
        "config": model.config,
        "metadata": metadata if metadata is not None else model.metadata,
        "tensors": entries
    }).encode("utf-8")

    with open(path, "wb") as f_ckpt:
        f_ckpt.write(CHECKPOINT_MAGIC + _u32(FORMAT_VERSION) + _u32(len(manifest)))
        f_ckpt.write(manifest)
        f_ckpt.write(blob)
    log_to_stdout(f"Saved checkpoint with {len(entries)} tensors to '{path}'")


def read_checkpoint(path):
    """ Returns (ModelConfig, metadata, tensors) of a fully validated checkpoint file. """
    with open(path, "rb") as f_ckpt:
        reader = _Reader(f_ckpt.read(), path)

    reader.header(CHECKPOINT_MAGIC)
    manifest = reader.json(reader.u32("manifest length"), "manifest")
    try:
        config = ModelConfig.from_dict(manifest["config"])
        metadata = manifest.get("metadata", {})
        entries = manifest["tensors"]
    except (KeyError, TypeError, ValueError, AttributeError) as err:
        raise CorruptFileError(f"{path}: manifest does not describe a model") from err

    return config, metadata, unpack_tensors(entries, reader.rest(), path=path)


def load_checkpoint(path, expected_config=None):
    config, metadata, tensors = read_checkpoint(path)
    if expected_config is None:
        expected_config = config

    model = InversionNet(expected_config)
    expected_state = model.state_dict()
    for name, tensor in tensors.items():
        if name not in expected_state:
            raise ShapeMismatchError(f"{path}: parameter '{name}' {list(tensor.shape)} does not exist in the "
                                     f"expected model")
        if tuple(expected_state[name].shape) != tuple(tensor.shape):
            raise ShapeMismatchError(f"{path}: parameter '{name}' has shape {list(tensor.shape)}, expected model "
                                     f"needs {list(expected_state[name].shape)}")
    missing = [name for name in expected_state if name not in tensors]
    if missing:
        raise ShapeMismatchError(f"{path}: checkpoint lacks parameter '{missing[0]}' of the expected model")

    float_dtypes = {t.dtype for t in tensors.values() if t.is_floating_point()}
    if len(float_dtypes) == 1:
        model = model.to(float_dtypes.pop())
    model.load_state_dict(tensors, strict=True)
    model.metadata = metadata
    return model


def write_adapter_file(path, config_dict, fingerprint, named_tensors, metadata=None):
    if len(fingerprint) != FINGERPRINT_SIZE:
        raise ValueError(f"fingerprint must be {FINGERPRINT_SIZE} bytes, got {len(fingerprint)}")
    config_bytes = json.dumps(config_dict).encode("utf-8")
    entries, blob = pack_tensors(named_tensors)
    manifest = json.dumps({"metadata": metadata if metadata is not None else {}, "tensors": entries}).encode("utf-8")

    with open(path, "wb") as f_adapter:
        f_adapter.write(ADAPTER_MAGIC + _u32(FORMAT_VERSION))
        f_adapter.write(_u32(len(config_bytes)) + config_bytes)
        f_adapter.write(fingerprint)
        f_adapter.write(_u32(len(manifest)) + manifest)
        f_adapter.write(blob)
    log_to_stdout(f"Saved adapter with {len(entries)} factors to '{path}'")


def read_adapter_file(path):
    """ Returns (config dict, fingerprint bytes, metadata, tensors) of a fully validated adapter file. """
    with open(path, "rb") as f_adapter:
        reader = _Reader(f_adapter.read(), path)

    reader.header(ADAPTER_MAGIC)
    config_dict = reader.json(reader.u32("config length"), "adapter config")
    fingerprint = reader.take(FINGERPRINT_SIZE, "base model fingerprint")
    manifest = reader.json(reader.u32("manifest length"), "manifest")
    if not isinstance(config_dict, dict) or not isinstance(manifest, dict) or "tensors" not in manifest:
        raise CorruptFileError(f"{path}: header does not describe an adapter")

    tensors = unpack_tensors(manifest["tensors"], reader.rest(), path=path)
    return config_dict, fingerprint, manifest.get("metadata", {}), tensors
