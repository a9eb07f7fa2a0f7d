"""Convolution layer container and the checkpoint container."""

import json
import struct
from pathlib import Path

import numpy as np

from .data import atomic_write
from .diffcore import Tensor, conv1d, relu
from .errors import FormatError, InvalidArgument

CHECKPOINT_MAGIC = b"WTALCK1\n"


class Conv:
    def __init__(self, weight, bias, stride=1, padding=0):
        self.weight = weight
        self.bias = bias
        self.stride = stride
        self.padding = padding

    @classmethod
    def init(cls, rng, c_in, c_out, k, stride=1, padding=None, name="conv"):
        # uniform(+-1/sqrt(fan_in)) for weights and bias
        bound = 1.0 / np.sqrt(c_in * k)
        w = Tensor(rng.uniform(-bound, bound, size=(c_out, c_in, k)), requires_grad=True, name=f"{name}.weight")
        b = Tensor(rng.uniform(-bound, bound, size=c_out), requires_grad=True, name=f"{name}.bias")
        return cls(w, b, stride, (k - 1) // 2 if padding is None else padding)

    def __call__(self, x):
        return conv1d(x, self.weight, self.bias, self.stride, self.padding)

    def params(self):
        return [self.weight, self.bias]


def conv_stack(x, layers):
    """Apply ``layers`` with ReLU between them and a linear last layer."""
    for layer in layers[:-1]:
        x = relu(layer(x))
    return layers[-1](x)


def zero_params(params):
    for p in params:
        p.data = np.zeros(p.shape)
        p.data.flags.writeable = False


def encode_checkpoint(params, config):
    names = [p.name for p in params]
    if len(set(names)) != len(names) or None in names:
        raise InvalidArgument("checkpoint parameters need unique names")
    header = json.dumps({
        "config": config,
        "params": [{"name": p.name, "shape": list(p.shape)} for p in params],
    }, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for p in params)
    return CHECKPOINT_MAGIC + struct.pack("<I", len(header)) + header + body


def save_checkpoint(path, params, config):
    atomic_write(path, encode_checkpoint(params, config))


def read_checkpoint(path):
    """Return ``(config, {name: array})`` from a checkpoint file."""
    blob = Path(path).read_bytes()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise FormatError("bad checkpoint magic", 0)
    pos = len(CHECKPOINT_MAGIC)
    if len(blob) < pos + 4:
        raise FormatError("truncated checkpoint header", len(blob))
    (n,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    try:
        header = json.loads(blob[pos:pos + n])
    except ValueError:
        raise FormatError("unreadable checkpoint header", pos) from None
    pos += n
    arrays = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        size = 8 * int(np.prod(shape))
        if len(blob) < pos + size:
            raise FormatError(f"truncated payload for {entry['name']}", len(blob))
        arrays[entry["name"]] = np.frombuffer(blob, dtype="<f8", count=size // 8, offset=pos).reshape(shape).copy()
        pos += size
    if pos != len(blob):
        raise FormatError("trailing bytes after checkpoint payload", pos)
    return header["config"], arrays


def assign_params(params, arrays):
    for p in params:
        if p.name not in arrays:
            raise InvalidArgument(f"checkpoint has no parameter {p.name}")
        if arrays[p.name].shape != p.shape:
            raise InvalidArgument(f"{p.name}: checkpoint shape {arrays[p.name].shape} != {p.shape}")
        p.data = arrays[p.name]
        p.data.flags.writeable = False
