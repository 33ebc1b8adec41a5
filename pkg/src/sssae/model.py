"""Single-layer semi-supervised sparse autoencoder: parameters and forward paths.

The encoder output ``z`` feeds two heads in parallel: a tanh decoder that
reconstructs the input and a softmax classifier over phone classes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .tensor import DTYPE, STREAM_INIT, ShapeError, affine, make_rng, softmax, tanh_map, uniform_init

CHECKPOINT_MAGIC = b"SSAE"
CHECKPOINT_VERSION = 1
PARAM_NAMES = ("W_E", "b_E", "W_D", "b_D", "W_C", "b_C")


@dataclass(frozen=True)
class ModelShape:
    input_dim: int
    hidden_dim: int
    num_classes: int

    def __post_init__(self):
        for name in ("input_dim", "hidden_dim", "num_classes"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")

    @property
    def overcomplete(self) -> bool:
        return self.hidden_dim >= self.input_dim

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        i, h, c = self.input_dim, self.hidden_dim, self.num_classes
        return {
            "W_E": (h, i),
            "b_E": (h,),
            "W_D": (i, h),
            "b_D": (i,),
            "W_C": (c, h),
            "b_C": (c,),
        }


@dataclass
class ModelParams:
    """The six learnable arrays.  Also used as the container for gradients."""

    W_E: np.ndarray
    b_E: np.ndarray
    W_D: np.ndarray
    b_D: np.ndarray
    W_C: np.ndarray
    b_C: np.ndarray

    def __post_init__(self):
        shape = self.shape
        for name, expected in shape.param_shapes().items():
            arr = getattr(self, name)
            if arr.shape != expected:
                raise ShapeError(f"{name} has shape {arr.shape}, expected {expected}")

    @property
    def shape(self) -> ModelShape:
        hidden, input_dim = self.W_E.shape
        return ModelShape(input_dim, hidden, self.W_C.shape[0])

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, f.name) for f in fields(self)]

    def items(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self)]

    def copy(self) -> "ModelParams":
        return ModelParams(*(a.copy() for a in self.arrays()))

    @classmethod
    def zeros(cls, shape: ModelShape) -> "ModelParams":
        return cls(**{k: np.zeros(s, dtype=DTYPE) for k, s in shape.param_shapes().items()})

    def equals(self, other: "ModelParams") -> bool:
        """Bitwise equality of every array."""
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.arrays(), other.arrays())
        )


def glorot_scale(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(shape: ModelShape, seed: int) -> ModelParams:
    """Uniform Glorot-range weights, zero biases."""
    rng = make_rng(seed, STREAM_INIT)
    i, h, c = shape.input_dim, shape.hidden_dim, shape.num_classes
    W_E = uniform_init(rng, h, i, glorot_scale(i, h))
    W_D = uniform_init(rng, i, h, glorot_scale(h, i))
    W_C = uniform_init(rng, c, h, glorot_scale(h, c))
    return ModelParams(
        W_E=W_E,
        b_E=np.zeros(h, dtype=DTYPE),
        W_D=W_D,
        b_D=np.zeros(i, dtype=DTYPE),
        W_C=W_C,
        b_C=np.zeros(c, dtype=DTYPE),
    )


def encode(params: ModelParams, x: np.ndarray) -> np.ndarray:
    return tanh_map(affine(x, params.W_E, params.b_E))


def decode(params: ModelParams, z: np.ndarray) -> np.ndarray:
    return tanh_map(affine(z, params.W_D, params.b_D))


def classify(params: ModelParams, z: np.ndarray) -> np.ndarray:
    return softmax(affine(z, params.W_C, params.b_C))


@dataclass
class ForwardCache:
    """Activations for one example or a batch of rows.

    ``h`` is None when the classifier path was skipped.
    """

    x_corrupted: np.ndarray
    z: np.ndarray
    x_hat: np.ndarray
    h: np.ndarray | None


def forward(params: ModelParams, x_corrupted: np.ndarray, with_classifier: bool = True) -> ForwardCache:
    z = encode(params, x_corrupted)
    x_hat = decode(params, z)
    h = classify(params, z) if with_classifier else None
    return ForwardCache(x_corrupted=x_corrupted, z=z, x_hat=x_hat, h=h)


# Checkpoint layout (little-endian):
#   4s magic "SSAE" | B version | 3 x Q (input_dim, hidden_dim, num_classes)
#   then W_E, b_E, W_D, b_D, W_C, b_C as float64, row-major
_HEADER = struct.Struct("<4sBQQQ")


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    shape = params.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                              shape.input_dim, shape.hidden_dim, shape.num_classes))
        for arr in params.arrays():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> ModelParams:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated checkpoint header")
    magic, version, i, h, c = _HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    shape = ModelShape(i, h, c)
    offset = _HEADER.size
    arrays = {}
    for name, dims in shape.param_shapes().items():
        count = int(np.prod(dims))
        end = offset + 8 * count
        if end > len(raw):
            raise ValueError(f"{path}: truncated while reading {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).astype(DTYPE).reshape(dims)
        offset = end
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return ModelParams(**arrays)
