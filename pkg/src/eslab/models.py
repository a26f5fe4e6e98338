"""Victim, substitute and generator networks built from flat layer tables.

Networks are plain containers: an ordered list of :class:`LayerSpec`, the
per-sample input shape, and named parameter tensors.  The desk-scale model
zoo (``mlp-small``, ``mlp-large``, ``cnn-small``) stands in for the LeNet5 /
ResNet family; only relative model size matters for the experiments.

Checkpoint layout (all integers little-endian)::

    b"ESL1"
    u32 class_count
    u32 input_ndim, u32 * input_ndim
    u32 meta_len, meta_len bytes of UTF-8 JSON
    u32 n_layers, then per layer: u8 kind, u8 n_args, i32 * n_args
    u32 n_params, then per param: u32 name_len, name, u32 ndim, u32 * ndim,
        float64 * prod(shape)
"""

from __future__ import annotations

import contextlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .errors import (
    BuildError,
    CorruptFileError,
    DimensionError,
    DomainError,
    ShapeMismatchError,
    VersionMismatchError,
)
from .tensor import Tensor

LAYER_KINDS = ("dense", "conv2d", "relu", "tanh", "flatten", "maxpool2d")
MAGIC = b"ESL1"


@dataclass(frozen=True)
class LayerSpec:
    """One entry of a layer table.

    ``args`` holds the integer size parameters of the layer:

    * ``dense``: (in_features, out_features)
    * ``conv2d``: (in_channels, out_channels, kernel, stride, padding)
    * ``maxpool2d``: (size,)
    * ``relu``, ``tanh``, ``flatten``: ()
    """

    kind: str
    args: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise BuildError(f"unknown layer kind {self.kind!r}")


def dense(n_in: int, n_out: int) -> LayerSpec:
    return LayerSpec("dense", (n_in, n_out))


def conv(c_in: int, c_out: int, kernel: int, stride: int = 1, padding: int = 0) -> LayerSpec:
    return LayerSpec("conv2d", (c_in, c_out, kernel, stride, padding))


def maxpool(size: int = 2) -> LayerSpec:
    return LayerSpec("maxpool2d", (size,))


RELU = LayerSpec("relu")
TANH = LayerSpec("tanh")
FLATTEN = LayerSpec("flatten")


def infer_shapes(layers: Sequence[LayerSpec], input_shape: Sequence[int]) -> list[tuple[int, ...]]:
    """Propagate a per-sample shape through ``layers``; raises BuildError on mismatch."""
    shape = tuple(int(s) for s in input_shape)
    if not shape or any(s <= 0 for s in shape):
        raise BuildError(f"invalid input shape {input_shape}")
    shapes = [shape]
    for i, layer in enumerate(layers):
        if layer.kind == "dense":
            n_in, n_out = layer.args
            if len(shape) != 1 or shape[0] != n_in:
                raise BuildError(f"layer {i}: dense expects ({n_in},) input, got {shape}")
            shape = (n_out,)
        elif layer.kind == "conv2d":
            c_in, c_out, k, stride, pad = layer.args
            if len(shape) != 3 or shape[0] != c_in:
                raise BuildError(f"layer {i}: conv2d expects {c_in} channels, got {shape}")
            if stride < 1 or k > shape[1] + 2 * pad or k > shape[2] + 2 * pad:
                raise BuildError(f"layer {i}: kernel {k} does not fit input {shape} with padding {pad}")
            shape = (c_out, (shape[1] + 2 * pad - k) // stride + 1, (shape[2] + 2 * pad - k) // stride + 1)
        elif layer.kind == "maxpool2d":
            (size,) = layer.args
            if len(shape) != 3 or shape[1] < size or shape[2] < size:
                raise BuildError(f"layer {i}: maxpool2d({size}) does not fit input {shape}")
            shape = (shape[0], shape[1] // size, shape[2] // size)
        elif layer.kind == "flatten":
            shape = (int(np.prod(shape)),)
        shapes.append(shape)
    if len(shape) != 1:
        raise BuildError(f"network must end in a vector output, got {shape}")
    return shapes


@dataclass
class Network:
    """A feed-forward network. Logits come out of :meth:`forward` with shape ``[n, class_count]``."""

    layers: list[LayerSpec]
    input_shape: tuple[int, ...]
    params: dict[str, Tensor]
    meta: dict = field(default_factory=dict)

    @property
    def class_count(self) -> int:
        return infer_shapes(self.layers, self.input_shape)[-1][0]

    @property
    def input_size(self) -> int:
        return int(np.prod(self.input_shape))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> Network:
        return Network(
            list(self.layers),
            tuple(self.input_shape),
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()},
            dict(self.meta),
        )

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data[...] = v

    @contextlib.contextmanager
    def frozen(self) -> Iterator[Network]:
        """Temporarily stop gradients from reaching this network's parameters."""
        saved = {k: p.requires_grad for k, p in self.params.items()}
        for p in self.params.values():
            p.requires_grad = False
        try:
            yield self
        finally:
            for k, p in self.params.items():
                p.requires_grad = saved[k]

    def _prepare(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim < 2:
            raise DimensionError(f"expected a batch of inputs, got shape {x.shape}")
        if x.shape[1:] != self.input_shape:
            if int(np.prod(x.shape[1:])) != self.input_size:
                raise DimensionError(f"input shape {x.shape[1:]} does not match network input {self.input_shape}")
            x = x.reshape((x.shape[0],) + self.input_shape)
        return x

    def _run(self, x: Tensor, stop: int) -> Tensor:
        for i, layer in enumerate(self.layers[:stop]):
            kind = layer.kind
            if kind == "dense":
                x = T.matmul(x, self.params[f"{i}.weight"]) + self.params[f"{i}.bias"]
            elif kind == "conv2d":
                _, c_out, _, stride, pad = layer.args
                x = T.conv2d(x, self.params[f"{i}.weight"], stride=stride, padding=pad)
                x = x + self.params[f"{i}.bias"].reshape(1, c_out, 1, 1)
            elif kind == "relu":
                x = T.relu(x)
            elif kind == "tanh":
                x = T.tanh(x)
            elif kind == "flatten":
                x = T.flatten(x)
            elif kind == "maxpool2d":
                x = T.maxpool2d(x, layer.args[0])
        return x

    def forward(self, x) -> Tensor:
        return self._run(self._prepare(x), len(self.layers))

    __call__ = forward

    def feature_layer(self) -> int:
        """Index of the last dense layer; its input is the feature tap."""
        for i in range(len(self.layers) - 1, -1, -1):
            if self.layers[i].kind == "dense":
                return i
        raise BuildError("network has no dense layer to tap features before")

    def features(self, x) -> Tensor:
        """Activations entering the last dense layer, flattened to ``[n, d]``."""
        out = self._run(self._prepare(x), self.feature_layer())
        return T.flatten(out) if out.ndim > 2 else out

    def predict_proba(self, x, batch_size: int = 4096) -> np.ndarray:
        x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
        out = []
        with T.no_grad():
            for start in range(0, len(x), batch_size):
                out.append(T.softmax(self.forward(x[start : start + batch_size]).data))
        return np.concatenate(out) if out else np.zeros((0, self.class_count))

    def predict(self, x) -> np.ndarray:
        return argmax_rows(self.predict_proba(x))


def argmax_rows(p: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties resolve to the lowest index."""
    return np.argmax(p, axis=1)


def build_network(layers: Sequence[LayerSpec], input_shape: Sequence[int], seed: int) -> Network:
    """Validate ``layers`` against ``input_shape`` and initialise parameters.

    Weights are fan-in scaled uniform (Kaiming): ``U(-b, b)`` with
    ``b = sqrt(6 / fan_in)``; biases start at zero.
    """
    layers = list(layers)
    infer_shapes(layers, input_shape)
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for i, layer in enumerate(layers):
        if layer.kind == "dense":
            n_in, n_out = layer.args
            bound = np.sqrt(6.0 / n_in)
            params[f"{i}.weight"] = Tensor(rng.uniform(-bound, bound, (n_in, n_out)), requires_grad=True)
            params[f"{i}.bias"] = Tensor(np.zeros(n_out), requires_grad=True)
        elif layer.kind == "conv2d":
            c_in, c_out, k, _, _ = layer.args
            bound = np.sqrt(6.0 / (c_in * k * k))
            params[f"{i}.weight"] = Tensor(rng.uniform(-bound, bound, (c_out, c_in, k, k)), requires_grad=True)
            params[f"{i}.bias"] = Tensor(np.zeros(c_out), requires_grad=True)
    return Network(layers, tuple(int(s) for s in input_shape), params)


# -- model zoo -------------------------------------------------------------------

ARCHITECTURES = ("mlp-small", "mlp-large", "cnn-small", "linear")


def architecture(name: str, input_shape: Sequence[int], class_count: int) -> list[LayerSpec]:
    """Layer table for a named desk-scale architecture."""
    input_shape = tuple(input_shape)
    d = int(np.prod(input_shape))
    prefix = [FLATTEN] if len(input_shape) > 1 else []
    if name == "linear":
        return prefix + [dense(d, class_count)]
    if name == "mlp-small":
        return prefix + [dense(d, 64), RELU, dense(64, 64), RELU, dense(64, class_count)]
    if name == "mlp-large":
        return prefix + [dense(d, 256), RELU, dense(256, 256), RELU, dense(256, class_count)]
    if name == "cnn-small":
        if len(input_shape) != 3:
            raise BuildError("cnn-small needs image-shaped input (c, h, w)")
        c, h, w = input_shape
        flat = 16 * (h // 4) * (w // 4)
        return [
            conv(c, 8, 3, 1, 1), RELU, maxpool(2),
            conv(8, 16, 3, 1, 1), RELU, maxpool(2),
            FLATTEN, dense(flat, 64), RELU, dense(64, class_count),
        ]
    raise BuildError(f"unknown architecture {name!r}; choose from {ARCHITECTURES}")


def build_model(name: str, input_shape: Sequence[int], class_count: int, seed: int) -> Network:
    net = build_network(architecture(name, input_shape, class_count), input_shape, seed)
    net.meta["arch"] = name
    return net


# -- conditional generator -------------------------------------------------------


@dataclass
class GeneratorNetwork:
    """Conditional generator ``G(z, l)``: concatenated ``[z ; one-hot l]`` in, tanh-bounded sample out."""

    latent_dim: int
    class_count: int
    output_shape: tuple[int, ...]
    net: Network

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()


def build_generator(latent_dim: int, class_count: int, output_shape: Sequence[int],
                    seed: int, hidden: int = 128) -> GeneratorNetwork:
    output_shape = tuple(int(s) for s in output_shape)
    out_dim = int(np.prod(output_shape))
    layers = [dense(latent_dim + class_count, hidden), RELU, dense(hidden, out_dim), TANH]
    net = build_network(layers, (latent_dim + class_count,), seed)
    net.meta.update(kind="generator", latent_dim=latent_dim, generator_classes=class_count,
                    output_shape=list(output_shape))
    return GeneratorNetwork(latent_dim, class_count, output_shape, net)


def generate(g: GeneratorNetwork, z, labels) -> Tensor:
    """Run the generator on latent rows ``z`` conditioned on one-hot ``labels``."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    lab = labels.data if isinstance(labels, Tensor) else np.asarray(labels, dtype=np.float64)
    if lab.ndim != 2 or lab.shape[1] != g.class_count:
        raise DomainError(f"labels must be [n, {g.class_count}] one-hot rows, got {lab.shape}")
    if not (np.isin(lab, (0.0, 1.0)).all() and (lab.sum(axis=1) == 1).all()):
        raise DomainError("labels must be one-hot rows")
    if z.ndim != 2 or z.shape[1] != g.latent_dim or z.shape[0] != lab.shape[0]:
        raise DimensionError(f"latent batch {z.shape} does not match labels {lab.shape} / latent_dim {g.latent_dim}")
    out = g.net.forward(T.concat([z, Tensor(lab)], axis=1))
    return out.reshape((out.shape[0],) + g.output_shape)


def one_hot(labels: np.ndarray, class_count: int) -> np.ndarray:
    out = np.zeros((len(labels), class_count))
    out[np.arange(len(labels)), labels] = 1.0
    return out


# -- checkpoints -----------------------------------------------------------------

_KIND_CODES = {k: i for i, k in enumerate(LAYER_KINDS)}


def _checkpoint_bytes(net: Network) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", net.class_count))
    buf.write(struct.pack("<I", len(net.input_shape)))
    buf.write(struct.pack(f"<{len(net.input_shape)}I", *net.input_shape))
    meta = json.dumps(net.meta, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(net.layers)))
    for layer in net.layers:
        buf.write(struct.pack("<BB", _KIND_CODES[layer.kind], len(layer.args)))
        buf.write(struct.pack(f"<{len(layer.args)}i", *layer.args))
    buf.write(struct.pack("<I", len(net.params)))
    for name, p in net.params.items():
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", p.ndim))
        buf.write(struct.pack(f"<{p.ndim}I", *p.shape))
        buf.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(net: Network | GeneratorNetwork, path) -> None:
    if isinstance(net, GeneratorNetwork):
        net = net.net
    Path(path).write_bytes(_checkpoint_bytes(net))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise CorruptFileError("checkpoint is truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _parse_checkpoint(data: bytes) -> Network:
    r = _Reader(data)
    magic = r.take(4) if len(data) >= 4 else b""
    if magic != MAGIC:
        if magic[:3] == MAGIC[:3]:
            raise VersionMismatchError(f"unsupported checkpoint version {magic[3:]!r}")
        raise CorruptFileError("not an eslab checkpoint (bad magic)")
    (class_count,) = r.unpack("<I")
    (ndim,) = r.unpack("<I")
    input_shape = r.unpack(f"<{ndim}I")
    (meta_len,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError("checkpoint metadata is malformed") from exc
    (n_layers,) = r.unpack("<I")
    layers = []
    for _ in range(n_layers):
        code, n_args = r.unpack("<BB")
        if code >= len(LAYER_KINDS):
            raise CorruptFileError(f"unknown layer code {code}")
        layers.append(LayerSpec(LAYER_KINDS[code], tuple(r.unpack(f"<{n_args}i"))))
    (n_params,) = r.unpack("<I")
    params = {}
    for _ in range(n_params):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode()
        (pdim,) = r.unpack("<I")
        shape = r.unpack(f"<{pdim}I")
        count = int(np.prod(shape)) if pdim else 1
        arr = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        params[name] = Tensor(arr, requires_grad=True)
    if r.pos != len(data):
        raise CorruptFileError("trailing bytes after checkpoint payload")
    try:
        net = Network(layers, tuple(input_shape), params, meta)
        if net.class_count != class_count:
            raise CorruptFileError("class count in header disagrees with layer table")
    except BuildError as exc:
        raise CorruptFileError(f"layer table is inconsistent: {exc}") from exc
    reference = build_network(layers, input_shape, seed=0)
    if set(reference.params) != set(params) or any(
        reference.params[k].shape != params[k].shape for k in params
    ):
        raise CorruptFileError("parameter table does not match layer table")
    return net


def load_checkpoint(path, expected: Network | Sequence[LayerSpec] | None = None) -> Network:
    """Read a checkpoint; with ``expected`` given, the architecture must match it exactly."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CorruptFileError(f"cannot read checkpoint {path}: {exc}") from exc
    net = _parse_checkpoint(data)
    if expected is not None:
        layers = expected.layers if isinstance(expected, Network) else list(expected)
        if list(net.layers) != list(layers) or (
            isinstance(expected, Network) and tuple(expected.input_shape) != net.input_shape
        ):
            raise ShapeMismatchError("checkpoint architecture does not match the expected network")
    return net


def load_generator(path) -> GeneratorNetwork:
    net = load_checkpoint(path)
    if net.meta.get("kind") != "generator":
        raise ShapeMismatchError("checkpoint does not hold a generator")
    return GeneratorNetwork(
        int(net.meta["latent_dim"]), int(net.meta["generator_classes"]), tuple(net.meta["output_shape"]), net
    )
