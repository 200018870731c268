"""Small classifier models built on the tape ops.

Batches travel row-major through the network, (N, ...) like the datasets;
the loss side transposes to the column-major (d x m) convention at the
boundary. Every model's forward returns (logits, backbone), where the
backbone block is the input to the classifier head.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import ValidationError


class Linear:
    """y = x W^T + b with weight (out, in)."""

    def __init__(self, in_dim: int, out_dim: int, rng, dtype=np.float32):
        k = 1.0 / np.sqrt(in_dim)
        self.weight = ad.Tensor(rng.uniform(-k, k, size=(out_dim, in_dim)).astype(dtype), requires_grad=True)
        self.bias = ad.Tensor(np.zeros((1, out_dim), dtype=dtype), requires_grad=True)

    def forward_with_weight(self, x, w) -> ad.Tensor:
        return ad.add(ad.matmul(x, w, transpose_b=True), self.bias)

    def forward(self, x) -> ad.Tensor:
        return self.forward_with_weight(x, self.weight)

    def named_parameters(self, prefix=""):
        return [(f"{prefix}weight", self.weight), (f"{prefix}bias", self.bias)]


class Conv2d:
    """NCHW convolution layer, weight (out_ch, in_ch, k, k)."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng, stride: int = 1,
                 padding: int = 0, dtype=np.float32):
        k = 1.0 / np.sqrt(in_ch * kernel * kernel)
        self.weight = ad.Tensor(
            rng.uniform(-k, k, size=(out_ch, in_ch, kernel, kernel)).astype(dtype),
            requires_grad=True,
        )
        self.bias = ad.Tensor(np.zeros((1, out_ch, 1, 1), dtype=dtype), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def forward_with_weight(self, x, w) -> ad.Tensor:
        return ad.add(ad.conv2d(x, w, stride=self.stride, padding=self.padding), self.bias)

    def forward(self, x) -> ad.Tensor:
        return self.forward_with_weight(x, self.weight)

    def named_parameters(self, prefix=""):
        return [(f"{prefix}weight", self.weight), (f"{prefix}bias", self.bias)]


class Affine:
    """Per-channel scale and shift (a light stand-in for normalization)."""

    def __init__(self, channels: int, dtype=np.float32):
        self.gamma = ad.Tensor(np.ones((1, channels, 1, 1), dtype=dtype), requires_grad=True)
        self.beta = ad.Tensor(np.zeros((1, channels, 1, 1), dtype=dtype), requires_grad=True)

    def forward(self, x) -> ad.Tensor:
        return ad.add(ad.mul(x, self.gamma), self.beta)

    def named_parameters(self, prefix=""):
        return [(f"{prefix}gamma", self.gamma), (f"{prefix}beta", self.beta)]


def _layer_forward(layer, x):
    # plain layers and quantized wrappers share this call shape
    return layer.forward(x)


class MLP:
    """relu MLP; dims = (in, hidden..., classes). Backbone is the last
    hidden activation."""

    kind = "mlp"

    def __init__(self, dims, rng):
        dims = tuple(int(d) for d in dims)
        if len(dims) < 2:
            raise ValidationError(f"mlp needs at least (in, out) dims, got {dims}")
        self.dims = dims
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    @property
    def backbone_dim(self) -> int:
        return self.dims[-2]

    @property
    def classes(self) -> int:
        return self.dims[-1]

    def forward(self, x):
        h = ad.as_tensor(x)
        if h.values.ndim != 2:
            h = ad.reshape(h, (h.values.shape[0], -1))
        for layer in self.layers[:-1]:
            h = ad.relu(_layer_forward(layer, h))
        logits = _layer_forward(self.layers[-1], h)
        return logits, h

    def weighted_layers(self):
        return list(enumerate(self.layers))

    def replace_layer(self, i, wrapped):
        self.layers[i] = wrapped


class SmallCNN:
    """Stride-2 conv blocks with affine + relu, global average pool, linear
    head. channels counts the conv outputs, e.g. (8, 16)."""

    kind = "smallcnn"

    def __init__(self, in_shape, channels, classes: int, rng):
        in_ch = int(in_shape[0])
        self.in_shape = tuple(int(s) for s in in_shape)
        self.channels = tuple(int(c) for c in channels)
        if not self.channels:
            raise ValidationError("smallcnn needs at least one conv block")
        self._classes = int(classes)
        self.convs = []
        self.affines = []
        prev = in_ch
        for c in self.channels:
            self.convs.append(Conv2d(prev, c, kernel=3, rng=rng, stride=2, padding=1))
            self.affines.append(Affine(c))
            prev = c
        self.head = Linear(prev, classes, rng)

    @property
    def backbone_dim(self) -> int:
        return self.channels[-1]

    @property
    def classes(self) -> int:
        return self._classes

    def forward(self, x):
        h = ad.as_tensor(x)
        if h.values.ndim != 4:
            raise ValidationError(f"smallcnn expects NCHW input, got shape {h.values.shape}")
        for conv, aff in zip(self.convs, self.affines):
            h = ad.relu(aff.forward(_layer_forward(conv, h)))
        pooled = ad.reduce_mean(h, axis=(2, 3))  # (N, C)
        logits = _layer_forward(self.head, pooled)
        return logits, pooled

    def weighted_layers(self):
        out = list(enumerate(self.convs))
        out.append((len(self.convs), self.head))
        return out

    def replace_layer(self, i, wrapped):
        if i < len(self.convs):
            self.convs[i] = wrapped
        else:
            self.head = wrapped


def named_parameters(model) -> list:
    """(name, Tensor) pairs for every trainable array in the model,
    quantizer wrappers included (their inner layer's params)."""
    out = []
    if model.kind == "mlp":
        groups = [("layer", model.layers)]
    else:
        groups = [("conv", model.convs), ("affine", model.affines), ("head", [model.head])]
    for tag, layers in groups:
        for i, layer in enumerate(layers):
            inner = layer.inner if hasattr(layer, "inner") else layer
            out.extend(inner.named_parameters(prefix=f"{tag}{i}."))
    return out


def parameter_sites(model) -> list:
    """(name, owner, attr) triples locating every trainable tensor, in the
    same order as named_parameters. Lets a caller temporarily substitute
    graph-connected replacements (e.g. slices of one flat vector)."""
    out = []
    if model.kind == "mlp":
        groups = [("layer", model.layers)]
    else:
        groups = [("conv", model.convs), ("affine", model.affines), ("head", [model.head])]
    for tag, layers in groups:
        for i, layer in enumerate(layers):
            inner = layer.inner if hasattr(layer, "inner") else layer
            for attr in ("weight", "bias", "gamma", "beta"):
                if hasattr(inner, attr):
                    out.append((f"{tag}{i}.{attr}", inner, attr))
    return out


def named_quantizers(model) -> list:
    """(name, TensorQuantizer) pairs over all wrapped layers."""
    out = []
    if model.kind == "mlp":
        candidates = [(f"layer{i}", l) for i, l in enumerate(model.layers)]
    else:
        candidates = [(f"conv{i}", l) for i, l in enumerate(model.convs)]
        candidates.append(("head", model.head))
    for name, layer in candidates:
        if hasattr(layer, "quantizers"):
            for kind, q in layer.quantizers():
                out.append((f"{name}.{kind}", q))
    return out


def build_model(spec: dict, in_shape, classes: int, rng):
    """spec: {"kind": "mlp", "dims": [...]} or {"kind": "smallcnn",
    "channels": [...]}. in_shape is the per-sample shape."""
    kind = spec.get("kind")
    if kind == "mlp":
        dims = spec.get("dims")
        if not dims:
            flat = int(np.prod(in_shape))
            dims = [flat, max(16, flat), classes]
        else:
            dims = list(dims)
            expected = int(np.prod(in_shape))
            if dims[0] != expected:
                raise ValidationError(f"mlp input dim {dims[0]} does not match data dim {expected}")
            if dims[-1] != classes:
                raise ValidationError(f"mlp output dim {dims[-1]} does not match {classes} classes")
        return MLP(dims, rng)
    if kind == "smallcnn":
        if len(in_shape) != 3:
            raise ValidationError(f"smallcnn needs CHW data, got sample shape {in_shape}")
        channels = spec.get("channels") or [8, 16]
        return SmallCNN(in_shape, channels, classes, rng)
    raise ValidationError(f"unknown model kind {spec.get('kind')!r}")
