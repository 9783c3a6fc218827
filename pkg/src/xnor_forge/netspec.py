"""Network architecture description, shape inference and the built-in networks.

JSON format (field names are stable)::

    {
      "name": "custom",
      "input_range": "symmetric_unit" | "unit_interval",
      "num_classes": 43,
      "layers": [
        {"name": "Conv-1", "kind": "conv_first", "in_shape": [32, 32, 3],
         "out_shape": [28, 28, 64], "kernel": [5, 5, 64],
         "has_batchnorm": true, "has_activation": true},
        {"name": "Max-1", "kind": "maxpool2x2", ...},
        ...
      ]
    }

``kind`` is one of ``conv_first``, ``conv_binary``, ``maxpool2x2``, ``dense``.
``kernel`` is ``[k_h, k_w, filters]`` for convolutions and omitted (or null)
otherwise. Shapes are ``[height, width, channels]``; a dense layer's
``out_shape`` is ``[1, 1, neurons]``.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from math import prod
from typing import Optional


class SpecError(ValueError):
    """Raised when a network description is inconsistent.

    ``errors`` holds one message per violated invariant.
    """

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class LayerKind(str, enum.Enum):
    CONV_FIRST = "conv_first"
    CONV_BINARY = "conv_binary"
    MAXPOOL = "maxpool2x2"
    DENSE = "dense"

    @property
    def is_conv(self) -> bool:
        return self in (LayerKind.CONV_FIRST, LayerKind.CONV_BINARY)

    @property
    def has_weights(self) -> bool:
        return self is not LayerKind.MAXPOOL


class InputRange(str, enum.Enum):
    SYMMETRIC_UNIT = "symmetric_unit"  # [-1, 1]
    UNIT_INTERVAL = "unit_interval"  # [0, 1]

    @property
    def bounds(self) -> tuple[float, float]:
        return (-1.0, 1.0) if self is InputRange.SYMMETRIC_UNIT else (0.0, 1.0)


Shape = tuple[int, int, int]


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: LayerKind
    in_shape: Shape
    out_shape: Shape
    kernel: Optional[tuple[int, int, int]] = None
    has_batchnorm: bool = True
    has_activation: bool = True

    @property
    def in_size(self) -> int:
        return prod(self.in_shape)

    @property
    def out_size(self) -> int:
        return prod(self.out_shape)

    @property
    def out_channels(self) -> int:
        return self.out_shape[2]

    @property
    def window_size(self) -> int:
        """Elements in one dot product: ``k_h*k_w*in_c`` (conv) or inputs (dense)."""
        if self.kind.is_conv:
            kh, kw, _ = self.kernel
            return kh * kw * self.in_shape[2]
        if self.kind is LayerKind.DENSE:
            return self.in_size
        return 0

    @property
    def output_positions(self) -> int:
        return self.out_shape[0] * self.out_shape[1]

    @property
    def mac_count(self) -> int:
        if self.kind is LayerKind.MAXPOOL:
            return 0
        return self.output_positions * self.out_channels * self.window_size

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind.value,
            "in_shape": list(self.in_shape),
            "out_shape": list(self.out_shape),
            "kernel": list(self.kernel) if self.kernel is not None else None,
            "has_batchnorm": self.has_batchnorm,
            "has_activation": self.has_activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        try:
            kernel = d.get("kernel")
            return cls(
                name=str(d["name"]),
                kind=LayerKind(d["kind"]),
                in_shape=tuple(int(x) for x in d["in_shape"]),
                out_shape=tuple(int(x) for x in d["out_shape"]),
                kernel=tuple(int(x) for x in kernel) if kernel is not None else None,
                has_batchnorm=bool(d.get("has_batchnorm", True)),
                has_activation=bool(d.get("has_activation", True)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SpecError(f"malformed layer entry {d!r}: {exc}") from None


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    input_range: InputRange = InputRange.SYMMETRIC_UNIT
    num_classes: int = 43

    @property
    def input_shape(self) -> Shape:
        return self.layers[0].in_shape

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def weighted_layers(self) -> list[tuple[int, LayerSpec]]:
        return [(i, l) for i, l in enumerate(self.layers) if l.kind.has_weights]

    def followed_by_pool(self, index: int) -> bool:
        nxt = index + 1
        return nxt < len(self.layers) and self.layers[nxt].kind is LayerKind.MAXPOOL

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_range": self.input_range.value,
            "num_classes": self.num_classes,
            "layers": [l.to_dict() for l in self.layers],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        try:
            return cls(
                name=str(d["name"]),
                layers=tuple(LayerSpec.from_dict(l) for l in d["layers"]),
                input_range=InputRange(d.get("input_range", "symmetric_unit")),
                num_classes=int(d.get("num_classes", 43)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, SpecError):
                raise
            raise SpecError(f"malformed network document: {exc}") from None

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SpecError(f"network document is not JSON: {exc}") from None
        return cls.from_dict(doc)


def layer_output_shape(layer: LayerSpec, in_shape: Shape) -> Shape:
    """Output shape of ``layer`` applied to ``in_shape`` (stride 1, no padding)."""
    in_shape = tuple(in_shape)
    if in_shape != tuple(layer.in_shape):
        raise SpecError(f"{layer.name}: input shape {in_shape} != declared {layer.in_shape}")
    h, w, c = in_shape
    if layer.kind.is_conv:
        if layer.kernel is None:
            raise SpecError(f"{layer.name}: convolution without kernel")
        kh, kw, filters = layer.kernel
        if min(kh, kw, filters) < 1:
            raise SpecError(f"{layer.name}: non-positive kernel {layer.kernel}")
        if kh > h or kw > w:
            raise SpecError(f"{layer.name}: kernel {kh}x{kw} larger than input {h}x{w}")
        return (h - kh + 1, w - kw + 1, filters)
    if layer.kind is LayerKind.MAXPOOL:
        if h % 2 or w % 2:
            raise SpecError(f"{layer.name}: odd spatial size {h}x{w} before 2x2 max-pool")
        return (h // 2, w // 2, c)
    # dense
    return (1, 1, layer.out_shape[2])


@dataclass(frozen=True)
class LayerStats:
    name: str
    flat_in: int
    flat_out: int
    binary_ops: int


@dataclass(frozen=True)
class ValidatedNetwork:
    spec: NetworkSpec
    stats: tuple[LayerStats, ...] = field(default=())

    @property
    def total_ops(self) -> int:
        return sum(s.binary_ops for s in self.stats)


def validate_network(spec: NetworkSpec) -> ValidatedNetwork:
    """Check every shape/chaining invariant; raise :class:`SpecError` listing all."""
    errors = []
    layers = spec.layers
    if not layers:
        raise SpecError("network has no layers")
    if layers[0].kind is not LayerKind.CONV_FIRST:
        errors.append(f"layer 0 ({layers[0].name}): first layer must be conv_first")
    for i, layer in enumerate(layers[1:], start=1):
        if layer.kind is LayerKind.CONV_FIRST:
            errors.append(f"layer {i} ({layer.name}): conv_first only allowed as layer 0")
    last = layers[-1]
    if last.kind is not LayerKind.DENSE:
        errors.append(f"layer {len(layers) - 1} ({last.name}): last layer must be dense")
    elif last.out_shape[2] != spec.num_classes:
        errors.append(
            f"layer {len(layers) - 1} ({last.name}): expected {spec.num_classes} outputs, "
            f"got {last.out_shape[2]}"
        )
    if spec.num_classes < 1:
        errors.append("num_classes must be positive")
    names = [l.name for l in layers]
    if len(set(names)) != len(names):
        errors.append("layer names must be unique")

    for i, layer in enumerate(layers):
        if i > 0 and tuple(layers[i - 1].out_shape) != tuple(layer.in_shape):
            errors.append(
                f"layer {i} ({layer.name}): in_shape {layer.in_shape} does not chain from "
                f"layer {i - 1} out_shape {layers[i - 1].out_shape}"
            )
        if layer.kind.is_conv and layer.kernel is not None and layer.kernel[2] != layer.out_shape[2]:
            errors.append(f"layer {i} ({layer.name}): filters {layer.kernel[2]} != out channels")
        if not layer.kind.is_conv and layer.kernel is not None and layer.kind is LayerKind.MAXPOOL:
            errors.append(f"layer {i} ({layer.name}): max-pool takes no kernel")
        try:
            expected = layer_output_shape(layer, layer.in_shape)
        except SpecError as exc:
            errors.append(f"layer {i}: {exc}")
            continue
        if expected != tuple(layer.out_shape):
            errors.append(
                f"layer {i} ({layer.name}): expected out_shape {expected}, got {layer.out_shape}"
            )
        if layer.kind is LayerKind.MAXPOOL and (layer.has_batchnorm or layer.has_activation):
            errors.append(f"layer {i} ({layer.name}): max-pool carries no norm or activation")
        if layer.kind is LayerKind.MAXPOOL and (i == 0 or not layers[i - 1].kind.is_conv):
            errors.append(f"layer {i} ({layer.name}): max-pool must follow a convolution")
        if layer is not last and layer.kind.has_weights and not layer.has_activation:
            errors.append(f"layer {i} ({layer.name}): only the final layer may skip activation")
    if errors:
        raise SpecError(errors)

    stats = tuple(
        LayerStats(l.name, l.in_size, l.out_size, l.mac_count) for l in layers
    )
    return ValidatedNetwork(spec, stats)


def _conv(name, kind, in_shape, k, filters):
    h, w, _ = in_shape
    return LayerSpec(name, kind, in_shape, (h - k + 1, w - k + 1, filters), (k, k, filters))


def _pool(name, in_shape):
    h, w, c = in_shape
    return LayerSpec(name, LayerKind.MAXPOOL, in_shape, (h // 2, w // 2, c), None, False, False)


def _dense(name, in_shape, out, activation=True):
    return LayerSpec(name, LayerKind.DENSE, in_shape, (1, 1, out), None, True, activation)


def builtin_custom() -> NetworkSpec:
    """The network run on the hand-written accelerator (inputs in [-1, 1])."""
    conv1 = _conv("Conv-1", LayerKind.CONV_FIRST, (32, 32, 3), 5, 64)
    max1 = _pool("Max-1", conv1.out_shape)
    conv2 = _conv("Conv-2", LayerKind.CONV_BINARY, max1.out_shape, 5, 128)
    max2 = _pool("Max-2", conv2.out_shape)
    fc1 = _dense("FC-1", max2.out_shape, 512)
    fc2 = _dense("FC-2", fc1.out_shape, 43, activation=False)
    return NetworkSpec("custom", (conv1, max1, conv2, max2, fc1, fc2), InputRange.SYMMETRIC_UNIT, 43)


def builtin_finn() -> NetworkSpec:
    """The FINN-compatible variant (inputs in [0, 1]).

    Conv-3 is a 5x5 convolution with 512 filters so that the last feature map
    is 1x1x512, which is what FC-1 consumes.
    """
    conv1 = _conv("Conv-1", LayerKind.CONV_FIRST, (32, 32, 3), 5, 64)
    max1 = _pool("Max-1", conv1.out_shape)
    conv2 = _conv("Conv-2", LayerKind.CONV_BINARY, max1.out_shape, 5, 128)
    max2 = _pool("Max-2", conv2.out_shape)
    conv3 = _conv("Conv-3", LayerKind.CONV_BINARY, max2.out_shape, 5, 512)
    fc1 = _dense("FC-1", conv3.out_shape, 43, activation=False)
    return NetworkSpec("finn", (conv1, max1, conv2, max2, conv3, fc1), InputRange.UNIT_INTERVAL, 43)


BUILTINS = {"custom": builtin_custom, "finn": builtin_finn}


def resolve_spec(ref: str) -> NetworkSpec:
    """Resolve ``builtin:custom``, ``builtin:finn`` or a JSON file path."""
    if ref.startswith("builtin:"):
        key = ref.split(":", 1)[1]
        if key not in BUILTINS:
            raise SpecError(f"unknown built-in network {key!r}; choose from {sorted(BUILTINS)}")
        return BUILTINS[key]()
    with open(ref, encoding="utf-8") as fh:
        return NetworkSpec.from_json(fh.read())


def with_layer(spec: NetworkSpec, index: int, **changes) -> NetworkSpec:
    """Copy of ``spec`` with fields of one layer replaced (test helper)."""
    layers = list(spec.layers)
    layers[index] = replace(layers[index], **changes)
    return replace(spec, layers=tuple(layers))
