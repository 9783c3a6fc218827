"""Cycle and memory model of the streaming custom accelerator.

Timing model:

* a convolution block reads one context element per clock, one channel after
  another for each output position; every filter consumes the same stream in
  parallel, so ``cycles = positions * k_h * k_w * in_channels``;
* a dense block reads one input per clock together with the weight word that
  holds that input's weight for every neuron, so ``cycles = inputs``;
* max-pool, batch norm and activation stream behind the convolution and cost
  nothing extra; pipeline fill/flush and host transfers are not counted.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .bitcore import hamming_tree_stages, pack_bits, xnor_dot_many
from .engine import as_affine, _check_image, _check_bundle
from .netspec import LayerKind, LayerSpec, NetworkSpec, SpecError, validate_network

BRAM_BITS = 16384
INPUT_PIXEL_BITS = 8


class CapacityError(ValueError):
    pass


@dataclass(frozen=True)
class ClockConfig:
    frequency_hz: float = 1.0e8

    def __post_init__(self):
        if not self.frequency_hz > 0:
            raise ValueError("clock frequency must be positive")


@dataclass(frozen=True)
class MemoryStore:
    role: str  # "input_channel", "feature_channel", "dense_weights", "dense_output"
    layer: str
    index: int
    width_bits: int
    depth_words: int

    @property
    def bits(self) -> int:
        return self.width_bits * self.depth_words

    @property
    def is_channel_store(self) -> bool:
        return self.role in ("input_channel", "feature_channel")


@dataclass(frozen=True)
class MemoryMap:
    stores: tuple[MemoryStore, ...]

    def by_role(self, role: str) -> list[MemoryStore]:
        return [s for s in self.stores if s.role == role]

    def for_layer(self, layer: str) -> list[MemoryStore]:
        return [s for s in self.stores if s.layer == layer]

    @property
    def total_bits(self) -> int:
        return sum(s.bits for s in self.stores)

    def summary(self) -> dict:
        groups = {}
        for s in self.stores:
            key = (s.role, s.layer)
            g = groups.setdefault(key, {"role": s.role, "layer": s.layer, "count": 0,
                                        "width_bits": s.width_bits, "depth_words": s.depth_words,
                                        "bits_each": s.bits})
            g["count"] += 1
        return {
            "capacity_bits_per_channel_store": BRAM_BITS,
            "total_bits": self.total_bits,
            "stores": list(groups.values()),
        }


@dataclass(frozen=True)
class LayerCycles:
    name: str
    kind: str
    cycles: int
    pipeline_latency: int = 0  # informative; not part of the total


@dataclass(frozen=True)
class CycleReport:
    layers: tuple[LayerCycles, ...]
    frequency_hz: float
    memory: MemoryMap = field(default=None, compare=False)

    @property
    def total_cycles(self) -> int:
        return sum(l.cycles for l in self.layers)

    @property
    def fps(self) -> float:
        return self.frequency_hz / self.total_cycles

    def to_dict(self) -> dict:
        return {
            "frequency_hz": self.frequency_hz,
            "total_cycles": self.total_cycles,
            "fps": self.fps,
            "layers": [asdict(l) for l in self.layers],
            "memory_map": self.memory.summary() if self.memory is not None else None,
        }


def context_read_order(layer: LayerSpec, followed_by_pool: bool) -> list[tuple[int, int]]:
    """Output positions in the order the convolution block visits them.

    With a following 2x2 pool the positions of each pooling window come out
    back to back, so pooling needs no frame buffer.
    """
    if not layer.kind.is_conv:
        raise SpecError(f"{layer.name}: context order is defined for convolutions only")
    oh, ow, _ = layer.out_shape
    if not followed_by_pool:
        return [(r, c) for r in range(oh) for c in range(ow)]
    if oh % 2 or ow % 2:
        raise SpecError(f"{layer.name}: odd output {oh}x{ow} cannot feed a 2x2 pool")
    order = []
    for i in range(oh // 2):
        for j in range(ow // 2):
            r, c = 2 * i, 2 * j
            order += [(r, c), (r, c + 1), (r + 1, c), (r + 1, c + 1)]
    return order


def conv_block_cycles(layer: LayerSpec) -> int:
    kh, kw, _ = layer.kernel
    return layer.output_positions * kh * kw * layer.in_shape[2]


def dense_block_cycles(layer: LayerSpec) -> int:
    return layer.in_size


def pipeline_latency(layer: LayerSpec) -> int:
    if layer.kind is LayerKind.CONV_BINARY:
        kh, kw, _ = layer.kernel
        return 1 + hamming_tree_stages(kh * kw) + 1  # XNOR, popcount tree, 2P - N
    return 1


def memory_map(spec: NetworkSpec) -> MemoryMap:
    """Logical block-RAM stores; raises :class:`CapacityError` on overflow."""
    stores = []
    h, w, c = spec.input_shape
    stores += [MemoryStore("input_channel", "input", i, INPUT_PIXEL_BITS, h * w) for i in range(c)]
    for i, layer in enumerate(spec.layers):
        if layer.kind.is_conv:
            oh, ow, oc = layer.out_shape
            if spec.followed_by_pool(i):
                oh, ow = oh // 2, ow // 2
            stores += [MemoryStore("feature_channel", layer.name, k, 1, oh * ow) for k in range(oc)]
        elif layer.kind is LayerKind.DENSE:
            stores.append(MemoryStore("dense_weights", layer.name, 0, layer.out_channels, layer.in_size))
            if layer.has_activation:
                stores.append(MemoryStore("dense_output", layer.name, 0, 1, layer.out_channels))
    for s in stores:
        if s.is_channel_store and s.bits > BRAM_BITS:
            raise CapacityError(
                f"{s.layer}: channel store of {s.bits} bits exceeds the {BRAM_BITS}-bit block RAM")
    return MemoryMap(tuple(stores))


def simulate(spec: NetworkSpec, clock: ClockConfig = ClockConfig()) -> CycleReport:
    validate_network(spec)
    rows = []
    for layer in spec.layers:
        if layer.kind.is_conv:
            rows.append(LayerCycles(layer.name, layer.kind.value, conv_block_cycles(layer),
                                    pipeline_latency(layer)))
        elif layer.kind is LayerKind.DENSE:
            rows.append(LayerCycles(layer.name, layer.kind.value, dense_block_cycles(layer),
                                    pipeline_latency(layer)))
        elif layer.kind is LayerKind.MAXPOOL:
            rows.append(LayerCycles(layer.name, layer.kind.value, 0, 0))
        else:  # pragma: no cover - enum is closed
            raise SpecError(f"{layer.name}: unsupported layer kind {layer.kind}")
    return CycleReport(tuple(rows), clock.frequency_hz, memory_map(spec))


# -- functional co-simulation ----------------------------------------------

def _finish_block(values, params, layer):
    """Bias, norm and activation of one output pixel (vector over filters)."""
    pre = values
    norm = as_affine(params.norm) if layer.has_batchnorm else None
    if norm is not None:
        pre = norm.A * pre + norm.B
    return pre


def _conv_stream(layer, params, source, pooled, first):
    """Run one convolution block in read order; return (outputs, cycles).

    ``source`` is the real image (first layer) or a boolean (H, W, C) map.
    """
    kh, kw, f = layer.kernel
    c_in = layer.in_shape[2]
    signs = params.signs()
    taps = kh * kw
    if first:
        per_channel = [signs[:, c].reshape(f, taps).T.astype(np.float64) for c in range(c_in)]
    else:
        per_channel = [pack_bits(signs[:, c].reshape(f, taps) > 0) for c in range(c_in)]
    oh, ow, _ = layer.out_shape
    ph, pw = (oh // 2, ow // 2) if pooled else (oh, ow)
    out = np.empty((ph, pw, f))
    cycles = 0
    group = []
    for r, c in context_read_order(layer, pooled):
        if first:
            acc = np.zeros(f)
        else:
            acc = np.zeros(f, dtype=np.int64)
        for ch in range(c_in):
            window = source[r:r + kh, c:c + kw, ch].reshape(-1)
            cycles += taps
            if first:
                # add/subtract each pixel in read order
                terms = per_channel[ch] * window[:, None]
                acc = np.add.accumulate(np.vstack([acc, terms]), axis=0)[-1]
            else:
                ctx = pack_bits(window[None, :])
                acc += xnor_dot_many(ctx, per_channel[ch], taps)[0]
        value = acc + params.bias
        if pooled:
            group.append(value)
            if len(group) == 4:
                out[r // 2, c // 2] = np.max(np.vstack(group), axis=0)
                group = []
        else:
            out[r, c] = value
    return out, cycles


def _dense_stream(layer, params, in_bits):
    """Serial dense block: one input and one weight word per clock."""
    weight_words = params.signs().T > 0  # (inputs, neurons): word i = weights of input i
    acc = np.zeros(layer.out_channels, dtype=np.int64)
    cycles = 0
    for i, bit in enumerate(in_bits):
        acc += np.where(weight_words[i] == bit, 1, -1)
        cycles += 1
    return acc + params.bias, cycles


def cosimulate(spec: NetworkSpec, bundle, image, clock: ClockConfig = ClockConfig()):
    """Evaluate the network in the accelerator's event order.

    Returns ``(report, scores)``; ``report`` equals :func:`simulate` and the
    cycle count observed while streaming is checked against it.
    """
    report = simulate(spec, clock)
    image = _check_image(spec, image)
    _check_bundle(spec, bundle)
    source = image
    bits_map = None
    scores = None
    cycles = 0
    layers = spec.layers
    for i, layer in enumerate(layers):
        if layer.kind is LayerKind.MAXPOOL:
            continue
        params = bundle.layers[layer.name]
        if layer.kind.is_conv:
            first = layer.kind is LayerKind.CONV_FIRST
            out, n = _conv_stream(layer, params, source if first else bits_map, spec.followed_by_pool(i), first)
        else:
            flat = bits_map.transpose(2, 0, 1).reshape(-1)
            out, n = _dense_stream(layer, params, flat)
            out = out.reshape(1, 1, -1)
        cycles += n
        out = _finish_block(out, params, layer)
        if layer.has_activation:
            bits_map = out >= 0
        else:
            scores = out.reshape(-1)
    if cycles != report.total_cycles:  # pragma: no cover - schedule is data independent
        raise AssertionError(f"streamed {cycles} cycles, model says {report.total_cycles}")
    return report, scores
