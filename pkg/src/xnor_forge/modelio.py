"""Weight bundles: in-memory form, binary file format, JSON import, test fixtures.

Binary format, version 1 (all integers little-endian)::

    magic        8 bytes   b"XNORNET1"
    version      u16       1
    layer count  u16       number of weighted layers (max-pool layers have none)
    name length  u16, then the network name in UTF-8
    seed         i64       creation seed, -1 when not synthetic
    per layer, in network order:
      kind       u8        1 conv_first, 2 conv_binary, 3 dense
      ndim       u8        4 for conv, 2 for dense
      dims       u32 * ndim   conv: filters, channels, k_h, k_w; dense: outputs, inputs
      weights    u64 * ceil(prod(dims) / 64)
                 one +/-1 bit per weight (+1 is 1), LSB first, in
                 (filter, channel, row, col) or (output, input) order; the
                 stream is continuous across filters and zero-padded at the end
      bias       f64 * outputs
      norm tag   u8        0 none, 1 affine (A, B), 2 batch norm (gamma, beta, mu, sigma)
      norm data  f64 * outputs for each constant
    crc32        u32       CRC-32 of every preceding byte

Dense inputs are indexed channel-planar: ``input = c*H*W + y*W + x``.

The JSON import document (``"format": "xnor-forge-bundle"``, version 1)
carries the same data as nested arrays; see :func:`bundle_from_json`.
"""
from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from math import prod
from typing import Optional, Union

import numpy as np

from .bitcore import n_words, pack_bits, unpack_bits
from .engine import AffineNorm, BatchNormParams, fold_batchnorm
from .netspec import LayerKind, LayerSpec, NetworkSpec

MAGIC = b"XNORNET1"
VERSION = 1
JSON_FORMAT = "xnor-forge-bundle"

_KIND_TAGS = {LayerKind.CONV_FIRST: 1, LayerKind.CONV_BINARY: 2, LayerKind.DENSE: 3}
_TAG_KINDS = {v: k for k, v in _KIND_TAGS.items()}
_NORM_NONE, _NORM_AFFINE, _NORM_BN = 0, 1, 2

Norm = Union[AffineNorm, BatchNormParams, None]


class BundleFormatError(ValueError):
    """Malformed, corrupted or truncated bundle data."""


class BundleMismatchError(ValueError):
    """Bundle does not fit the network description."""


def expected_weight_shape(layer: LayerSpec) -> tuple[int, ...]:
    if layer.kind.is_conv:
        kh, kw, f = layer.kernel
        return (f, layer.in_shape[2], kh, kw)
    return (layer.out_channels, layer.in_size)


@dataclass(frozen=True, eq=False)
class LayerParams:
    """Parameters of one weighted layer.

    ``rows`` holds one packed row per filter/neuron (each row starts on a word
    boundary); ``shape`` is ``(F, C, kh, kw)`` or ``(outputs, inputs)``.
    """

    name: str
    kind: LayerKind
    shape: tuple[int, ...]
    rows: np.ndarray
    bias: np.ndarray
    norm: Norm = None

    def __post_init__(self):
        rows = np.ascontiguousarray(self.rows, dtype=np.uint64)
        expect = (self.shape[0], n_words(self.row_bits))
        if rows.shape != expect:
            raise BundleMismatchError(f"{self.name}: packed rows {rows.shape}, expected {expect}")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "bias", np.asarray(self.bias, dtype=np.float64).reshape(-1))

    @property
    def row_bits(self) -> int:
        return prod(self.shape[1:])

    @property
    def outputs(self) -> int:
        return self.shape[0]

    def signs(self) -> np.ndarray:
        bits = unpack_bits(self.rows, self.row_bits)
        return np.where(bits, 1, -1).astype(np.int8).reshape(self.shape)

    @classmethod
    def from_signs(cls, name, kind, signs, bias, norm=None) -> "LayerParams":
        signs = np.asarray(signs)
        if signs.size and not np.all((signs == 1) | (signs == -1)):
            raise BundleFormatError(f"{name}: weights must be +1 or -1")
        rows = pack_bits(signs.reshape(signs.shape[0], -1) > 0)
        return cls(name, kind, tuple(signs.shape), rows, bias, norm)


@dataclass(frozen=True, eq=False)
class WeightBundle:
    spec_name: str
    layers: dict[str, LayerParams] = field(default_factory=dict)
    seed: Optional[int] = None


def check_bundle(bundle: WeightBundle, spec: NetworkSpec) -> None:
    """Raise :class:`BundleMismatchError` unless ``bundle`` fits ``spec``."""
    errors = []
    wanted = [l for _, l in spec.weighted_layers()]
    missing = [l.name for l in wanted if l.name not in bundle.layers]
    if missing:
        errors.append(f"missing layers {missing}")
    extra = sorted(set(bundle.layers) - {l.name for l in wanted})
    if extra:
        errors.append(f"unexpected layers {extra}")
    for layer in wanted:
        p = bundle.layers.get(layer.name)
        if p is None:
            continue
        if p.kind is not layer.kind:
            errors.append(f"{layer.name}: kind {p.kind.value} != {layer.kind.value}")
        shape = expected_weight_shape(layer)
        if tuple(p.shape) != shape:
            errors.append(f"{layer.name}: weight shape {tuple(p.shape)} != {shape}")
        if p.bias.shape != (layer.out_channels,):
            errors.append(f"{layer.name}: {p.bias.shape[0]} biases for {layer.out_channels} outputs")
        if layer.has_batchnorm and p.norm is None:
            errors.append(f"{layer.name}: batch norm required but absent")
        if p.norm is not None and p.norm.channels != layer.out_channels:
            errors.append(f"{layer.name}: norm has {p.norm.channels} channels, layer {layer.out_channels}")
    if errors:
        raise BundleMismatchError("; ".join(errors))


# -- binary format ---------------------------------------------------------

def _stream_words(p: LayerParams) -> np.ndarray:
    bits = unpack_bits(p.rows, p.row_bits).reshape(-1)
    return pack_bits(bits)


def save_bundle(bundle: WeightBundle, spec: NetworkSpec) -> bytes:
    check_bundle(bundle, spec)
    out = io.BytesIO()
    name = spec.name.encode("utf-8")
    weighted = [l for _, l in spec.weighted_layers()]
    out.write(MAGIC)
    out.write(struct.pack("<HHH", VERSION, len(weighted), len(name)))
    out.write(name)
    out.write(struct.pack("<q", -1 if bundle.seed is None else bundle.seed))
    for layer in weighted:
        p = bundle.layers[layer.name]
        out.write(struct.pack("<BB", _KIND_TAGS[p.kind], len(p.shape)))
        out.write(struct.pack(f"<{len(p.shape)}I", *p.shape))
        out.write(_stream_words(p).astype("<u8").tobytes())
        out.write(p.bias.astype("<f8").tobytes())
        norm = p.norm
        if norm is None:
            out.write(bytes([_NORM_NONE]))
        elif isinstance(norm, AffineNorm):
            out.write(bytes([_NORM_AFFINE]))
            for v in (norm.A, norm.B):
                out.write(np.asarray(v, dtype="<f8").tobytes())
        else:
            if norm.epsilon:
                norm = BatchNormParams(norm.gamma, norm.beta, norm.mu,
                                       np.sqrt(np.asarray(norm.sigma) ** 2 + norm.epsilon))
            out.write(bytes([_NORM_BN]))
            for v in (norm.gamma, norm.beta, norm.mu, norm.sigma):
                out.write(np.asarray(v, dtype="<f8").reshape(-1).tobytes())
    payload = out.getvalue()
    return payload + struct.pack("<I", zlib.crc32(payload))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise BundleFormatError(f"truncated bundle at byte {self.pos} (need {n} more)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        raw = np.frombuffer(self.take(dt.itemsize * count), dtype=dt)
        return raw.astype(dt.newbyteorder("="))


def load_bundle(data: bytes, spec: NetworkSpec) -> WeightBundle:
    data = bytes(data)
    if len(data) < len(MAGIC) or data[:len(MAGIC)] != MAGIC:
        raise BundleFormatError("bad magic: not an XNORNET1 bundle")
    if len(data) < len(MAGIC) + 4:
        raise BundleFormatError("truncated bundle")
    payload, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) != crc:
        raise BundleFormatError("checksum mismatch: bundle is corrupted or truncated")
    r = _Reader(payload)
    r.take(len(MAGIC))
    version, count, name_len = r.unpack("<HHH")
    if version != VERSION:
        raise BundleFormatError(f"unsupported bundle version {version}")
    spec_name = r.take(name_len).decode("utf-8", errors="replace")
    (seed,) = r.unpack("<q")
    weighted = [l for _, l in spec.weighted_layers()]
    if count != len(weighted):
        raise BundleMismatchError(f"bundle has {count} layers, network {spec.name!r} has {len(weighted)}")
    layers = {}
    for layer in weighted:
        tag, ndim = r.unpack("<BB")
        kind = _TAG_KINDS.get(tag)
        if kind is None:
            raise BundleFormatError(f"{layer.name}: unknown layer kind tag {tag}")
        if kind is not layer.kind:
            raise BundleMismatchError(f"{layer.name}: bundle kind {kind.value} != {layer.kind.value}")
        shape = r.unpack(f"<{ndim}I")
        expect = expected_weight_shape(layer)
        if tuple(shape) != expect:
            raise BundleMismatchError(f"{layer.name}: bundle dims {tuple(shape)} != expected {expect}")
        total = prod(shape)
        stream = r.array("<u8", n_words(total))
        bits = unpack_bits(stream, total).reshape(shape[0], -1)
        rows = pack_bits(bits)
        out = shape[0]
        bias = r.array("<f8", out)
        (norm_tag,) = r.unpack("<B")
        if norm_tag == _NORM_NONE:
            norm = None
        elif norm_tag == _NORM_AFFINE:
            norm = AffineNorm(r.array("<f8", out), r.array("<f8", out))
        elif norm_tag == _NORM_BN:
            norm = BatchNormParams(*(r.array("<f8", out) for _ in range(4)))
        else:
            raise BundleFormatError(f"{layer.name}: unknown norm tag {norm_tag}")
        layers[layer.name] = LayerParams(layer.name, kind, tuple(shape), rows, bias, norm)
    if r.pos != len(payload):
        raise BundleFormatError(f"{len(payload) - r.pos} trailing bytes after last layer")
    bundle = WeightBundle(spec_name, layers, None if seed < 0 else seed)
    check_bundle(bundle, spec)
    return bundle


def write_bundle(path, bundle: WeightBundle, spec: NetworkSpec) -> None:
    with open(path, "wb") as fh:
        fh.write(save_bundle(bundle, spec))


def read_bundle(path, spec: NetworkSpec) -> WeightBundle:
    """Read a binary bundle, or a JSON import document if the file is JSON."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:len(MAGIC)] == MAGIC:
        return load_bundle(data, spec)
    if data.lstrip()[:1] == b"{":
        return bundle_from_json(data.decode("utf-8"), spec)
    raise BundleFormatError(f"{path}: neither an XNORNET1 bundle nor a JSON bundle")


# -- JSON import -----------------------------------------------------------

def _norm_from_json(doc, name):
    if doc is None:
        return None
    try:
        if "A" in doc:
            return AffineNorm(doc["A"], doc["B"])
        gamma, beta, mu = (np.asarray(doc[k], dtype=np.float64) for k in ("gamma", "beta", "mu"))
        eps = float(doc.get("epsilon", 1e-5))
        if "variance" in doc:
            bn = BatchNormParams.from_variance(gamma, beta, mu, doc["variance"], eps)
        else:
            bn = BatchNormParams(gamma, beta, mu, np.asarray(doc["sigma"], dtype=np.float64))
        return fold_batchnorm(bn)
    except (KeyError, TypeError, ValueError) as exc:
        raise BundleFormatError(f"{name}: bad norm entry: {exc}") from None


def bundle_from_json(text: str, spec: NetworkSpec) -> WeightBundle:
    """Import a bundle from the JSON exchange document.

    ::

        {"format": "xnor-forge-bundle", "version": 1, "spec": "custom",
         "layers": [{"name": "Conv-1",
                     "weights": [[[[1, -1, ...]]]],   # (F, C, kh, kw) or (out, in)
                     "bias": [...],
                     "norm": {"A": [...], "B": [...]}
                          | {"gamma": [...], "beta": [...], "mu": [...],
                             "sigma": [...]}              # or "variance" + "epsilon"
                          | null}]}

    Raw batch-norm statistics are folded to ``(A, B)`` on import. Dense
    weights use the channel-planar input order of the binary format.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise BundleFormatError(f"bundle JSON does not parse: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != JSON_FORMAT or doc.get("version") != 1:
        raise BundleFormatError(f"not a {JSON_FORMAT} v1 document")
    entries = {e.get("name"): e for e in doc.get("layers", [])}
    layers = {}
    for _, layer in spec.weighted_layers():
        e = entries.get(layer.name)
        if e is None:
            raise BundleMismatchError(f"JSON bundle lacks layer {layer.name}")
        try:
            signs = np.asarray(e["weights"], dtype=np.int64)
            bias = np.asarray(e.get("bias", np.zeros(layer.out_channels)), dtype=np.float64)
        except (KeyError, ValueError) as exc:
            raise BundleFormatError(f"{layer.name}: {exc}") from None
        if signs.shape != expected_weight_shape(layer):
            raise BundleMismatchError(
                f"{layer.name}: weights {signs.shape} != expected {expected_weight_shape(layer)}")
        norm = _norm_from_json(e.get("norm"), layer.name)
        layers[layer.name] = LayerParams.from_signs(layer.name, layer.kind, signs, bias, norm)
    bundle = WeightBundle(str(doc.get("spec", spec.name)), layers, None)
    check_bundle(bundle, spec)
    return bundle


def bundle_to_json(bundle: WeightBundle, spec: NetworkSpec) -> str:
    out = []
    for _, layer in spec.weighted_layers():
        p = bundle.layers[layer.name]
        norm = p.norm
        if isinstance(norm, BatchNormParams):
            norm = fold_batchnorm(norm)
        out.append({
            "name": p.name,
            "weights": p.signs().tolist(),
            "bias": p.bias.tolist(),
            "norm": None if norm is None else {"A": norm.A.tolist(), "B": norm.B.tolist()},
        })
    return json.dumps({"format": JSON_FORMAT, "version": 1, "spec": spec.name, "layers": out})


# -- synthetic bundles -----------------------------------------------------

def bundle_rng(seed: int) -> np.random.Generator:
    """The fixture generator: numpy's PCG64 seeded with ``seed``."""
    return np.random.Generator(np.random.PCG64(seed))


def random_bundle(spec: NetworkSpec, seed: int) -> WeightBundle:
    """Deterministic synthetic bundle.

    Weights are i.i.d. fair +/-1 bits, biases uniform in [-1, 1], norms
    affine with ``|A|`` uniform in [0.25, 4] (random sign) and ``B`` uniform
    in [-8, 8]. Draw order is fixed per layer, so a seed gives the same
    bundle on every platform.
    """
    rng = bundle_rng(seed)
    layers = {}
    for _, layer in spec.weighted_layers():
        shape = expected_weight_shape(layer)
        row_bits = prod(shape[1:])
        nw = n_words(row_bits)
        rows = rng.integers(0, 2**64, size=(shape[0], nw), dtype=np.uint64, endpoint=False)
        r = row_bits % 64
        if r:
            rows[:, -1] &= np.uint64((1 << r) - 1)
        out = shape[0]
        bias = rng.uniform(-1.0, 1.0, out)
        norm = None
        if layer.has_batchnorm:
            mag = rng.uniform(0.25, 4.0, out)
            sign = np.where(rng.integers(0, 2, out) == 1, 1.0, -1.0)
            norm = AffineNorm(mag * sign, rng.uniform(-8.0, 8.0, out))
        layers[layer.name] = LayerParams(layer.name, layer.kind, shape, rows, bias, norm)
    return WeightBundle(spec.name, layers, seed)
