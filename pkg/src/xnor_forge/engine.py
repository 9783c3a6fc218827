"""Functional inference for XNOR networks.

Feature maps are numpy arrays of shape ``(H, W, C)``. Binary feature maps are
stored channel-planar: each channel is an ``H*W``-bit vector in row-major
order. Dense layers read the flattened binary map channel by channel, which
is also the order the accelerator model streams it.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels
from .bitcore import BitVector, n_words, pack_bits, unpack_bits, xnor_dot_many
from .netspec import LayerKind, NetworkSpec


class InferenceError(ValueError):
    pass


@dataclass(frozen=True)
class BatchNormParams:
    """Per-channel batch-norm statistics; ``sigma`` is a standard deviation."""

    gamma: np.ndarray
    beta: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    epsilon: float = 0.0

    @classmethod
    def from_variance(cls, gamma, beta, mu, variance, epsilon=1e-5):
        sigma = np.sqrt(np.asarray(variance, dtype=np.float64) + epsilon)
        return cls(_f64(gamma), _f64(beta), _f64(mu), sigma, 0.0)

    @property
    def channels(self) -> int:
        return np.asarray(self.gamma).shape[0]


@dataclass(frozen=True)
class AffineNorm:
    """Folded batch norm: ``y = A * x + B`` per channel."""

    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "A", _f64(self.A))
        object.__setattr__(self, "B", _f64(self.B))
        if self.A.shape != self.B.shape or self.A.ndim != 1:
            raise ValueError(f"A and B must be equal-length vectors, got {self.A.shape}, {self.B.shape}")

    @property
    def channels(self) -> int:
        return self.A.shape[0]

    @classmethod
    def identity(cls, channels: int) -> "AffineNorm":
        return cls(np.ones(channels), np.zeros(channels))


def _f64(x) -> np.ndarray:
    return np.atleast_1d(np.asarray(x, dtype=np.float64))


def fold_batchnorm(p: BatchNormParams) -> AffineNorm:
    """Collapse batch norm into ``A = gamma/sigma``, ``B = beta - gamma*mu/sigma``."""
    gamma, beta, mu, sigma = (_f64(v) for v in (p.gamma, p.beta, p.mu, p.sigma))
    if np.any(sigma <= 0) or np.any(~np.isfinite(sigma)):
        raise ValueError("batch-norm sigma must be positive")
    s = np.sqrt(sigma * sigma + p.epsilon) if p.epsilon else sigma
    a = gamma * (1.0 / s)
    return AffineNorm(a, -a * mu + beta)


def as_affine(norm) -> Optional[AffineNorm]:
    if norm is None or isinstance(norm, AffineNorm):
        return norm
    if isinstance(norm, BatchNormParams):
        return fold_batchnorm(norm)
    raise TypeError(f"unsupported norm {type(norm).__name__}")


@dataclass(frozen=True, eq=False)
class BinaryFeatureMap:
    shape: tuple[int, int, int]
    words: np.ndarray  # (C, n_words(H*W))

    def __post_init__(self):
        h, w, c = self.shape
        words = np.ascontiguousarray(self.words, dtype=np.uint64)
        if words.shape != (c, n_words(h * w)):
            raise ValueError(f"words shape {words.shape} does not fit map {self.shape}")
        object.__setattr__(self, "words", words)

    @classmethod
    def from_bits(cls, bits: np.ndarray) -> "BinaryFeatureMap":
        """Build from a boolean ``(H, W, C)`` array (True means +1)."""
        bits = np.asarray(bits, dtype=bool)
        h, w, c = bits.shape
        planes = bits.transpose(2, 0, 1).reshape(c, h * w)
        return cls((h, w, c), pack_bits(planes))

    @classmethod
    def from_signs(cls, signs: np.ndarray) -> "BinaryFeatureMap":
        return cls.from_bits(np.asarray(signs) > 0)

    def to_bits(self) -> np.ndarray:
        h, w, c = self.shape
        return unpack_bits(self.words, h * w).reshape(c, h, w).transpose(1, 2, 0)

    def to_signs(self) -> np.ndarray:
        return np.where(self.to_bits(), 1, -1).astype(np.int8)

    def channel(self, c: int) -> BitVector:
        h, w, _ = self.shape
        return BitVector(self.words[c], h * w)

    def flatten(self) -> BitVector:
        """All channels concatenated, channel outermost."""
        h, w, c = self.shape
        bits = unpack_bits(self.words, h * w).reshape(-1)
        return BitVector.from_bits(bits)

    def __eq__(self, other):
        if not isinstance(other, BinaryFeatureMap):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.words, other.words)


def _packed_rows(weights) -> tuple[np.ndarray, tuple, int]:
    """Return ``(rows, shape, row_bits)`` for signs arrays or packed layer params."""
    if hasattr(weights, "rows") and hasattr(weights, "shape"):
        shape = tuple(weights.shape)
        return weights.rows, shape, int(np.prod(shape[1:]))
    signs = np.asarray(weights)
    if signs.size and not np.all((signs == 1) | (signs == -1)):
        raise ValueError("binary weights must be +1 or -1")
    rows = signs.reshape(signs.shape[0], -1) > 0
    return pack_bits(rows), signs.shape, rows.shape[1]


def _signs_of(weights) -> np.ndarray:
    if hasattr(weights, "signs"):
        return weights.signs()
    signs = np.asarray(weights, dtype=np.int8)
    if signs.size and not np.all((signs == 1) | (signs == -1)):
        raise ValueError("binary weights must be +1 or -1")
    return signs


def conv_first_accumulate(image: np.ndarray, weights) -> np.ndarray:
    """Valid correlation of a real image with +/-1 kernels ``(F, C, kh, kw)``.

    Each tap adds or subtracts the pixel; taps are summed in (channel, row,
    col) order starting from zero.
    """
    signs = _signs_of(weights)
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or signs.ndim != 4 or signs.shape[1] != image.shape[2]:
        raise InferenceError(f"input {image.shape} incompatible with kernels {signs.shape}")
    if signs.shape[2] > image.shape[0] or signs.shape[3] > image.shape[1]:
        raise InferenceError("kernel larger than input")
    return kernels.conv_first_accumulate(np.ascontiguousarray(image), np.ascontiguousarray(signs))


def conv_first(image: np.ndarray, weights, bias) -> np.ndarray:
    return conv_first_accumulate(image, weights) + _f64(bias)


def conv_binary_accumulate(inp: BinaryFeatureMap, weights) -> np.ndarray:
    """Integer accumulators of a binary convolution, shape ``(oh, ow, F)``.

    Each output position gathers its k x k context across all channels into
    one packed vector and takes ``xnor_dot`` against each filter. Because
    ``2P - N`` is additive over disjoint bit ranges this equals the sum of
    the per-channel ``xnor_dot`` terms.
    """
    rows, shape, row_bits = _packed_rows(weights)
    f, c, kh, kw = shape
    h, w, c_in = inp.shape
    if c != c_in:
        raise InferenceError(f"kernel channels {c} != input channels {c_in}")
    if kh > h or kw > w:
        raise InferenceError("kernel larger than input")
    oh, ow = h - kh + 1, w - kw + 1
    bits = inp.to_bits()
    windows = sliding_window_view(bits, (kh, kw), axis=(0, 1))  # (oh, ow, C, kh, kw)
    contexts = pack_bits(windows.reshape(oh * ow, c * kh * kw))
    acc = xnor_dot_many(contexts, rows, row_bits)
    return acc.reshape(oh, ow, f)


def conv_binary(inp: BinaryFeatureMap, weights, bias) -> np.ndarray:
    return conv_binary_accumulate(inp, weights) + _f64(bias)


def maxpool2x2(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    h, w, c = x.shape
    if h % 2 or w % 2:
        raise InferenceError(f"max-pool needs even spatial size, got {h}x{w}")
    return x.reshape(h // 2, 2, w // 2, 2, c).max(axis=(1, 3))


def batchnorm_affine(x: np.ndarray, norm: AffineNorm) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != norm.channels:
        raise InferenceError(f"norm has {norm.channels} channels, input has {x.shape[-1]}")
    return norm.A * x + norm.B


def binarize(x: np.ndarray) -> BinaryFeatureMap:
    """Sign activation: ``x >= 0`` maps to +1, everything else to -1."""
    x = np.asarray(x)
    if x.ndim == 1:
        x = x.reshape(1, 1, -1)
    return BinaryFeatureMap.from_bits(x >= 0)


def integer_thresholds(norm: AffineNorm, bias=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel integer thresholds equivalent to ``sign(A * (x + bias) + B)``.

    Returns ``(tau, increasing)``: for channels with ``A > 0`` the output is
    +1 iff ``x >= tau``; for ``A < 0`` iff ``x <= tau``. The rounded guess
    ``-B/A - bias`` is nudged until it agrees with the floating-point affine
    evaluation, so the two paths match bit for bit.
    """
    a, b = norm.A, norm.B
    if np.any(a == 0):
        raise ValueError("threshold conversion needs A != 0 in every channel")
    bias = np.zeros_like(a) if bias is None else _f64(bias) * np.ones_like(a)

    def fires(x):
        return a * (x + bias) + b >= 0

    inc = a > 0
    guess = np.clip(-b / a - bias, -2.0**52, 2.0**52)
    tau = np.where(inc, np.ceil(guess), np.floor(guess))
    step = np.where(inc, -1.0, 1.0)  # direction that moves towards more firing
    for _ in range(64):
        widen = fires(tau + step)
        if not widen.any():
            break
        tau = np.where(widen, tau + step, tau)
    for _ in range(64):
        shrink = ~fires(tau)
        if not shrink.any():
            break
        tau = np.where(shrink, tau - step, tau)
    return tau.astype(np.int64), inc


def threshold_activation(preact: np.ndarray, norm: AffineNorm, bias=None) -> BinaryFeatureMap:
    """Binarize integer pre-activations by integer comparison only."""
    x = np.asarray(preact)
    if x.ndim == 1:
        x = x.reshape(1, 1, -1)
    if x.shape[-1] != norm.channels:
        raise InferenceError(f"norm has {norm.channels} channels, input has {x.shape[-1]}")
    tau, inc = integer_thresholds(norm, bias)
    xi = x.astype(np.int64)
    return BinaryFeatureMap.from_bits(np.where(inc, xi >= tau, xi <= tau))


def dense_accumulate(inp, weights) -> np.ndarray:
    if isinstance(inp, BinaryFeatureMap):
        inp = inp.flatten()
    rows, shape, row_bits = _packed_rows(weights)
    if inp.length != row_bits:
        raise InferenceError(f"dense input length {inp.length} != weight length {row_bits}")
    return xnor_dot_many(inp.words[None, :], rows, row_bits)[0]


def dense_binary(inp, weights, bias, norm: Optional[AffineNorm] = None) -> np.ndarray:
    scores = dense_accumulate(inp, weights) + _f64(bias)
    if norm is not None:
        scores = batchnorm_affine(scores, norm)
    return scores


def _check_image(spec: NetworkSpec, image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.shape != tuple(spec.input_shape):
        raise InferenceError(f"image shape {image.shape} != network input {spec.input_shape}")
    lo, hi = spec.input_range.bounds
    if not np.all(np.isfinite(image)) or image.min() < lo or image.max() > hi:
        raise InferenceError(f"image values outside [{lo}, {hi}]")
    return image


def _check_bundle(spec, bundle):
    from .modelio import check_bundle

    check_bundle(bundle, spec)


def infer(spec: NetworkSpec, bundle, image: np.ndarray, *, activation: str = "sign", trace=None):
    """Run the packed XNOR network on one image.

    Returns ``(scores, label)``; ties in the scores go to the lowest class.
    ``activation="threshold"`` binarizes hidden binary layers through integer
    thresholds (bias and norm folded) instead of the affine + sign path; the
    result is identical. If ``trace`` is a list, one ``(layer name,
    pre-bias accumulators)`` pair is appended per weighted layer.
    """
    if activation not in ("sign", "threshold"):
        raise ValueError(f"unknown activation mode {activation!r}")
    image = _check_image(spec, image)
    _check_bundle(spec, bundle)
    layers = spec.layers
    binary = None
    scores = None
    i = 0
    while i < len(layers):
        layer = layers[i]
        params = bundle.layers[layer.name]
        if layer.kind is LayerKind.CONV_FIRST:
            acc = conv_first_accumulate(image, params)
        elif layer.kind is LayerKind.CONV_BINARY:
            acc = conv_binary_accumulate(binary, params)
        elif layer.kind is LayerKind.DENSE:
            acc = dense_accumulate(binary, params).reshape(1, 1, -1)
        else:
            raise InferenceError(f"{layer.name}: max-pool must follow a convolution")
        if trace is not None:
            trace.append((layer.name, acc.copy()))
        pooled = spec.followed_by_pool(i)
        norm = as_affine(params.norm) if layer.has_batchnorm else None

        if activation == "threshold" and layer.kind is not LayerKind.CONV_FIRST and layer.has_activation:
            # max commutes with the monotone bias add, so pool the integers
            a = maxpool2x2(acc) if pooled else acc
            binary = threshold_activation(a, norm or AffineNorm.identity(acc.shape[-1]), params.bias)
        else:
            pre = acc + params.bias
            if pooled:
                pre = maxpool2x2(pre)
            if norm is not None:
                pre = batchnorm_affine(pre, norm)
            if layer.has_activation:
                binary = binarize(pre)
            else:
                scores = pre.reshape(-1)
        i += 2 if pooled else 1
    if scores is None:
        raise InferenceError("network ended without a terminal layer")
    return scores, int(np.argmax(scores))


def infer_reference(spec: NetworkSpec, bundle, image: np.ndarray, *, trace=None):
    """Plain floating-point evaluation of the same network (test oracle)."""
    x = _check_image(spec, image)
    _check_bundle(spec, bundle)
    layers = spec.layers
    scores = None
    for i, layer in enumerate(layers):
        if layer.kind is LayerKind.MAXPOOL:
            h, w, c = x.shape
            out = np.empty((h // 2, w // 2, c))
            for y in range(h // 2):
                for xx in range(w // 2):
                    out[y, xx] = x[2 * y:2 * y + 2, 2 * xx:2 * xx + 2].max(axis=(0, 1))
            x = out
        else:
            params = bundle.layers[layer.name]
            wts = params.signs().astype(np.float64)
            if layer.kind.is_conv:
                windows = sliding_window_view(x, wts.shape[2:], axis=(0, 1))
                acc = np.tensordot(windows, wts, axes=([2, 3, 4], [1, 2, 3]))
            else:
                acc = (wts @ x.transpose(2, 0, 1).reshape(-1)).reshape(1, 1, -1)
            if trace is not None:
                trace.append((layer.name, acc.copy()))
            x = acc + params.bias
        # norm and activation come after the pool when one follows
        owner = layer if layer.kind is not LayerKind.MAXPOOL else layers[i - 1]
        if spec.followed_by_pool(i):
            continue
        if owner.has_batchnorm:
            norm = as_affine(bundle.layers[owner.name].norm)
            x = norm.A * x + norm.B
        if owner.has_activation:
            x = np.where(x >= 0, 1.0, -1.0)
        else:
            scores = x.reshape(-1)
    return scores, int(np.argmax(scores))
