import os

import numpy as np
import pytest

from xnor_forge import _pykernels, kernels


def naive_xnor_dot(a_bits, b_bits):
    return int(np.sum(np.where(a_bits == b_bits, 1, -1)))


def pack_rows(bits):
    from xnor_forge.bitcore import pack_bits
    return pack_bits(bits)


def test_compiled_backend_is_selected():
    assert "cython" in kernels.available_backends()
    expected = "numpy" if os.environ.get("XNOR_FORGE_PURE") else "cython"
    assert kernels.BACKEND == expected


@pytest.mark.parametrize("nbits", [1, 25, 63, 64, 65, 128, 1600, 3200])
def test_xnor_dot_matrix_matches_bitwise_oracle(backend, rng, nbits):
    a = rng.integers(0, 2, (7, nbits)).astype(bool)
    b = rng.integers(0, 2, (5, nbits)).astype(bool)
    got = backend.xnor_dot_matrix(pack_rows(a), pack_rows(b), nbits)
    want = np.array([[naive_xnor_dot(x, y) for y in b] for x in a])
    np.testing.assert_array_equal(got, want)


def test_backends_agree_bit_for_bit(rng):
    backends = kernels.available_backends()
    a = rng.integers(0, 2**63, (40, 3), dtype=np.uint64)
    b = rng.integers(0, 2**63, (9, 3), dtype=np.uint64)
    a[:, -1] &= np.uint64((1 << 36) - 1)
    b[:, -1] &= np.uint64((1 << 36) - 1)
    results = [m.xnor_dot_matrix(a, b, 164) for m in backends.values()]
    for r in results[1:]:
        np.testing.assert_array_equal(r, results[0])

    x = rng.uniform(-1, 1, (9, 9, 3))
    s = np.where(rng.integers(0, 2, (4, 3, 5, 5)) == 1, 1, -1).astype(np.int8)
    convs = [m.conv_first_accumulate(x, s) for m in backends.values()]
    for c in convs[1:]:
        assert np.array_equal(c, convs[0])  # identical summation order


def test_word_count_must_match_nbits(backend):
    a = np.zeros((1, 2), dtype=np.uint64)
    with pytest.raises(ValueError):
        backend.xnor_dot_matrix(a, a, 64)


def test_popcount(backend):
    words = np.array([0, 1, 0xFFFFFFFFFFFFFFFF, 0x8000000000000001], dtype=np.uint64)
    assert backend.popcount(words) == 0 + 1 + 64 + 2


def test_numpy_fallback_chunks_large_inputs(rng, monkeypatch):
    monkeypatch.setattr(_pykernels, "_CHUNK_WORDS", 8)
    a = rng.integers(0, 2, (33, 130)).astype(bool)
    b = rng.integers(0, 2, (3, 130)).astype(bool)
    got = _pykernels.xnor_dot_matrix(pack_rows(a), pack_rows(b), 130)
    want = np.array([[naive_xnor_dot(x, y) for y in b] for x in a])
    np.testing.assert_array_equal(got, want)


def test_portable_and_hardware_popcount_agree(rng):
    ck = kernels.available_backends().get("cython")
    if ck is None:
        pytest.skip("compiled kernels not built")
    a = rng.integers(0, 2**64, (9, 13), dtype=np.uint64)
    b = rng.integers(0, 2**64, (7, 13), dtype=np.uint64)
    words = a.ravel()
    fast = ck.HARDWARE_POPCOUNT
    try:
        assert ck.select_popcount(False) is False
        slow_dot, slow_count = ck.xnor_dot_matrix(a, b, 801), ck.popcount(words)
    finally:
        ck.select_popcount(fast)
    np.testing.assert_array_equal(ck.xnor_dot_matrix(a, b, 801), slow_dot)
    assert ck.popcount(words) == slow_count == int(np.bitwise_count(words).sum())
