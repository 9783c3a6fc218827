"""Randomized oracle suites shared by ``xnor-forge verify`` and the tests."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import bitcore, engine, hwsim, modelio, netspec


@dataclass
class SuiteResult:
    name: str
    cases: int = 0
    failures: int = 0
    counterexample: Optional[dict] = None
    notes: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.failures == 0

    def fail(self, example: dict) -> None:
        self.failures += 1
        if self.counterexample is None:
            self.counterexample = example

    def to_dict(self) -> dict:
        return {"name": self.name, "cases": self.cases, "failures": self.failures,
                "ok": self.ok, "counterexample": self.counterexample, **self.notes}


def _faulty_xnor_dot(a: bitcore.BitVector, b: bitcore.BitVector) -> int:
    # deliberately broken: flips bit 0 of the XNOR result
    x = bitcore.xnor(a, b)
    words = x.words.copy()
    words[0] ^= np.uint64(1)
    return 2 * bitcore.popcount(bitcore.BitVector(words, x.length)) - x.length


def random_sign_vector(rng: np.random.Generator, n: int) -> np.ndarray:
    return np.where(rng.integers(0, 2, n) == 1, 1, -1).astype(np.int64)


def xnor_dot_suite(rng, cases: int, max_len: int = 4096, fault: bool = False) -> SuiteResult:
    res = SuiteResult("xnor_dot_vs_integer_dot")
    dot = _faulty_xnor_dot if fault else bitcore.xnor_dot
    for _ in range(cases):
        n = int(rng.integers(1, max_len + 1))
        a, b = random_sign_vector(rng, n), random_sign_vector(rng, n)
        got = dot(bitcore.pack(a), bitcore.pack(b))
        want = int(a @ b)
        res.cases += 1
        if got != want:
            res.fail({"length": n, "a": a.tolist()[:64], "b": b.tolist()[:64],
                      "xnor_dot": got, "integer_dot": want})
    return res


def random_affine(rng, count: int) -> engine.AffineNorm:
    """``|A|`` in [0.25, 4] with random sign; half the ``B`` small, half spread wide,
    and every fourth channel placed exactly on an integer boundary."""
    mag = rng.uniform(0.25, 4.0, count)
    a = np.where(rng.integers(0, 2, count) == 1, mag, -mag)
    b = rng.uniform(-8.0, 8.0, count)
    wide = rng.integers(0, 2, count) == 1
    b = np.where(wide, -a * rng.uniform(-6400.0, 6400.0, count), b)
    exact = np.arange(count) % 4 == 0
    b = np.where(exact, -a * rng.integers(-6400, 6401, count), b)
    return engine.AffineNorm(a, b)


def threshold_suite(rng, cases: int, span: int = 6400, chunk: int = 64) -> SuiteResult:
    res = SuiteResult("threshold_vs_affine_sign")
    xs = np.arange(-span, span + 1, dtype=np.int64)
    done = 0
    while done < cases:
        k = min(chunk, cases - done)
        norm = random_affine(rng, k)
        pre = np.broadcast_to(xs[:, None, None], (xs.size, 1, k))
        fast = engine.threshold_activation(pre, norm).to_bits()
        slow = engine.binarize(engine.batchnorm_affine(pre, norm)).to_bits()
        bad = np.argwhere(fast != slow)
        for ch in np.unique(bad[:, 2]) if bad.size else []:
            row = bad[bad[:, 2] == ch][0]
            res.fail({"A": float(norm.A[ch]), "B": float(norm.B[ch]), "x": int(xs[row[0]]),
                      "threshold": bool(fast[tuple(row)]), "affine_sign": bool(slow[tuple(row)])})
        res.cases += k
        done += k
    res.notes["range"] = [-span, span]
    return res


def random_image(rng, spec: netspec.NetworkSpec) -> np.ndarray:
    """Image on the 8-bit grid, normalized to the network's input range."""
    px = rng.integers(0, 256, spec.input_shape).astype(np.float64)
    if spec.input_range is netspec.InputRange.SYMMETRIC_UNIT:
        return px / 127.5 - 1.0
    return px / 255.0


def path_equivalence_suite(rng, cases: int, spec: netspec.NetworkSpec) -> SuiteResult:
    """Packed path vs float reference: accumulators per layer and argmax."""
    res = SuiteResult(f"packed_vs_reference[{spec.name}]")
    for _ in range(cases):
        seed = int(rng.integers(0, 2**31))
        bundle = modelio.random_bundle(spec, seed)
        image = random_image(rng, spec)
        fast_trace, ref_trace = [], []
        _, label = engine.infer(spec, bundle, image, trace=fast_trace)
        _, ref_label = engine.infer_reference(spec, bundle, image, trace=ref_trace)
        res.cases += 1
        problem = None
        for (name, fast), (_, ref) in zip(fast_trace, ref_trace):
            if spec.layer(name).kind is netspec.LayerKind.CONV_FIRST:
                if not np.allclose(fast, ref, rtol=0, atol=1e-9):
                    problem = f"{name}: real accumulators differ by {np.abs(fast - ref).max()}"
            elif not np.array_equal(fast, ref.astype(np.int64)) or not np.all(ref == np.round(ref)):
                problem = f"{name}: integer accumulators differ"
            if problem:
                break
        if problem is None and label != ref_label:
            problem = f"argmax {label} != reference {ref_label}"
        if problem:
            res.fail({"bundle_seed": seed, "problem": problem})
    return res


def cosim_suite(rng, cases: int, spec: netspec.NetworkSpec) -> SuiteResult:
    res = SuiteResult(f"cosim_vs_infer[{spec.name}]")
    expected_cycles = hwsim.simulate(spec).total_cycles
    for _ in range(cases):
        seed = int(rng.integers(0, 2**31))
        bundle = modelio.random_bundle(spec, seed)
        image = random_image(rng, spec)
        scores, _ = engine.infer(spec, bundle, image)
        report, co_scores = hwsim.cosimulate(spec, bundle, image)
        res.cases += 1
        if not np.array_equal(scores, co_scores) or report.total_cycles != expected_cycles:
            res.fail({"bundle_seed": seed, "max_abs_diff": float(np.abs(scores - co_scores).max()),
                      "cycles": report.total_cycles})
    return res


def run_all(seed: int = 0, cases: int = 1000, fault: bool = False) -> list[SuiteResult]:
    rng = np.random.Generator(np.random.PCG64(seed))
    custom = netspec.builtin_custom()
    network_cases = max(1, cases // 1000)
    return [
        xnor_dot_suite(rng, cases, fault=fault),
        threshold_suite(rng, cases),
        path_equivalence_suite(rng, network_cases, custom),
        path_equivalence_suite(rng, network_cases, netspec.builtin_finn()),
        cosim_suite(rng, network_cases, custom),
    ]
