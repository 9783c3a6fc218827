"""Folding (PE/SIMD) throughput model of a streaming dataflow accelerator.

Every conv/dense layer is one matrix-vector unit with ``PE`` output lanes and
``SIMD`` input lanes. Per frame it needs::

    positions * (out_channels / PE) * (window / SIMD)

cycles, where ``window`` is ``k_h*k_w*in_channels`` (conv) or the input
count (dense). All layers run concurrently, so the frame interval is the
slowest layer. FIFO depth is recorded but does not enter the steady state.

Folding configs are JSON objects keyed by layer name::

    {"Conv-1": {"pe": 8, "simd": 1, "fifo_depth": 128}, ...}
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Optional

from .netspec import LayerKind, LayerSpec, NetworkSpec

EXPERIMENTS = ("E1", "E2", "E3", "E4")


class FoldingError(ValueError):
    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True)
class LayerFold:
    pe: int
    simd: int
    fifo_depth: int = 32


@dataclass(frozen=True)
class FoldingConfig:
    layers: dict[str, LayerFold] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {name: {"pe": f.pe, "simd": f.simd, "fifo_depth": f.fifo_depth}
                for name, f in self.layers.items()}

    @classmethod
    def from_dict(cls, doc: dict) -> "FoldingConfig":
        layers = {}
        try:
            for name, entry in doc.items():
                if isinstance(entry, (list, tuple)):
                    pe, simd, depth = entry
                else:
                    pe, simd, depth = entry["pe"], entry["simd"], entry.get("fifo_depth", 32)
                layers[name] = LayerFold(int(pe), int(simd), int(depth))
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise FoldingError(f"malformed folding document: {exc}") from None
        return cls(layers)

    @classmethod
    def from_json(cls, text: str) -> "FoldingConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FoldingError(f"folding document is not JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise FoldingError("folding document must be an object keyed by layer name")
        return cls.from_dict(doc)


def experiment(name: str) -> FoldingConfig:
    """One of the shipped folding experiments ``E1`` .. ``E4``."""
    if name not in EXPERIMENTS:
        raise KeyError(f"unknown experiment {name!r}")
    text = resources.files("xnor_forge").joinpath("data", "folding", f"{name}.json").read_text()
    return FoldingConfig.from_json(text)


def divisors(n: int) -> list[int]:
    small = [d for d in range(1, int(n**0.5) + 1) if n % d == 0]
    return sorted(set(small + [n // d for d in small]))


def foldable_layers(spec: NetworkSpec) -> list[LayerSpec]:
    return [l for l in spec.layers if l.kind is not LayerKind.MAXPOOL]


def _layer_errors(layer: LayerSpec, pe: int, simd: int) -> list[str]:
    errors = []
    if pe < 1:
        errors.append(f"{layer.name}: PE must be >= 1, got {pe}")
    elif layer.out_channels % pe:
        errors.append(f"{layer.name}: PE={pe} does not divide {layer.out_channels} output channels; "
                      f"valid: {divisors(layer.out_channels)}")
    if simd < 1:
        errors.append(f"{layer.name}: SIMD must be >= 1, got {simd}")
    elif layer.window_size % simd:
        errors.append(f"{layer.name}: SIMD={simd} does not divide window {layer.window_size}; "
                      f"valid: {divisors(layer.window_size)}")
    return errors


def layer_fold_cycles(layer: LayerSpec, pe: int, simd: int) -> int:
    if layer.kind is LayerKind.MAXPOOL:
        return 0
    errors = _layer_errors(layer, pe, simd)
    if errors:
        raise FoldingError(errors)
    return layer.output_positions * (layer.out_channels // pe) * (layer.window_size // simd)


def validate_folding(spec: NetworkSpec, config: FoldingConfig) -> None:
    errors = []
    names = {l.name for l in foldable_layers(spec)}
    for layer in foldable_layers(spec):
        f = config.layers.get(layer.name)
        if f is None:
            errors.append(f"{layer.name}: no folding given")
            continue
        errors += _layer_errors(layer, f.pe, f.simd)
        if f.fifo_depth < 1:
            errors.append(f"{layer.name}: FIFO depth must be >= 1, got {f.fifo_depth}")
    for name in config.layers:
        if name not in names:
            errors.append(f"{name}: not a conv/dense layer of {spec.name!r}")
    if errors:
        raise FoldingError(errors)


@dataclass(frozen=True)
class ThroughputReport:
    layer_names: tuple[str, ...]
    layer_cycles: tuple[int, ...]
    frequency_hz: float
    cost: int

    @property
    def bottleneck(self) -> int:
        """Index (into ``layer_names``) of the first slowest layer."""
        return self.layer_cycles.index(self.interval)

    @property
    def interval(self) -> int:
        return max(self.layer_cycles)

    @property
    def fps(self) -> float:
        return self.frequency_hz / self.interval

    def to_dict(self) -> dict:
        return {
            "frequency_hz": self.frequency_hz,
            "fps": self.fps,
            "interval_cycles": self.interval,
            "bottleneck": self.layer_names[self.bottleneck],
            "cost_pe_simd": self.cost,
            "layers": [{"name": n, "cycles": c} for n, c in zip(self.layer_names, self.layer_cycles)],
        }


def throughput(spec: NetworkSpec, config: FoldingConfig, frequency_hz: float = 1.0e8) -> ThroughputReport:
    validate_folding(spec, config)
    names, cycles, cost = [], [], 0
    for layer in foldable_layers(spec):
        f = config.layers[layer.name]
        names.append(layer.name)
        cycles.append(layer_fold_cycles(layer, f.pe, f.simd))
        cost += f.pe * f.simd
    return ThroughputReport(tuple(names), tuple(cycles), frequency_hz, cost)


@dataclass(frozen=True)
class FrontierPoint:
    config: FoldingConfig
    fps: float
    cost: int
    interval: int

    def key(self):
        return tuple((f.pe, f.simd) for f in self.config.layers.values())

    def to_dict(self) -> dict:
        return {"fps": self.fps, "cost_pe_simd": self.cost, "interval_cycles": self.interval,
                "config": self.config.to_dict()}


def _layer_options(layer: LayerSpec, layer_budget: Optional[int]) -> list[tuple[int, int, int, int]]:
    """All ``(cycles, cost, pe, simd)`` for one layer within its budget."""
    opts = []
    for pe in divisors(layer.out_channels):
        for simd in divisors(layer.window_size):
            if layer_budget is not None and pe * simd > layer_budget:
                continue
            opts.append((layer_fold_cycles(layer, pe, simd), pe * simd, pe, simd))
    return opts


def explore(spec: NetworkSpec, frequency_hz: float = 1.0e8, *,
            layer_budget: Optional[int] = None, total_budget: Optional[int] = None,
            fifo_depth: int = 32) -> list[FrontierPoint]:
    """Pareto frontier of divisor-valid foldings over (fps up, PE*SIMD cost down).

    For every achievable frame interval ``T`` the cheapest config with all
    layers at most ``T`` cycles is taken per layer independently (cost is a
    sum, the interval a max), which is exact. Ties within a layer go to the
    lexicographically smallest ``(pe, simd)``. Output is ordered by fps
    descending, then cost ascending.
    """
    if (layer_budget is not None and layer_budget < 1) or (total_budget is not None and total_budget < 1):
        raise FoldingError("budgets must be >= 1")
    layers = foldable_layers(spec)
    options = []
    for layer in layers:
        opts = _layer_options(layer, layer_budget)
        if not opts:
            raise FoldingError(f"{layer.name}: no folding fits the per-layer budget")
        options.append(sorted(opts, key=lambda o: (o[1], o[2], o[3])))
    intervals = sorted({o[0] for opts in options for o in opts})
    candidates = []
    for t in intervals:
        picks = []
        for opts in options:
            pick = next((o for o in opts if o[0] <= t), None)
            if pick is None:
                break
            picks.append(pick)
        else:
            cost = sum(p[1] for p in picks)
            if total_budget is not None and cost > total_budget:
                continue
            interval = max(p[0] for p in picks)
            cfg = FoldingConfig({l.name: LayerFold(p[2], p[3], fifo_depth) for l, p in zip(layers, picks)})
            candidates.append(FrontierPoint(cfg, frequency_hz / interval, cost, interval))
    if not candidates:
        raise FoldingError("search space is empty under the given budgets")
    return pareto_front(candidates)


def pareto_front(points: Iterable[FrontierPoint]) -> list[FrontierPoint]:
    """Non-dominated points, sorted by (interval asc, cost asc, config)."""
    ordered = sorted(points, key=lambda p: (p.interval, p.cost, p.key()))
    front = []
    best_cost = None
    for p in ordered:
        if best_cost is None or p.cost < best_cost:
            front.append(p)
            best_cost = p.cost
    return front


def enumerate_configs(spec: NetworkSpec, layer_budget: Optional[int] = None,
                      fifo_depth: int = 32) -> Iterable[FoldingConfig]:
    """Every divisor-valid config (brute force; only for small networks)."""
    layers = foldable_layers(spec)
    per_layer = [[(o[2], o[3]) for o in _layer_options(l, layer_budget)] for l in layers]
    for combo in itertools.product(*per_layer):
        yield FoldingConfig({l.name: LayerFold(pe, simd, fifo_depth) for l, (pe, simd) in zip(layers, combo)})
