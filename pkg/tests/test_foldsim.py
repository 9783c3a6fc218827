
import pytest
from hypothesis import given, settings, strategies as st

from xnor_forge import foldsim
from xnor_forge.foldsim import FoldingConfig, FoldingError, LayerFold
from xnor_forge.netspec import InputRange, LayerKind, LayerSpec, NetworkSpec, builtin_finn

FINN = builtin_finn()


def small_net():
    c1 = LayerSpec("A", LayerKind.CONV_FIRST, (6, 6, 2), (4, 4, 4), (3, 3, 4))
    p = LayerSpec("P", LayerKind.MAXPOOL, (4, 4, 4), (2, 2, 4), None, False, False)
    c2 = LayerSpec("B", LayerKind.CONV_BINARY, (2, 2, 4), (1, 1, 6), (2, 2, 6))
    d = LayerSpec("C", LayerKind.DENSE, (1, 1, 6), (1, 1, 3), None, True, False)
    return NetworkSpec("small", (c1, p, c2, d), InputRange.UNIT_INTERVAL, 3)


def uniform(spec, pe_simd, depth=32):
    return FoldingConfig({l.name: LayerFold(*pe_simd[l.name], depth) for l in foldsim.foldable_layers(spec)})


def test_layer_cycle_examples():
    conv1, conv2 = FINN.layer("Conv-1"), FINN.layer("Conv-2")
    assert foldsim.layer_fold_cycles(conv1, 8, 1) == 784 * 8 * 75 == 470_400
    assert foldsim.layer_fold_cycles(conv2, 16, 16) == 100 * 8 * 100 == 80_000


@pytest.mark.parametrize("name", ["Conv-1", "Conv-2", "Conv-3", "FC-1"])
def test_full_unfolding_costs_one_cycle_per_position(name):
    layer = FINN.layer(name)
    assert foldsim.layer_fold_cycles(layer, layer.out_channels, layer.window_size) == layer.output_positions


def test_experiments():
    fps = {e: foldsim.throughput(FINN, foldsim.experiment(e)).fps for e in foldsim.EXPERIMENTS}
    e3 = foldsim.throughput(FINN, foldsim.experiment("E3"))
    assert e3.interval == 470_400 and e3.layer_names[e3.bottleneck] == "Conv-1"
    assert abs(fps["E3"] - 212.41) / 212.41 <= 0.01
    assert fps["E1"] == fps["E2"]
    assert fps["E1"] < fps["E3"] < fps["E4"]
    assert foldsim.experiment("E1").layers["Conv-1"].fifo_depth != foldsim.experiment("E2").layers["Conv-1"].fifo_depth


def test_experiment_unknown():
    with pytest.raises(KeyError):
        foldsim.experiment("E9")


def test_one_layer_fully_unfolded():
    d = LayerSpec("D", LayerKind.DENSE, (1, 1, 8), (1, 1, 2), None, True, False)
    c = LayerSpec("C", LayerKind.CONV_FIRST, (5, 5, 1), (3, 3, 8), (3, 3, 8))
    spec = NetworkSpec("one", (c, d), InputRange.UNIT_INTERVAL, 2)
    cfg = FoldingConfig({"C": LayerFold(8, 9), "D": LayerFold(2, 8)})
    assert foldsim.throughput(spec, cfg, 9e6).fps == 9e6 / 9


def test_validation_errors():
    e4 = foldsim.experiment("E4")
    foldsim.validate_folding(FINN, e4)
    bad = FoldingConfig({**e4.layers, "Conv-1": LayerFold(7, 1)})
    with pytest.raises(FoldingError) as info:
        foldsim.validate_folding(FINN, bad)
    assert "PE=7" in str(info.value) and "[1, 2, 4, 8, 16, 32, 64]" in str(info.value)
    bad = FoldingConfig({**e4.layers, "Conv-2": LayerFold(16, 0)})
    with pytest.raises(FoldingError, match="SIMD must be >= 1"):
        foldsim.validate_folding(FINN, bad)
    missing = FoldingConfig({k: v for k, v in e4.layers.items() if k != "FC-1"})
    with pytest.raises(FoldingError, match="FC-1"):
        foldsim.throughput(FINN, missing)
    extra = FoldingConfig({**e4.layers, "Max-1": LayerFold(1, 1)})
    with pytest.raises(FoldingError, match="Max-1"):
        foldsim.validate_folding(FINN, extra)


def test_config_json_round_trip():
    cfg = foldsim.experiment("E4")
    assert FoldingConfig.from_json(__import__("json").dumps(cfg.to_dict())) == cfg
    with pytest.raises(FoldingError):
        FoldingConfig.from_json("[1, 2]")
    with pytest.raises(FoldingError):
        FoldingConfig.from_json('{"Conv-1": {"pe": 1}}')


def test_explore_budget_one():
    [point] = foldsim.explore(FINN, layer_budget=1)
    naive = max(foldsim.layer_fold_cycles(l, 1, 1) for l in foldsim.foldable_layers(FINN))
    assert point.fps == 1e8 / naive
    assert all((f.pe, f.simd) == (1, 1) for f in point.config.layers.values())


def test_explore_unbounded_reaches_full_unfolding():
    front = foldsim.explore(FINN)
    best = front[0]
    assert best.fps == 1e8 / max(l.output_positions for l in foldsim.foldable_layers(FINN))
    for a, b in zip(front, front[1:]):
        assert a.fps > b.fps and a.cost > b.cost


def test_explore_total_budget_respected():
    front = foldsim.explore(FINN, total_budget=200)
    assert front and all(p.cost <= 200 for p in front)
    with pytest.raises(FoldingError):
        foldsim.explore(FINN, total_budget=3)


def dominates(a, b):
    return a[0] >= b[0] and a[1] <= b[1] and a != b


def test_frontier_matches_brute_force():
    spec = small_net()
    points = []
    for cfg in foldsim.enumerate_configs(spec):
        r = foldsim.throughput(spec, cfg)
        points.append((r.fps, r.cost))
    truth = sorted({p for p in points if not any(dominates(q, p) for q in points)}, reverse=True)
    got = [(p.fps, p.cost) for p in foldsim.explore(spec)]
    assert got == truth
    for p in foldsim.explore(spec):
        r = foldsim.throughput(spec, p.config)
        assert (r.fps, r.cost) == (p.fps, p.cost)


def test_frontier_brute_force_with_layer_budget():
    spec = small_net()
    points = {(foldsim.throughput(spec, c).fps, foldsim.throughput(spec, c).cost)
              for c in foldsim.enumerate_configs(spec, layer_budget=6)}
    truth = sorted(p for p in points if not any(dominates(q, p) for q in points))[::-1]
    assert [(p.fps, p.cost) for p in foldsim.explore(spec, layer_budget=6)] == truth


def finn_choices():
    per_layer = []
    for l in foldsim.foldable_layers(FINN):
        per_layer.append(st.tuples(st.sampled_from(foldsim.divisors(l.out_channels)),
                                   st.sampled_from(foldsim.divisors(l.window_size))))
    return st.tuples(*per_layer)


NAMES = [l.name for l in foldsim.foldable_layers(FINN)]


@settings(max_examples=60, deadline=None)
@given(finn_choices(), st.integers(0, 3), st.booleans())
def test_monotone_in_pe_simd(choice, idx, grow_pe):
    cfg = dict(zip(NAMES, choice))
    base = foldsim.throughput(FINN, uniform(FINN, cfg)).fps
    layer = FINN.layer(NAMES[idx])
    pe, simd = cfg[NAMES[idx]]
    if grow_pe:
        bigger = [d for d in foldsim.divisors(layer.out_channels) if d > pe]
        if not bigger:
            return
        cfg[NAMES[idx]] = (bigger[0], simd)
    else:
        bigger = [d for d in foldsim.divisors(layer.window_size) if d > simd]
        if not bigger:
            return
        cfg[NAMES[idx]] = (pe, bigger[0])
    assert foldsim.throughput(FINN, uniform(FINN, cfg)).fps >= base


@settings(max_examples=40, deadline=None)
@given(finn_choices(), st.integers(1, 4096))
def test_fifo_depth_is_irrelevant(choice, depth):
    cfg = dict(zip(NAMES, choice))
    assert foldsim.throughput(FINN, uniform(FINN, cfg, depth)).fps == foldsim.throughput(FINN, uniform(FINN, cfg)).fps


@settings(max_examples=40, deadline=None)
@given(finn_choices())
def test_bottleneck_attains_max_and_removal_helps(choice):
    r = foldsim.throughput(FINN, uniform(FINN, dict(zip(NAMES, choice))))
    assert r.layer_cycles[r.bottleneck] == r.interval
    rest = [c for i, c in enumerate(r.layer_cycles) if i != r.bottleneck]
    if r.layer_cycles.count(r.interval) == 1:
        assert r.frequency_hz / max(rest) > r.fps
    else:
        assert r.frequency_hz / max(rest) == r.fps


def test_divisors():
    assert foldsim.divisors(75) == [1, 3, 5, 15, 25, 75]
    assert foldsim.divisors(1) == [1]
