import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from xnor_forge.netspec import (
    InputRange,
    LayerKind,
    LayerSpec,
    NetworkSpec,
    SpecError,
    builtin_custom,
    builtin_finn,
    layer_output_shape,
    resolve_spec,
    validate_network,
    with_layer,
)


def conv(name, in_shape, k, f, kind=LayerKind.CONV_BINARY):
    h, w, _ = in_shape
    return LayerSpec(name, kind, in_shape, (h - k + 1, w - k + 1, f), (k, k, f))


def test_conv_shape_table_row():
    layer = conv("Conv-1", (32, 32, 3), 5, 64, LayerKind.CONV_FIRST)
    assert layer_output_shape(layer, (32, 32, 3)) == (28, 28, 64)


def test_maxpool_shape():
    pool = LayerSpec("Max-1", LayerKind.MAXPOOL, (28, 28, 64), (14, 14, 64), None, False, False)
    assert layer_output_shape(pool, (28, 28, 64)) == (14, 14, 64)


def test_one_by_one_conv_is_spatial_identity():
    layer = conv("c", (7, 9, 4), 1, 11)
    assert layer_output_shape(layer, (7, 9, 4)) == (7, 9, 11)


def test_shape_errors():
    layer = conv("c", (7, 7, 4), 3, 2)
    with pytest.raises(SpecError):
        layer_output_shape(layer, (8, 7, 4))
    big = LayerSpec("c", LayerKind.CONV_BINARY, (3, 3, 1), (1, 1, 1), (5, 5, 1))
    with pytest.raises(SpecError, match="larger"):
        layer_output_shape(big, (3, 3, 1))
    odd = LayerSpec("m", LayerKind.MAXPOOL, (5, 5, 1), (2, 2, 1), None, False, False)
    with pytest.raises(SpecError, match="odd"):
        layer_output_shape(odd, (5, 5, 1))


def test_builtin_custom_matches_table():
    spec = builtin_custom()
    names = [l.name for l in spec.layers]
    assert names == ["Conv-1", "Max-1", "Conv-2", "Max-2", "FC-1", "FC-2"]
    assert spec.layers[0].kernel == (5, 5, 64)
    assert spec.layers[2].kernel == (5, 5, 128)
    assert spec.layers[3].out_shape == (5, 5, 128)
    assert spec.layer("FC-1").in_size == 3200
    assert spec.layer("FC-1").out_channels == 512
    assert spec.layer("FC-2").in_size == 512
    assert spec.layer("FC-2").out_channels == 43
    assert not spec.layer("FC-2").has_activation
    assert spec.input_range is InputRange.SYMMETRIC_UNIT
    validate_network(spec)


def test_builtin_finn():
    spec = builtin_finn()
    conv3 = spec.layer("Conv-3")
    assert conv3.in_shape == (5, 5, 128)
    assert conv3.out_shape == (1, 1, 512)
    assert spec.layer("FC-1").in_size == 512
    assert spec.layer("FC-1").out_channels == 43
    assert spec.input_range is InputRange.UNIT_INTERVAL
    validate_network(spec)


def test_validation_names_broken_layer():
    spec = with_layer(builtin_custom(), 1, in_shape=(28, 28, 32), out_shape=(14, 14, 32))
    with pytest.raises(SpecError) as err:
        validate_network(spec)
    assert any("layer 1" in e for e in err.value.errors)


def test_validation_collects_several_errors():
    spec = with_layer(builtin_custom(), 5, out_shape=(1, 1, 42))
    spec = with_layer(spec, 0, kind=LayerKind.CONV_BINARY)
    with pytest.raises(SpecError) as err:
        validate_network(spec)
    assert len(err.value.errors) >= 2


def test_validated_stats():
    v = validate_network(builtin_custom())
    ops = {s.name: s.binary_ops for s in v.stats}
    assert ops["Conv-1"] == 28 * 28 * 64 * 75
    assert ops["FC-1"] == 3200 * 512
    assert ops["Max-1"] == 0
    assert v.total_ops == sum(ops.values())


@pytest.mark.parametrize("factory", [builtin_custom, builtin_finn])
def test_json_round_trip(factory, tmp_path):
    spec = factory()
    again = NetworkSpec.from_json(spec.to_json())
    assert again == spec
    path = tmp_path / "net.json"
    path.write_text(spec.to_json())
    assert resolve_spec(str(path)) == spec
    doc = json.loads(spec.to_json())
    assert set(doc["layers"][0]) == {"name", "kind", "in_shape", "out_shape", "kernel",
                                     "has_batchnorm", "has_activation"}


def test_resolve_builtin_names():
    assert resolve_spec("builtin:custom") == builtin_custom()
    assert resolve_spec("builtin:finn") == builtin_finn()
    with pytest.raises(SpecError):
        resolve_spec("builtin:nope")


def test_malformed_json():
    with pytest.raises(SpecError):
        NetworkSpec.from_json("{not json")
    with pytest.raises(SpecError):
        NetworkSpec.from_json('{"name": "x", "layers": [{"kind": "bogus"}]}')


@st.composite
def random_networks(draw):
    size = draw(st.integers(6, 20))
    c = draw(st.integers(1, 4))
    shape = (size, size, c)
    layers = []
    k = draw(st.integers(1, min(5, size)))
    first = conv("L0", shape, k, draw(st.integers(1, 8)), LayerKind.CONV_FIRST)
    layers.append(first)
    shape = first.out_shape
    for i in range(draw(st.integers(0, 3))):
        if shape[0] % 2 == 0 and shape[0] >= 2 and layers[-1].kind.is_conv and draw(st.booleans()):
            h, w, ch = shape
            layers.append(LayerSpec(f"P{i}", LayerKind.MAXPOOL, shape, (h // 2, w // 2, ch), None, False, False))
            shape = layers[-1].out_shape
        elif shape[0] >= 1:
            k = draw(st.integers(1, shape[0]))
            layers.append(conv(f"C{i}", shape, k, draw(st.integers(1, 8))))
            shape = layers[-1].out_shape
    classes = draw(st.integers(1, 10))
    layers.append(LayerSpec("D", LayerKind.DENSE, shape, (1, 1, classes), None, True, False))
    return NetworkSpec("rand", tuple(layers), InputRange.SYMMETRIC_UNIT, classes)


@given(random_networks())
def test_shape_chaining_property(spec):
    validate_network(spec)
    shape = spec.input_shape
    for layer in spec.layers:
        shape = layer_output_shape(layer, shape)
        assert shape == layer.out_shape
        if layer.kind.is_conv:
            assert shape[0] == layer.in_shape[0] - layer.kernel[0] + 1
