import struct

import numpy as np
import pytest

from rfscope.errors import WeightFormatError
from rfscope.graph import build_graph, load_state
from rfscope.weights import MAGIC, WeightBundle, load_weights, save_weights

from helpers import make_graph, randomize_parameters

SPEC = "name w\ninput 2 6 6\nconv 3 1 1 3 bias @c\nbn @b\nrelu\ngap\nfc 2 bias @f\n"


@pytest.fixture
def graph():
    return randomize_parameters(make_graph(SPEC, seed=4), np.random.default_rng(4))


def test_round_trip_is_bit_exact(graph):
    data = save_weights(graph).to_bytes()
    bundle = load_weights(data)
    assert set(bundle.tensors) == set(graph.state())
    for k, v in graph.state().items():
        assert bundle.tensors[k].dtype == v.dtype
        np.testing.assert_array_equal(bundle.tensors[k], v)
    assert bundle.to_bytes() == data


def test_loaded_graph_reproduces_outputs(graph):
    clone = build_graph(graph.spec, load_weights(save_weights(graph).to_bytes()))
    x = np.random.default_rng(0).standard_normal((3, 2, 6, 6))
    np.testing.assert_array_equal(clone.forward(x).output, graph.forward(x).output)


def test_float32_tensors_keep_their_dtype():
    b = WeightBundle({"a": np.arange(6, dtype=np.float32).reshape(2, 3), "s": np.float64(2.5) * np.ones(())})
    out = load_weights(b.to_bytes())
    assert out.tensors["a"].dtype == np.float32
    assert out.tensors["s"].shape == ()


def test_bad_magic(graph):
    data = save_weights(graph).to_bytes()
    with pytest.raises(WeightFormatError, match="magic"):
        load_weights(b"XXXX" + data[4:])


def test_bad_version(graph):
    data = bytearray(save_weights(graph).to_bytes())
    data[4:8] = struct.pack("<I", 99)
    with pytest.raises(WeightFormatError, match="version"):
        load_weights(bytes(data))


def test_truncation_names_the_record(graph):
    data = save_weights(graph).to_bytes()
    with pytest.raises(WeightFormatError, match="unexpected EOF at layer"):
        load_weights(data[:-3])
    assert data.startswith(MAGIC)


def test_unknown_dtype_tag():
    data = bytearray(WeightBundle({"x": np.zeros(2)}).to_bytes())
    tag_at = 9 + 4 + 1 + 4 + 4
    data[tag_at] = 7
    with pytest.raises(WeightFormatError, match="dtype tag"):
        load_weights(bytes(data))


def test_load_state_reports_mismatches(graph):
    state = graph.state()
    missing = {k: v for k, v in state.items() if k != "c.weight"}
    with pytest.raises(WeightFormatError, match="c"):
        load_state(graph.copy(), missing)
    wrong = dict(state)
    wrong["f.weight"] = np.zeros((5, 5))
    with pytest.raises(WeightFormatError, match="f"):
        load_state(graph.copy(), wrong)
    extra = dict(state)
    extra["ghost.weight"] = np.zeros(1)
    with pytest.raises(WeightFormatError, match="ghost"):
        load_state(graph.copy(), extra)
