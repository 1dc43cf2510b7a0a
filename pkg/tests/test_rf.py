import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rfscope.errors import RFScopeError
from rfscope.graph import build_graph
from rfscope.netspec import resolve_spec
from rfscope.rf import compute_all_trf, compute_trf, coverage_counts, linearize

from helpers import make_graph, random_strided_spec

RESNET_TRF = {18: 435, 34: 899, 50: 427, 101: 971, 152: 1451}


@pytest.mark.parametrize("depth, expected", sorted(RESNET_TRF.items()))
def test_resnet_trf(depth, expected):
    info = compute_trf(build_graph(resolve_spec(f"resnet{depth}")))
    assert info.rf_size == (expected, expected)
    assert info.jump == (32, 32)


@pytest.mark.parametrize("n, expected", [(1, 3), (2, 5), (3, 7)])
def test_stacked_3x3(n, expected):
    g = make_graph("name s\ninput 1 16 16\n" + "conv 3 1 1 1\n" * n)
    assert compute_trf(g).rf_size == (expected, expected)


def test_recurrence_with_strides_and_offset():
    # rf 1 -> 3 -> 5 -> 13 with jumps 2, 2, 4; offsets grow by ((k-1)/2 - pad) * jump
    g = make_graph("name r\ninput 1 32 32\nconv 3 2 0 1\nconv 2 1 0 1\nconv 5 2 1 1\n")
    infos = compute_all_trf(g)
    assert infos["conv1"].rf_size == (3, 3) and infos["conv1"].jump == (2, 2)
    assert infos["conv2"].rf_size == (5, 5)
    assert infos["conv3"].rf_size == (13, 13) and infos["conv3"].jump == (4, 4)
    assert infos["conv1"].start_offset == (1.0, 1.0)
    assert infos["conv2"].start_offset == (2.0, 2.0)
    assert infos["conv3"].start_offset == (2.0 + (2 - 1) * 2, 2.0 + (2 - 1) * 2)


def test_residual_join_takes_max():
    g = make_graph("name j\ninput 1 16 16\nresblock @b {\nconv 3 1 1 1\nconv 3 1 1 1\n}\n")
    assert compute_all_trf(g)["b"].rf_size == (5, 5)


def test_default_target_skips_head():
    g = make_graph("name h\ninput 1 16 16\nconv 3 1 1 2 @c\ngap\nfc 2 bias\n")
    info = compute_trf(g)
    assert info.rf_size == (3, 3)
    assert compute_all_trf(g)["fc1"].global_head


def test_unknown_target():
    g = make_graph("name h\ninput 1 8 8\nconv 3 1 1 1\n")
    with pytest.raises(KeyError):
        compute_trf(g, "nope")


def test_join_with_mismatched_jump_is_an_error():
    g = make_graph("name j\ninput 1 16 16\nresblock @b {\nconv 3 1 1 1\n}\n")
    # graft a strided conv into one branch without touching shapes
    conv = g.nodes[1]
    conv.layer = conv.layer.__class__(**{**conv.layer.__dict__, "stride": 2})
    with pytest.raises(RFScopeError, match="jump"):
        compute_all_trf(g)


# --- coverage -------------------------------------------------------------------------

def test_single_3x3_s2_is_checkerboard():
    g = make_graph("name c\ninput 1 40 40\nconv 3 2 1 1\n")
    counts = coverage_counts(g)
    interior = counts[4:-4, 4:-4]
    assert interior.min() == 1 and interior.max() == 4
    assert set(np.unique(interior)) == {1, 2, 4}
    # per axis, even pixels sit in one window and odd pixels in two
    axis = np.where(np.arange(4, 36) % 2, 2, 1)
    np.testing.assert_array_equal(interior, np.outer(axis, axis))


def test_single_4x4_s2_is_uniform():
    g = make_graph("name c\ninput 1 40 40\nconv 4 2 1 1\n")
    interior = coverage_counts(g)[4:-4, 4:-4]
    assert interior.min() == interior.max() == 4


def test_coverage_of_one_feature_is_its_window():
    g = make_graph("name c\ninput 1 16 16\nconv 3 1 1 1\nconv 3 1 1 1\n")
    counts = coverage_counts(g, target_position=(8, 8))
    nz = np.argwhere(counts)
    assert nz.min(axis=0).tolist() == [6, 6] and nz.max(axis=0).tolist() == [10, 10]
    assert counts[8, 8] == 9


def test_linearized_graph_is_single_channel_all_ones():
    g = make_graph("name c\ninput 3 16 16\nconv 3 2 1 8\nbn\nrelu\nmaxpool 3 2 1\n")
    lin = linearize(g)
    assert lin.input_shape == (1, 16, 16)
    for node in lin.nodes[1:]:
        assert node.op in ("conv", "add")
        assert np.all(node.params["weight"] == 1.0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_enumeration_matches_gradient(seed):
    g = make_graph(random_strided_spec(np.random.default_rng(seed)))
    a = coverage_counts(g, method="enumerate")
    b = coverage_counts(g, method="gradient")
    np.testing.assert_array_equal(a, b)


def test_unknown_coverage_method():
    g = make_graph("name c\ninput 1 8 8\nconv 3 1 1 1\n")
    with pytest.raises(ValueError):
        coverage_counts(g, method="guess")


def test_structure_only_graph_gives_same_trf():
    spec = resolve_spec("resnet50")
    bare = build_graph(spec, with_params=False)
    assert all(not n.params for n in bare.nodes)
    assert compute_all_trf(bare) == compute_all_trf(build_graph(spec))
