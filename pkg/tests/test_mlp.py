import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from contractify.nnet.graph import GraphBuilder, eval_graph
from contractify.nnet.mlp import Mlp, WeightFileError, add_mlp, load_weights, save_weights


def test_save_load_round_trip(tmp_path, rng):
    net = Mlp.init([2, 5, 3, 1], act="relu", rng=rng)
    path = tmp_path / "net.json"
    save_weights(net, path)
    back = load_weights(path)
    for a, b in zip(net.layers, back.layers):
        assert np.array_equal(a.w, b.w) and np.array_equal(a.b, b.b) and a.act == b.act
    save_weights(back, tmp_path / "again.json")
    assert (tmp_path / "again.json").read_bytes() == path.read_bytes()


def test_mismatched_dims_name_the_layer(tmp_path):
    obj = {"input_dim": 2, "layers": [
        {"w": [[1.0, 0.0], [0.0, 1.0]], "b": [0.0, 0.0], "act": "relu"},
        {"w": [[1.0, 2.0, 3.0]], "b": [0.0], "act": "id"},
    ]}
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(obj))
    with pytest.raises(WeightFileError, match="layer 1"):
        load_weights(path)


def test_nan_rejected(tmp_path):
    path = tmp_path / "nan.json"
    path.write_text('{"input_dim": 1, "layers": [{"w": [[NaN]], "b": [0.0], "act": "id"}]}')
    with pytest.raises(WeightFileError, match="NaN"):
        load_weights(path)


def test_unknown_activation_rejected():
    obj = {"input_dim": 1, "layers": [{"w": [[1.0]], "b": [0.0], "act": "gelu"}]}
    with pytest.raises(WeightFileError, match="layer 0"):
        Mlp.from_json(obj)


@given(st.integers(0, 10_000), st.sampled_from(["relu", "tanh", "id"]))
def test_graph_matches_direct_evaluation(seed, act):
    rng = np.random.default_rng(seed)
    net = Mlp.init([3, 6, 2], act=act, rng=rng)
    x = rng.normal(size=(5, 3))
    for prefix in (None, "net"):
        b = GraphBuilder()
        g = b.build(add_mlp(b, b.input(3), net, prefix=prefix))
        p = None if prefix is None else net.flat()
        np.testing.assert_allclose(eval_graph(g, x, p), net(x), rtol=1e-12, atol=1e-12)


def test_flat_round_trip(rng):
    net = Mlp.init([2, 4, 1], rng=rng)
    theta = rng.normal(size=net.n_params)
    assert np.array_equal(net.with_flat(theta).flat(), theta)
