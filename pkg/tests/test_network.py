import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import _fd
from altm import network as nw
from altm.errors import ConflictError, ModeError, NumericalError, ParameterError, ShapeError, UsageError
from altm.linalg import make_rng
from altm.losses import CROSS_ENTROPY, L2_DISTILL


def identity_net(d, layers=1):
    return nw.Network([(np.eye(d), np.zeros((d, 1)))] * layers, {"out": (np.eye(d), np.zeros((d, 1)))})


def test_identity_network_passes_input():
    x = make_rng(0).standard_normal((4, 3))
    assert np.array_equal(nw.forward(identity_net(4, 2), x, ["out"])[0]["out"], x)


def test_zero_weights_zero_logits():
    net = nw.Network([(np.zeros((3, 4)), np.zeros((3, 1)))], {"h": (np.zeros((2, 3)), np.zeros((2, 1)))},
                     "tanh")
    assert not nw.forward(net, make_rng(1).standard_normal((4, 5)), ["h"])[0]["h"].any()


def test_two_layer_linear_factorization():
    rng = make_rng(2)
    net = nw.Network.build(5, [6, 4], {"h": 3}, "linear", 0.5, rng)
    x = rng.standard_normal((5, 7))
    (w1, _), (w2, _) = net.trunk
    wh = net.heads["h"][0]
    out = nw.forward(net, x, ["h"])[0]["h"]
    assert np.max(np.abs(out - wh @ w2 @ w1 @ x)) <= 1e-12
    m = nw.end_to_end_map(net, "h")
    assert np.max(np.abs(m @ x - out)) <= 1e-12


def test_end_to_end_map_cases():
    rng = make_rng(3)
    net = nw.Network.build(4, [5], {"h": 2}, "linear", 0.3, rng)
    assert np.max(np.abs(nw.end_to_end_map(net, "h") - net.heads["h"][0] @ net.trunk[0][0])) == 0
    assert np.max(np.abs(nw.end_to_end_map(net, "h") - nw.forward(net, np.eye(4), ["h"])[0]["h"])) <= 1e-12
    assert np.array_equal(nw.end_to_end_map(identity_net(3, 2), "out"), np.eye(3))
    with pytest.raises(ModeError):
        nw.end_to_end_map(nw.Network.build(4, [5], {"h": 2}, "tanh", 0.3, rng), "h")


def test_zero_upstream_zero_gradients():
    rng = make_rng(4)
    net = nw.Network.build(3, [4, 4], {"a": 2, "b": 3}, "tanh", 0.5, rng)
    logits, cache = nw.forward(net, rng.standard_normal((3, 5)), ["a", "b"])
    g = nw.backward(net, cache, {h: np.zeros_like(v) for h, v in logits.items()})
    assert all(not arr.any() for _, arr in g.items())


def test_fd_three_layer_tanh_two_heads():
    net, x, terms = _fd.random_problem(11, "tanh", 3, 2, [CROSS_ENTROPY, L2_DISTILL])
    assert _fd.max_rel_error(_fd.analytic(net, x, terms), _fd.numeric(net, x, terms)) <= 1e-5


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from(["linear", "tanh", "relu"]), st.integers(1, 3),
       st.integers(1, 2))
def test_fd_property(seed, act, depth, n_heads):
    net, x, terms = _fd.random_problem(seed, act, depth, n_heads, [L2_DISTILL, CROSS_ENTROPY])
    assert _fd.max_rel_error(_fd.analytic(net, x, terms), _fd.numeric(net, x, terms)) <= 1e-5


def test_head_additivity():
    rng = make_rng(5)
    net = nw.Network.build(3, [4], {"a": 2, "b": 2}, "tanh", 0.5, rng)
    x = rng.standard_normal((3, 6))
    g, gp = rng.standard_normal((2, 6)), rng.standard_normal((2, 6))

    def trunk_grad(up):
        _, cache = nw.forward(net, x, ["a", "b"])
        return nw.backward(net, cache, up).trunk

    joint = trunk_grad({"a": g, "b": gp})
    ga, gb = trunk_grad({"a": g, "b": 0 * gp}), trunk_grad({"a": 0 * g, "b": gp})
    for (jw, jb), (aw, ab), (bw, bb) in zip(joint, ga, gb):
        assert np.max(np.abs(jw - aw - bw)) <= 1e-12
        assert np.max(np.abs(jb - ab - bb)) <= 1e-12


def test_cache_single_use_and_stale():
    rng = make_rng(6)
    net = nw.Network.build(2, [3], {"a": 2}, "linear", 0.5, rng)
    x = rng.standard_normal((2, 4))
    logits, cache = nw.forward(net, x, ["a"])
    g = nw.backward(net, cache, {"a": logits["a"]})
    with pytest.raises(UsageError):
        nw.backward(net, cache, {"a": logits["a"]})
    logits, cache = nw.forward(net, x, ["a"])
    nw.sgd_step(net, g, 0.1)
    with pytest.raises(UsageError):
        nw.backward(net, cache, {"a": logits["a"]})


def test_sgd_scalar_arithmetic():
    net = nw.Network([(np.array([[1.0]]), np.zeros((1, 1)))], {"h": (np.array([[1.0]]), np.zeros((1, 1)))})
    g = nw.Gradients([(np.array([[2.0]]), np.zeros((1, 1)))], {"h": (np.zeros((1, 1)), np.zeros((1, 1)))})
    nw.sgd_step(net, g, 0.1)
    assert net.trunk[0][0][0, 0] == pytest.approx(0.8, abs=1e-15)


def test_sgd_zero_grads_fixed_point():
    rng = make_rng(7)
    net = nw.Network.build(3, [4], {"a": 2}, "tanh", 0.5, rng)
    before = nw.parameter_digest(net)
    zero = nw.Gradients([(np.zeros_like(w), np.zeros_like(b)) for w, b in net.trunk],
                        {h: (np.zeros_like(w), np.zeros_like(b)) for h, (w, b) in net.heads.items()})
    nw.sgd_step(net, zero, 0.5)
    assert nw.parameter_digest(net) == before


def test_sgd_reduces_quadratic():
    # loss 1/2 (theta - a)^2 through a 1x1 linear net with unit head
    a = 3.0
    net = nw.Network([(np.array([[0.5]]), np.zeros((1, 1)))], {"h": (np.array([[1.0]]), np.zeros((1, 1)))})
    x = np.ones((1, 1))

    def loss():
        return 0.5 * (nw.forward(net, x, ["h"])[0]["h"][0, 0] - a) ** 2

    before = loss()
    logits, cache = nw.forward(net, x, ["h"])
    nw.sgd_step(net, nw.backward(net, cache, {"h": logits["h"] - a}), 0.01)
    assert loss() < before


def test_sgd_errors():
    rng = make_rng(8)
    net = nw.Network.build(3, [4], {"a": 2}, "linear", 0.5, rng)
    logits, cache = nw.forward(net, rng.standard_normal((3, 2)), ["a"])
    g = nw.backward(net, cache, {"a": logits["a"]})
    with pytest.raises(ParameterError):
        nw.sgd_step(net, g, 0.0)
    with pytest.raises(UsageError):
        nw.sgd_step(nw.snapshot_teacher(net), g, 0.1)
    before = nw.parameter_digest(net)
    g.trunk[0][0][0, 0] = np.nan
    with pytest.raises(NumericalError):
        nw.sgd_step(net, g, 0.1)
    assert nw.parameter_digest(net) == before


def test_snapshot_immutable_under_student_training():
    rng = make_rng(9)
    net = nw.Network.build(3, [5], {"a": 2}, "tanh", 0.5, rng)
    snap = nw.snapshot_teacher(net)
    digest = nw.parameter_digest(snap)
    x = rng.standard_normal((3, 8))
    before = snap.logits(x, ["a"])["a"]
    ref = nw.forward(net, x, ["a"])[0]["a"]
    assert np.array_equal(before, ref)
    for _ in range(100):
        logits, cache = nw.forward(net, x, ["a"])
        nw.sgd_step(net, nw.backward(net, cache, {"a": logits["a"]}), 0.05)
    assert nw.parameter_digest(snap) == digest
    assert np.array_equal(snap.logits(x, ["a"])["a"], before)
    with pytest.raises(ValueError):
        next(iter(snap.parameters()))[1][0, 0] = 1.0


def test_snapshot_of_snapshot():
    net = nw.Network.build(3, [4], {"a": 2}, "tanh", 0.5, make_rng(10))
    s1 = nw.snapshot_teacher(net)
    s2 = nw.snapshot_teacher(s1)
    assert nw.parameter_digest(s1) == nw.parameter_digest(s2)


def test_attach_head():
    rng = make_rng(11)
    net = nw.Network.build(3, [4], {"a": 2}, "tanh", 0.5, rng)
    x = rng.standard_normal((3, 5))
    before = nw.forward(net, x, ["a"])[0]["a"]
    nw.attach_head(net, "b", 6, 1e-12, rng)
    assert net.head_ids == ("a", "b")
    assert np.array_equal(nw.forward(net, x, ["a"])[0]["a"], before)
    assert np.all(np.abs(nw.forward(net, x, ["b"])[0]["b"]) < 1e-6)
    with pytest.raises(ConflictError):
        nw.attach_head(net, "b", 2, 0.1, rng)


def test_structure_validation():
    with pytest.raises(ShapeError):
        nw.Network([(np.ones((3, 2)), np.zeros((3, 1))), (np.ones((2, 4)), np.zeros((2, 1)))], {})
    with pytest.raises(ShapeError):
        nw.Network([(np.ones((3, 2)), np.zeros((3, 1)))], {"h": (np.ones((2, 4)), np.zeros((2, 1)))})
    with pytest.raises(ShapeError):
        nw.forward(identity_net(3), np.ones((4, 1)), ["out"])


def test_save_load_roundtrip(tmp_path):
    rng = make_rng(12)
    net = nw.Network.build(3, [4, 2], {"a": 2, "b": 5}, "relu", 0.5, rng)
    for _, b in net.trunk:
        b += rng.standard_normal(b.shape)
    path = tmp_path / "net.json"
    nw.save_network(net, path)
    back = nw.load_network(path)
    assert nw.parameter_digest(back) == nw.parameter_digest(net)
    assert back.activation == "relu"
    doc = json.loads(path.read_text())
    assert doc["format"] == "altm-network" and doc["version"] == 1
    doc["version"] = 2
    with pytest.raises(ParameterError):
        nw.from_dict(doc)
