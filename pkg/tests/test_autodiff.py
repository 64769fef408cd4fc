"""Engine-level contracts: forward/backward, grad_check, optimizers, checkpoints."""

import numpy as np
import pytest

import binadapt as ba
from binadapt.autodiff import GraphError
from binadapt.layers import bce_node, conv_node, grl_node, relu_node, sigmoid_node

from reference import direct_conv2d, fd_loss_gradient, max_rel_err


def test_forward_identity_graph():
    g = ba.Graph()
    x = g.input("x")
    g.set_output("y", g.identity(x))
    out = ba.forward(g, {"x": [1.0, 2.0, 3.0]})
    assert np.array_equal(out["y"].data, [1.0, 2.0, 3.0])


def test_forward_sigmoid_zero():
    g = ba.Graph()
    x = g.input("x")
    g.set_output("y", g.add_node("sigmoid", (x,)))
    assert ba.forward(g, {"x": [0.0]})["y"].data[0] == 0.5


def test_forward_relu_conv_matches_direct_oracle():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 1, 4, 4))
    w = rng.normal(size=(2, 1, 3, 3))
    b = rng.normal(size=(2,))
    spec = ba.ConvSpec(1, 2, (3, 3), (1, 1), (1, 1, 1, 1))

    g = ba.Graph()
    xn = g.input("x")
    wn = g.param("w", w)
    bn = g.param("b", b)
    g.set_output("y", relu_node(g, conv_node(g, xn, wn, bn, spec)))
    got = ba.forward(g, {"x": x})["y"].data

    want = np.maximum(direct_conv2d(x, w, b, (1, 1), (1, 1, 1, 1)), 0.0)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-13)


def test_backward_sum_gives_ones():
    g = ba.Graph()
    p = g.param("p", [4.0, -1.0, 2.0])
    g.set_output("loss", g.sum(p))
    ba.forward(g)
    grads = ba.backward(g, "loss")
    assert np.array_equal(grads["p"].data, [1.0, 1.0, 1.0])
    assert np.array_equal(g.params["p"].grad, [1.0, 1.0, 1.0])


def test_backward_through_reversal_flips_and_scales():
    g = ba.Graph()
    p = g.param("p", [3.0, 7.0])
    g.set_output("loss", g.sum(grl_node(g, p, 0.1)))
    ba.forward(g)
    assert np.array_equal(ba.backward(g, "loss")["p"].data, [-0.1, -0.1])


def test_backward_bce_sigmoid_conv_matches_finite_differences():
    rng = np.random.default_rng(11)
    g = ba.Graph()
    xn = g.input("x")
    wn = g.param("w", rng.normal(size=(1, 1, 3, 3)) * 0.5)
    bn = g.param("b", np.zeros(1))
    spec = ba.ConvSpec(1, 1, (3, 3), (1, 1), (1, 1, 1, 1))
    pred = sigmoid_node(g, conv_node(g, xn, wn, bn, spec))
    tn = g.input("t")
    g.set_output("loss", bce_node(g, pred, tn))

    bind = {"x": rng.normal(size=(1, 1, 4, 4)), "t": (rng.random((1, 1, 4, 4)) > 0.5).astype(float)}
    ba.forward(g, bind)
    analytic = ba.backward(g, "loss")["w"].data

    def eval_loss():
        return float(ba.forward(g, bind)["loss"].data[0])

    numeric = fd_loss_gradient(eval_loss, g.params["w"].data)
    assert max_rel_err(analytic, numeric) < 1e-4


def test_grad_check_linear_graph_is_exact():
    rng = np.random.default_rng(5)
    g = ba.Graph()
    xn = g.input("x")
    wn = g.param("w", rng.normal(size=(2, 1, 2, 2)))
    bn = g.param("b", rng.normal(size=(2,)))
    spec = ba.ConvSpec(1, 2, (2, 2), (1, 1), (0, 0, 0, 0))
    g.set_output("loss", g.sum(conv_node(g, xn, wn, bn, spec)))
    bind = {"x": rng.normal(size=(1, 1, 3, 3))}
    assert ba.grad_check(g, "loss", bind, "w") < 1e-8
    assert ba.grad_check(g, "loss", bind, "b") < 1e-8


def test_grad_check_rejects_bad_epsilon():
    g = ba.Graph()
    p = g.param("p", [1.0])
    g.set_output("loss", g.sum(p))
    with pytest.raises(GraphError):
        ba.grad_check(g, "loss", {}, "p", epsilon=0.1)


def test_gradient_accumulation_sums_both_paths():
    # p feeds two consumers; its gradient must be the sum of both path gradients
    p0 = np.array([0.3, -0.7, 1.2])
    g = ba.Graph()
    p = g.param("p", p0)
    two_path = g.add(sigmoid_node(g, p), relu_node(g, p))
    g.set_output("loss", g.sum(two_path))
    ba.forward(g)
    got = ba.backward(g, "loss")["p"].data
    sig = 1.0 / (1.0 + np.exp(-p0))
    want = sig * (1.0 - sig) + (p0 > 0)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-15)


def test_forward_is_pure_given_seed():
    g = ba.Graph()
    x = g.input("x")
    g.set_output("y", g.add_node("dropout", (x,), rate=0.5))
    bind = {"x": np.arange(12.0).reshape(3, 4)}
    a = ba.forward(g, bind, training=True, rng=np.random.default_rng(9))["y"].data
    b = ba.forward(g, bind, training=True, rng=np.random.default_rng(9))["y"].data
    assert a.tobytes() == b.tobytes()


def test_forward_errors():
    g = ba.Graph()
    x = g.input("x")
    y = g.input("y")
    g.set_output("s", g.add(x, y))
    with pytest.raises(GraphError, match="not bound"):
        ba.forward(g, {"x": [1.0]})
    with pytest.raises(GraphError, match="add"):
        ba.forward(g, {"x": [1.0], "y": [1.0, 2.0]})
    with pytest.raises(GraphError, match="non-finite"):
        ba.forward(g, {"x": [np.nan], "y": [1.0]})


def test_backward_errors():
    g = ba.Graph()
    p = g.param("p", [1.0, 2.0])
    g.set_output("v", g.identity(p))
    with pytest.raises(GraphError, match="before forward"):
        ba.backward(g, "v")
    ba.forward(g)
    with pytest.raises(GraphError, match="not scalar"):
        ba.backward(g, "v")


# ---------------------------------------------------------------------------
# optimizer

def test_sgd_single_step():
    state = ba.sgd(lr=0.1)
    params = {"p": ba.Tensor([1.0])}
    ba.optimizer_step(state, params, {"p": np.array([1.0])})
    assert params["p"].data[0] == pytest.approx(0.9, abs=0)


def test_zero_gradient_is_fixed_point():
    for state in (ba.sgd(0.1), ba.adam(1e-3)):
        params = {"p": ba.Tensor([2.5, -1.0])}
        ba.optimizer_step(state, params, {"p": np.zeros(2)})
        assert np.array_equal(params["p"].data, [2.5, -1.0])


def test_adam_single_step_matches_hand_evaluation():
    # one step, scalar: m=(1-b1)g, v=(1-b2)g^2, mhat=g, vhat=g^2,
    # update = lr * g / (|g| + eps)
    lr, g_val = 1e-3, 0.7
    state = ba.adam(lr=lr)
    params = {"p": ba.Tensor([1.0])}
    ba.optimizer_step(state, params, {"p": np.array([g_val])})
    expected = 1.0 - lr * g_val / (np.sqrt(g_val**2) + 1e-8)
    assert params["p"].data[0] == pytest.approx(expected, abs=1e-15)


def test_optimizer_shape_mismatch_errors():
    state = ba.sgd(0.1)
    with pytest.raises(GraphError, match="shape"):
        ba.optimizer_step(state, {"p": ba.Tensor([1.0])}, {"p": np.zeros(2)})


# ---------------------------------------------------------------------------
# checkpoints

def test_checkpoint_roundtrip_is_bit_exact():
    rng = np.random.default_rng(2)
    params = {
        "enc.w": rng.normal(size=(4, 3, 3, 3)),
        "enc.b": rng.normal(size=(4,)),
        "odd/name with spaces": rng.normal(size=(2, 5)),
    }
    blob = ba.write_checkpoint(params)
    assert blob.startswith(b"BINADAPT1")
    back = ba.read_checkpoint(blob)
    assert list(back) == list(params)
    for name in params:
        assert back[name].tobytes() == params[name].tobytes()
        assert back[name].shape == params[name].shape


def test_checkpoint_bad_magic_and_truncation():
    with pytest.raises(GraphError, match="magic"):
        ba.read_checkpoint(b"NOTMAGIC!")
    blob = ba.write_checkpoint({"p": np.ones(3)})
    with pytest.raises(GraphError, match="truncated"):
        ba.read_checkpoint(blob[:-4])


def test_checkpoint_file_roundtrip(tmp_path):
    params = {"w": np.arange(6.0).reshape(2, 3)}
    path = tmp_path / "model.ckpt"
    ba.save_checkpoint(path, params)
    back = ba.load_checkpoint(path)
    assert back["w"].tobytes() == params["w"].tobytes()
