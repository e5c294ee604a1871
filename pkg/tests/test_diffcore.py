import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from prospect import diffcore as dc


def evaluate(fn, *arrays, precision="double"):
    g = dc.Graph(precision)
    return fn(*[g.constant(a) for a in arrays]).value


def grads_of(fn, precision="double", **params):
    g = dc.Graph(precision)
    bound = g.bind(params)
    return dc.backward(g, fn(**bound))


# -- forward examples -----------------------------------------------------------------


def test_add_elementwise():
    assert np.array_equal(evaluate(lambda a, b: a + b, [1.0, 2.0], [3.0, 4.0]), [4.0, 6.0])


def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(3, 3))
    assert np.array_equal(evaluate(lambda i, x: i @ x, np.eye(3), a), a)


def test_softmax_uniform():
    np.testing.assert_allclose(evaluate(dc.softmax, np.zeros(3)), np.full(3, 1 / 3), atol=1e-15)


def test_shape_mismatch_names_shapes():
    g = dc.Graph("double")
    with pytest.raises(dc.ShapeError, match=r"\(2, 3\).*\(4,\)|\(4,\).*\(2, 3\)"):
        g.constant(np.zeros((2, 3))) + g.constant(np.zeros(4))
    with pytest.raises(dc.ShapeError):
        g.constant(np.zeros((2, 3))) @ g.constant(np.zeros((2, 3)))


def test_unknown_primitive_rejected():
    g = dc.Graph("double")
    with pytest.raises(KeyError):
        g.apply("cosine", [g.constant(np.zeros(2))])


def test_mixed_graphs_rejected():
    a, b = dc.Graph("double"), dc.Graph("double")
    with pytest.raises(ValueError):
        a.constant(np.ones(2)) + b.constant(np.ones(2))


def test_tensor_data_is_row_major():
    g = dc.Graph("double")
    t = g.constant(np.arange(6.0).reshape(2, 3))
    assert t.shape == (2, 3)
    assert np.array_equal(t.data, np.arange(6.0))
    assert t.data.size == np.prod(t.shape)


def test_graph_nodes_topologically_ordered():
    g = dc.Graph("double")
    x = g.parameter("x", np.ones(3))
    y = dc.sum_(dc.tanh(x * 2.0) + x)
    assert all(all(j < i for j in node.inputs) for i, node in enumerate(g.nodes))
    assert y.index == len(g.nodes) - 1


# -- backward examples ----------------------------------------------------------------


def test_square_gradient():
    assert grads_of(lambda x: x * x, x=np.array(3.0))["x"] == pytest.approx(6.0)


def test_relu_sum_gradient():
    g = grads_of(lambda x: dc.sum_(dc.relu(x)), x=np.array([-1.0, 2.0]))
    assert np.array_equal(g["x"], [0.0, 1.0])


def test_nonscalar_loss_rejected():
    g = dc.Graph("double")
    x = g.parameter("x", np.ones(3))
    with pytest.raises(dc.ShapeError):
        dc.backward(g, x * 2.0)


def test_fanout_accumulates():
    g = grads_of(lambda x: dc.sum_(x * x + x), x=np.array([1.0, -2.0]))
    assert np.array_equal(g["x"], [3.0, -3.0])


def test_unused_parameter_gets_zero_gradient():
    g = grads_of(lambda x, y: dc.sum_(x), x=np.ones(2), y=np.ones((2, 2)))
    assert np.array_equal(g["y"], np.zeros((2, 2)))


def test_stop_gradient_blocks_flow():
    g = grads_of(lambda x: dc.sum_(x * dc.stop_gradient(x)), x=np.array([2.0, 3.0]))
    assert np.array_equal(g["x"], [2.0, 3.0])


def test_two_layer_composition_matches_finite_differences():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(5, 4))
    params = {"w1": rng.normal(size=(4, 6)), "b1": rng.normal(size=6), "w2": rng.normal(size=(6, 2))}

    def build(g, p):
        return dc.sum_(dc.tanh(g.constant(x) @ p["w1"] + p["b1"]) @ p["w2"])

    report = dc.grad_check(build, params, tolerance=1e-5)
    assert report.passed, report.lines()


# -- per-primitive finite-difference invariant ----------------------------------------

UNARY = {
    "negate": lambda x: -x,
    "relu": dc.relu,
    "tanh": dc.tanh,
    "sigmoid": dc.sigmoid,
    "exp": dc.exp,
    "log": lambda x: dc.log(dc.exp(x) + 0.5),
    "abs": dc.abs_,
    "clip": lambda x: dc.clip(x, -0.7, 0.9),
    "sum_axis": lambda x: dc.sum_(x, axis=-1, keepdims=True),
    "mean_axis": lambda x: dc.mean(x, axis=0),
    "max_axis": lambda x: dc.max_(x, axis=-1),
    "min_axis": lambda x: dc.min_(x, axis=0),
    "softmax": lambda x: dc.softmax(x, axis=-1),
    "slice": lambda x: x[..., 1:],
    "fancy_slice": lambda x: x[:, [0, 0, 1]],
    "reshape": lambda x: x.reshape(-1),
    "transpose": lambda x: dc.transpose(x, (1, 0)),
    "broadcast": lambda x: dc.broadcast(x.reshape(1, *x.shape), (3, *x.shape)),
    "concat": lambda x: dc.concat([x, x * 2.0], axis=1),
}
BINARY = {
    "add": lambda a, b: a + b,
    "subtract": lambda a, b: a - b,
    "multiply": lambda a, b: a * b,
    "divide": lambda a, b: a / (b * b + 1.0),
    "matmul": lambda a, b: a @ dc.transpose(b, (1, 0)),
    "broadcast_add": lambda a, b: a + b[0],
}


def _away_from_kinks(rng, shape):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < 0.05, 0.3, x)


@settings(max_examples=12, deadline=None)
@given(op=st.sampled_from(sorted(UNARY)), rows=st.integers(2, 4), cols=st.integers(2, 5), seed=st.integers(0, 10**6))
def test_unary_primitive_gradients(op, rows, cols, seed):
    rng = np.random.default_rng(seed)
    x = _away_from_kinks(rng, (rows, cols))
    if op == "clip":
        x = np.where(np.abs(x + 0.7) < 0.05, -0.5, np.where(np.abs(x - 0.9) < 0.05, 0.5, x))
    probe_shape = evaluate(UNARY[op], x).shape
    probe = rng.normal(size=probe_shape)
    report = dc.grad_check(lambda g, p: dc.sum_(UNARY[op](p["x"]) * probe), {"x": x}, tolerance=1e-5)
    assert report.passed, (op, report.lines())


@settings(max_examples=12, deadline=None)
@given(op=st.sampled_from(sorted(BINARY)), rows=st.integers(2, 4), cols=st.integers(2, 5), seed=st.integers(0, 10**6))
def test_binary_primitive_gradients(op, rows, cols, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(rows, cols)), rng.normal(size=(rows, cols))
    probe = rng.normal(size=evaluate(BINARY[op], a, b).shape)
    report = dc.grad_check(lambda g, p: dc.sum_(BINARY[op](p["a"], p["b"]) * probe), {"a": a, "b": b},
                           tolerance=1e-5)
    assert report.passed, (op, report.lines())


@settings(max_examples=10, deadline=None)
@given(stride=st.sampled_from([1, 2]), size=st.integers(3, 7), cin=st.integers(1, 3), cout=st.integers(1, 3),
       seed=st.integers(0, 10**6))
def test_conv_gradients(stride, size, cin, cout, seed):
    rng = np.random.default_rng(seed)
    params = {"x": rng.normal(size=(2, cin, size, size)), "w": rng.normal(size=(cout, cin, 5, 5))}
    out = evaluate(lambda x, w: dc.conv2d(x, w, stride, 2), params["x"], params["w"])
    probe = rng.normal(size=out.shape)
    report = dc.grad_check(lambda g, p: dc.sum_(dc.conv2d(p["x"], p["w"], stride, 2) * probe), params)
    assert report.passed, report.lines()


@settings(max_examples=10, deadline=None)
@given(size=st.integers(2, 5), cin=st.integers(1, 3), cout=st.integers(1, 3), seed=st.integers(0, 10**6))
def test_upconv_gradients(size, cin, cout, seed):
    rng = np.random.default_rng(seed)
    params = {"x": rng.normal(size=(2, cin, size, size)), "w": rng.normal(size=(cout, cin, 5, 5))}
    probe = rng.normal(size=(2, cout, 2 * size, 2 * size))
    report = dc.grad_check(lambda g, p: dc.sum_(dc.upconv2d(p["x"], p["w"]) * probe), params)
    assert report.passed, report.lines()


def test_upconv_equals_upsample_then_conv():
    rng = np.random.default_rng(1)
    x, w = rng.normal(size=(2, 3, 4, 5)), rng.normal(size=(2, 3, 5, 5))
    fused = evaluate(dc.upconv2d, x, w)
    plain = evaluate(lambda a, b: dc.conv2d(dc.upsample2(a), b, 1, 2), x, w)
    np.testing.assert_allclose(fused, plain, atol=1e-12)


@pytest.mark.parametrize("stride", [1, 2])
def test_space_to_depth_route_matches_torch(stride):
    # 32x32 maps with fewer output than input channels take the space-to-depth route
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 6, 32, 32))
    w = rng.normal(size=(3, 6, 5, 5))
    wf = dc._s2d_weights(w, stride)
    y = dc._depth_to_space(
        torch.nn.functional.conv2d(torch.from_numpy(dc._space_to_depth(x)), torch.from_numpy(wf), padding=1).numpy(),
        3) if stride == 1 else None
    ref = torch.nn.functional.conv2d(torch.from_numpy(x), torch.from_numpy(w), stride=stride, padding=2).numpy()
    if stride == 1:
        assert dc._use_s2d(x.shape, w.shape, 1, 2)
        np.testing.assert_allclose(y, ref, atol=1e-10)
    np.testing.assert_allclose(evaluate(lambda a, b: dc.conv2d(a, b, stride, 2), x, w), ref, atol=1e-10)


def test_space_to_depth_backward_matches_torch():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 6, 32, 32))
    w = rng.normal(size=(3, 6, 5, 5))
    probe = rng.normal(size=(2, 3, 32, 32))
    ours = grads_of(lambda x, w: dc.sum_(dc.conv2d(x, w, 1, 2) * probe), x=x, w=w)
    tx, tw = torch.tensor(x, requires_grad=True), torch.tensor(w, requires_grad=True)
    (torch.nn.functional.conv2d(tx, tw, padding=2) * torch.from_numpy(probe)).sum().backward()
    np.testing.assert_allclose(ours["x"], tx.grad.numpy(), atol=1e-9)
    np.testing.assert_allclose(ours["w"], tw.grad.numpy(), atol=1e-9)


# -- other invariants -------------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), scale=st.floats(0.1, 50.0))
def test_softmax_sums_to_one(seed, scale):
    x = np.random.default_rng(seed).normal(size=(4, 7)) * scale
    np.testing.assert_allclose(evaluate(dc.softmax, x).sum(axis=-1), 1.0, atol=1e-12)


@pytest.mark.parametrize("precision", ["single", "double"])
def test_forward_is_deterministic(precision):
    rng = np.random.default_rng(5)
    x, w = rng.normal(size=(2, 3, 16, 16)), rng.normal(size=(4, 3, 5, 5))

    def run():
        return evaluate(lambda a, b: dc.softmax(dc.relu(dc.conv2d(a, b, 2, 2)).reshape(2, -1)), x, w, precision=precision)

    assert run().tobytes() == run().tobytes()


def test_forward_outputs_finite_on_extreme_inputs():
    x = np.array([-800.0, 0.0, 800.0])
    for fn in (dc.sigmoid, dc.tanh, dc.softmax):
        assert np.all(np.isfinite(evaluate(fn, x)))


def test_precision_controls_dtype():
    assert evaluate(dc.tanh, np.ones(2), precision="single").dtype == np.float32
    assert evaluate(dc.tanh, np.ones(2), precision="double").dtype == np.float64
    with pytest.raises(ValueError):
        dc.Graph("half")


def test_dead_graph_detected():
    t = dc.Graph("double").constant(np.ones(2))
    with pytest.raises(RuntimeError):
        t.graph


# -- grad_check -----------------------------------------------------------------------


def test_grad_check_linear_layer():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(3, 4))
    report = dc.grad_check(lambda g, p: dc.sum_(dc.tanh(g.constant(x) @ p["w"] + p["b"])),
                           {"w": rng.normal(size=(4, 2)), "b": rng.normal(size=2)}, tolerance=1e-5)
    assert report.passed
    assert set(report.errors) == {"w", "b"}


def test_grad_check_flags_corrupted_gradient():
    rng = np.random.default_rng(7)
    params = {"w": rng.normal(size=(4, 2))}
    x = rng.normal(size=(3, 4))

    def build(g, p):
        return dc.sum_(dc.tanh(g.constant(x) @ p["w"]))

    def corrupted(values):
        g = dc.Graph("double")
        grads = dc.backward(g, build(g, g.bind(values)))
        grads["w"][1, 0] *= 1.01
        return grads

    report = dc.grad_check(build, params, 1e-5, gradient_fn=corrupted, fallback_steps=(1e-6, 1e-3))
    assert not report.passed
    assert report.failures() == ["w"]


def test_relative_error_floor():
    assert dc.relative_error(0.0, 0.0) == 0.0
    assert dc.relative_error(1e-10, 0.0) == pytest.approx(1e-2)
    assert dc.relative_error(2.0, 1.0) == pytest.approx(0.5)


# -- checkpoints ------------------------------------------------------------------------


def _reference_checkpoint(params):
    # independent writer of the documented layout
    out = b"PWT1" + len(params).to_bytes(4, "little")
    for name, arr in params.items():
        raw = name.encode()
        out += len(raw).to_bytes(4, "little") + raw + arr.ndim.to_bytes(4, "little")
        out += b"".join(int(e).to_bytes(4, "little") for e in arr.shape)
        out += np.asarray(arr, dtype="<f4").tobytes()
    return out


def test_checkpoint_layout_and_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    params = {"enc0.w": rng.normal(size=(2, 3, 5, 5)).astype(np.float32), "bias": np.arange(3, dtype=np.float32),
              "scalaré": np.array(1.5, dtype=np.float32)}
    blob = dc.checkpoint_bytes(params)
    assert blob == _reference_checkpoint(params)
    dc.save_checkpoint(params, tmp_path / "a.pwt")
    loaded = dc.load_checkpoint(tmp_path / "a.pwt")
    assert list(loaded) == list(params)
    assert all(np.array_equal(loaded[k], params[k]) for k in params)
    assert dc.checkpoint_bytes(loaded) == blob


@pytest.mark.parametrize("mutate, message", [
    (lambda b: b"PWT2" + b[4:], "magic"),
    (lambda b: b[:-3], "truncated"),
    (lambda b: b + b"\0", "trailing"),
])
def test_checkpoint_corruption_rejected(mutate, message):
    blob = dc.checkpoint_bytes({"w": np.ones((2, 2), np.float32)})
    with pytest.raises(dc.CheckpointError, match=message):
        dc.parse_checkpoint(mutate(blob))


@settings(max_examples=25, deadline=None)
@given(shapes=st.lists(st.lists(st.integers(1, 4), min_size=0, max_size=3), min_size=1, max_size=4),
       seed=st.integers(0, 10**6))
def test_checkpoint_round_trip_is_byte_exact(shapes, seed):
    rng = np.random.default_rng(seed)
    params = {f"p{i}": rng.normal(size=tuple(s)).astype(np.float32) for i, s in enumerate(shapes)}
    blob = dc.checkpoint_bytes(params)
    assert dc.checkpoint_bytes(dc.parse_checkpoint(blob)) == blob
