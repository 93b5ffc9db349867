import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from casemil import tensor as T
from casemil.tensor import Parameter, ShapeError, Tensor


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


def grads_of(loss, *xs):
    for x in xs:
        x.retain_grad = True
    T.backward(loss)
    return [x.grad for x in xs]


# ---------------------------------------------------------------- forward values

def test_matmul_shapes_and_values():
    a = Tensor(np.arange(6.0).reshape(2, 3))
    b = Tensor(np.ones((3, 4)))
    out = T.matmul(a, b)
    assert out.shape == (2, 4)
    assert np.array_equal(out.data, np.array([[3.0] * 4, [12.0] * 4]))


def test_matmul_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError) as exc:
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    assert "matmul" in str(exc.value)
    assert "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)


def test_add_rejects_incompatible_shapes():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_softmax_of_equal_logits_is_uniform():
    out = T.softmax(Tensor(np.zeros((2, 5))), axis=1)
    assert np.allclose(out.data, 0.2, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 6), elements=st.floats(-50, 50)))
def test_softmax_is_a_distribution(x):
    out = T.softmax(Tensor(x), axis=1).data
    assert np.all(out >= 0)
    assert np.allclose(out.sum(axis=1), 1.0, atol=1e-12)


def test_sigmoid_is_stable_for_large_inputs():
    out = T.sigmoid(Tensor(np.array([-1000.0, 0.0, 1000.0]))).data
    assert np.all(np.isfinite(out))
    assert out[1] == 0.5 and out[0] < 1e-300 + 1e-12 and out[2] == 1.0


def test_max_picks_first_of_ties_for_gradient():
    x = leaf([2.0, 5.0, 5.0])
    (g,) = grads_of(T.max_(x), x)
    assert np.array_equal(g, [0.0, 1.0, 0.0])


def test_sum_of_product_gradient():
    a, b = leaf([1.0, 2.0]), leaf([3.0, 4.0])
    ga, gb = grads_of(T.sum_(a * b), a, b)
    assert np.array_equal(ga, [3.0, 4.0])
    assert np.array_equal(gb, [1.0, 2.0])


def test_topk_descending_with_low_index_ties():
    x = Tensor(np.array([[1.0, 3.0, 3.0, 2.0]]))
    assert np.array_equal(T.argtopk(x.data, 2, axis=1), [[1, 2]])
    assert np.array_equal(T.topk(x, 3, axis=1).data, [[3.0, 3.0, 2.0]])


def test_topk_rejects_k_larger_than_axis():
    with pytest.raises(ValueError):
        T.topk(Tensor(np.ones((1, 3))), 4, axis=1)


def test_concat_then_slice_is_bit_exact():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 5))
    out = T.concat([Tensor(a), Tensor(b)], axis=1)
    assert np.array_equal(out[:, :3].data, a)
    assert np.array_equal(out[:, 3:].data, b)


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ho, wo = (7 + 2 - 3) // 2 + 1, (6 + 2 - 3) // 2 + 1
    ref = np.zeros((2, 4, ho, wo))
    for n in range(2):
        for o in range(4):
            for i in range(ho):
                for j in range(wo):
                    ref[n, o, i, j] = np.sum(xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o])
    assert np.allclose(out, ref, atol=1e-12)


def test_apply_dispatch_matches_direct_calls():
    x = Tensor(np.array([[1.0, -2.0, 3.0]]))
    assert np.array_equal(T.apply("relu", [x]).data, T.relu(x).data)
    assert np.array_equal(T.apply("softmax", [x], {"axis": 1}).data, T.softmax(x, axis=1).data)
    with pytest.raises(ValueError):
        T.apply("nope", [x])


# ---------------------------------------------------------------- backward semantics

def test_backward_requires_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(ValueError):
        T.backward(x * 2.0)


def test_gradients_accumulate_over_shared_subgraph():
    x = leaf([3.0])
    y = x * x + x  # dy/dx = 2x + 1
    (g,) = grads_of(T.sum_(y), x)
    assert np.array_equal(g, [7.0])


def test_unused_parameter_gets_no_grad():
    p = Parameter(np.ones(2), "p", "heads")
    q = Parameter(np.ones(2), "q", "heads")
    T.backward(T.sum_(p * 3.0))
    assert np.array_equal(p.grad, [3.0, 3.0])
    assert q.grad is None


def test_constant_tensors_never_receive_grad():
    c = Tensor(np.ones(3))
    p = Parameter(np.ones(3), "p", "heads")
    T.backward(T.sum_(c * p))
    assert c.grad is None


def test_no_grad_records_nothing():
    p = Parameter(np.ones(2), "p", "heads")
    with T.no_grad():
        out = T.sum_(p * 2.0)
    assert not out.requires_grad


def test_index_gradient_accumulates_repeated_entries():
    x = leaf(np.arange(4.0))
    (g,) = grads_of(T.sum_(x[[0, 2, 2]]), x)
    assert np.array_equal(g, [1.0, 0.0, 2.0, 0.0])


# ---------------------------------------------------------------- finite differences

def test_grad_check_sum_of_squares():
    x = Tensor(np.array([1.0, -2.0]))
    err = T.grad_check(lambda t: T.sum_(t * t), x, 1e-5)
    assert err < 1e-6


def test_grad_check_restores_input():
    x = Tensor(np.array([0.3, -0.7]))
    before = x.data.copy()
    T.grad_check(lambda t: T.sum_(T.tanh(t)), x, 1e-5)
    assert np.array_equal(x.data, before)
    assert x.grad is None and not x.requires_grad


def test_grad_check_reports_non_finite_entry():
    x = Tensor(np.array([1.0, 0.0]))
    with pytest.raises(FloatingPointError, match=r"\(1,\)"):
        T.grad_check(lambda t: T.sum_(T.log(t)), x, 1e-5)


def test_grad_check_detects_a_wrong_gradient():
    x = Tensor(np.array([0.2, -0.4, 0.9]))
    with T.inject_fault("tanh", 1.5):
        err = T.grad_check(lambda t: T.sum_(T.tanh(t)), x, 1e-5)
    assert err > 0.1


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-1, 1)))
def test_grad_check_smooth_composite(x):
    w = np.linspace(0.5, 1.5, 12).reshape(3, 4)
    f = lambda t: T.sum_(T.softmax(T.tanh(t) * w, axis=1) * T.sigmoid(t))  # noqa: E731
    assert T.grad_check(f, Tensor(x), 1e-5) < 1e-4


def test_gated_attention_pooling_grad_check():
    from casemil.nn import AttentionBlock, ComponentRegistry

    rng = np.random.default_rng(3)
    reg = ComponentRegistry()
    block = AttentionBlock(reg, "att", "image_att", 5, 6, True, rng)
    h = Tensor(rng.standard_normal((1, 3, 5)))

    def pooled(_t):
        a = block.weights(h)
        return T.sum_(T.sum_(T.reshape(a, (1, 3, 1)) * h, axis=1) * np.linspace(-1, 1, 5))

    assert T.grad_check(pooled, h, 1e-5) < 1e-4
    for p in reg.parameters():
        assert T.grad_check(pooled, p, 1e-5) < 1e-4


def test_kink_margins_report_distance_to_relu_kink():
    with T.kink_margins() as log:
        T.relu(Tensor(np.array([0.5, -0.002, 3.0])))
        T.max_(Tensor(np.array([1.0, 0.99, 0.0])))
    margins = dict(log)
    assert margins["relu"] == pytest.approx(0.002)
    assert margins["max"] == pytest.approx(0.01)


# ---------------------------------------------------------------- checkpoint container

def test_parameter_container_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    params = [Parameter(rng.standard_normal((2, 3)), "a.weight", "global"),
              Parameter(rng.standard_normal(4), "b.bias", "heads"),
              Parameter(np.array(1.5), "scalar", "local")]
    path = tmp_path / "p.prm"
    T.save_parameters(params, path)
    back = T.load_parameters(path)
    assert [p.name for p in back] == [p.name for p in params]
    assert [p.component_id for p in back] == [p.component_id for p in params]
    for a, b in zip(params, back):
        assert a.data.shape == b.data.shape
        assert a.data.tobytes() == b.data.tobytes()
    assert (tmp_path / "p.prm.index").read_text().splitlines() == ["a.weight", "b.bias", "scalar"]


def test_parameter_container_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.prm"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        T.load_parameters(path)
