import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from fairprice.diffengine import (
    DimensionError, ParamStore, Tape, adam_step, backward, grad_check, load_params, save_params,
)
from fairprice.gradsuite import composition_cases, op_cases, run_suite


def _store(**params):
    store = ParamStore()
    for name, value in params.items():
        store.add(name, value, "policy")
    return store


def test_sigmoid_at_zero():
    t = Tape()
    assert t.sigmoid(t.constant(0.0)).value[0, 0] == 0.5


def test_identity_aggregation():
    X = np.arange(12.0).reshape(4, 3)
    t = Tape()
    assert np.array_equal(t.sparse_matmul(sp.identity(4, format="csr"), t.constant(X)).value, X)


def test_masked_softmax_equal_scores_split_evenly():
    pattern = sp.csr_matrix(np.array([[0, 1, 1, 0], [1, 0, 0, 0]], dtype=float))
    t = Tape()
    out = t.row_softmax_masked(pattern, t.constant(np.zeros((pattern.nnz, 1))))
    dense = sp.csr_matrix((out.value[:, 0], pattern.indices, pattern.indptr), shape=pattern.shape).toarray()
    assert np.allclose(dense[0], [0, 0.5, 0.5, 0])
    assert np.allclose(dense[1], [1, 0, 0, 0])


def test_masked_softmax_is_shift_stable():
    pattern = sp.csr_matrix(np.ones((2, 3)))
    t = Tape()
    out = t.row_softmax_masked(pattern, t.constant(np.array([[1000.0], [1001.0], [999.0], [0.0], [0.0], [0.0]])))
    assert np.all(np.isfinite(out.value))
    assert np.allclose(out.value[:3, 0].sum(), 1.0)


def test_shape_mismatch_names_both_shapes():
    t = Tape()
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        t.matmul(t.constant(np.ones((2, 3))), t.constant(np.ones((2, 3))))
    with pytest.raises(DimensionError, match=r"\(2, 1\) and \(3, 1\)"):
        t.add(t.constant(np.ones((2, 1))), t.constant(np.ones((3, 1))))


def test_backward_outer_product():
    x = np.array([[1.0], [-2.0], [3.0]])
    store = _store(W=np.random.default_rng(0).normal(size=(2, 3)))
    t = Tape()
    loss = t.sum_all(t.matmul(t.param(store, "W"), t.constant(x)))
    backward(t, loss)
    assert np.array_equal(store.grads["W"], np.ones((2, 1)) @ x.T)


def test_constant_loss_gives_zero_gradients():
    store = _store(W=np.ones((2, 2)))
    t = Tape()
    t.param(store, "W")
    backward(t, t.sum_all(t.constant(np.ones((3, 3)))))
    assert np.all(store.grads["W"] == 0)


def test_backward_needs_scalar_loss():
    store = _store(W=np.ones((2, 2)))
    t = Tape()
    with pytest.raises(DimensionError, match="1x1"):
        backward(t, t.param(store, "W"))


def test_backward_is_linear():
    rng = np.random.default_rng(1)
    store = _store(W=rng.normal(size=(3, 2)))
    X = rng.normal(size=(4, 3))

    def grads(a, b):
        store.zero_grad()
        t = Tape()
        h = t.matmul(t.constant(X), t.param(store, "W"))
        l1 = t.sum_all(t.sigmoid(h))
        l2 = t.sum_all(t.mul(h, h))
        backward(t, t.add(t.scale(l1, a), t.scale(l2, b)))
        return store.grads["W"].copy()

    g1, g2 = grads(1.0, 0.0), grads(0.0, 1.0)
    assert np.allclose(grads(2.5, -0.7), 2.5 * g1 - 0.7 * g2, atol=1e-10, rtol=0)


def test_adam_first_step():
    store = _store(theta=1.0)
    store.grads["theta"][...] = 1.0
    adam_step(store, "policy", lr=0.001)
    assert store.params["theta"][0, 0] == pytest.approx(1 - 0.001 / (1 + 1e-8), abs=1e-12)
    assert store.grads["theta"][0, 0] == 0.0


def test_adam_zero_gradient_leaves_parameter():
    store = _store(theta=np.array([[0.3, -2.0]]))
    adam_step(store, "policy", lr=0.1, weight_decay=0.0)
    assert np.array_equal(store.params["theta"], [[0.3, -2.0]])


def test_adam_weight_decay_is_coupled():
    # with g = 0, the decayed gradient is wd * theta, so the first step moves by lr in sign(theta)
    store = _store(theta=np.array([[2.0, -3.0]]))
    adam_step(store, "policy", lr=0.01, weight_decay=0.5)
    assert np.allclose(store.params["theta"], [[1.99, -2.99]], atol=1e-9)


def test_adam_groups_are_isolated():
    store = ParamStore()
    store.add("w", np.ones((2, 2)), "policy")
    store.add("a", np.ones((2, 1)), "adversary")
    store.grads["w"][...] = 1.0
    store.grads["a"][...] = 1.0
    before = store.snapshot("adversary")
    adam_step(store, "policy", lr=0.1)
    assert np.array_equal(store.params["a"], before["a"])
    assert np.all(store.grads["a"] == 1.0)
    with pytest.raises(KeyError):
        adam_step(store, "critic", lr=0.1)


def test_grad_check_sigmoid_matmul_chain():
    rng = np.random.default_rng(2)
    store = _store(W1=rng.normal(size=(3, 4)), W2=rng.normal(size=(4, 1)))
    X = rng.normal(size=(5, 3))

    def builder(t, s):
        h = t.sigmoid(t.matmul(t.constant(X), t.param(s, "W1")))
        return t.sum_all(t.sigmoid(t.matmul(h, t.param(s, "W2"))))

    assert grad_check(store, builder).worst < 1e-4


def test_grad_check_tanh_at_zero():
    store = _store(x=0.0)
    t = Tape()
    backward(t, t.tanh_act(t.param(store, "x")))
    assert store.grads["x"][0, 0] == 1.0
    report = grad_check(store, lambda t, s: t.tanh_act(t.param(s, "x")))
    assert report.worst < 1e-8


def test_dropout_rate_zero_matches_no_dropout():
    rng = np.random.default_rng(4)
    store = _store(W=rng.normal(size=(3, 2)))
    X = rng.normal(size=(6, 3))

    def run(with_dropout):
        store.zero_grad()
        t = Tape(training=True, rng=np.random.default_rng(0))
        h = t.matmul(t.constant(X), t.param(store, "W"))
        if with_dropout:
            h = t.dropout(h, 0.0)
        backward(t, t.sum_all(t.tanh_act(h)))
        return store.grads["W"].copy()

    assert np.array_equal(run(True), run(False))


def test_dropout_is_identity_in_eval_and_inverted_in_training():
    X = np.ones((200, 50))
    t = Tape()
    assert np.array_equal(t.dropout(t.constant(X), 0.3).value, X)
    store = _store(x=X)
    t = Tape(training=True, rng=np.random.default_rng(0))
    y = t.dropout(t.param(store, "x"), 0.3).value
    assert set(np.unique(y)) <= {0.0, 1 / 0.7}
    assert y.mean() == pytest.approx(1.0, abs=0.02)


def test_dropout_rate_must_be_below_one():
    t = Tape(training=True, rng=np.random.default_rng(0))
    with pytest.raises(ValueError):
        t.dropout(t.constant(np.ones((2, 2))), 1.0)


@pytest.mark.parametrize("name", sorted(op_cases()))
def test_op_gradients(name):
    store, builder, training = op_cases()[name]
    report = grad_check(store, builder, training=training)
    assert report.passed, report.max_rel_error


@pytest.mark.parametrize("name", sorted(composition_cases()))
def test_composition_gradients(name):
    store, builder, training = composition_cases()[name]
    report = grad_check(store, builder, training=training)
    assert report.passed, report.max_rel_error


def test_suite_covers_every_recorded_op():
    recorded = {"matmul", "sparse_matmul", "add_bias", "concat_cols", "gather_rows", "add", "sub", "mul", "scale",
                "mul_const", "add_const", "sigmoid", "tanh_act", "relu", "leaky_relu", "exp", "log", "abs_act",
                "clip", "dropout", "row_softmax_masked", "sum_all", "mean_all", "weighted_sum"}
    assert recorded <= set(op_cases())


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=10, deadline=None)
def test_forward_and_backward_are_deterministic(seed):
    rng = np.random.default_rng(seed)
    init = rng.normal(size=(4, 3))
    X = rng.normal(size=(5, 4))

    def run():
        store = _store(W=init)
        t = Tape(training=True, rng=np.random.default_rng(seed))
        out = t.sum_all(t.dropout(t.relu(t.matmul(t.constant(X), t.param(store, "W"))), 0.5))
        backward(t, out)
        return out.value.copy(), store.grads["W"].copy()

    (v1, g1), (v2, g2) = run(), run()
    assert np.array_equal(v1, v2) and np.array_equal(g1, g2)


def test_checkpoint_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(5)
    values = {"a": rng.normal(size=(3, 2)), "b": np.array([[1e-300, -0.0, 1 / 3]])}
    path = tmp_path / "p.json"
    save_params(values, path, extra={"note": "x"})
    loaded, extra = load_params(path)
    assert extra == {"note": "x"}
    for k in values:
        assert np.array_equal(loaded[k], values[k])
    save_params(loaded, tmp_path / "q.json", extra=extra)
    assert path.read_bytes() == (tmp_path / "q.json").read_bytes()


def test_checkpoint_rejects_other_versions(tmp_path):
    path = tmp_path / "p.json"
    save_params({"a": np.ones((1, 1))}, path)
    path.write_text(path.read_text().replace('"version": 1', '"version": 99'))
    with pytest.raises(ValueError, match="version"):
        load_params(path)


def test_full_suite_passes():
    reports = run_suite()
    assert all(r.passed for r in reports.values())
