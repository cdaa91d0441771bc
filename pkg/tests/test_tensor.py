import zlib

import mpmath
import numpy as np
import pytest

from idclab import tensor as T
from idclab.tensor import EmptyTargetWarning, Tensor

mpmath.mp.dps = 40


def leaf(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


# -- oracles ---------------------------------------------------------------
def mp_gelu(x):
    x = mpmath.mpf(x)
    c = mpmath.sqrt(2 / mpmath.pi)
    return 0.5 * x * (1 + mpmath.tanh(c * (x + mpmath.mpf("0.044715") * x**3)))


def mp_softmax(row):
    e = [mpmath.e ** mpmath.mpf(v) for v in row]
    s = mpmath.fsum(e)
    return [float(v / s) for v in e]


def mp_layer_norm(row, eps=1e-5):
    row = [mpmath.mpf(v) for v in row]
    mu = mpmath.fsum(row) / len(row)
    var = mpmath.fsum((v - mu) ** 2 for v in row) / len(row)
    return [float((v - mu) / mpmath.sqrt(var + mpmath.mpf(eps))) for v in row]


def mp_cross_entropy(logits, targets):
    total = mpmath.mpf(0)
    for row, t in zip(logits, targets):
        lse = mpmath.log(mpmath.fsum(mpmath.e ** mpmath.mpf(v) for v in row))
        total += lse - mpmath.mpf(row[t])
    return float(total / len(targets))


# -- matmul ----------------------------------------------------------------
def test_matmul_hand_expansion():
    a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    b = Tensor(np.array([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(T.matmul(a, b).data, [[19, 22], [43, 50]])


def test_matmul_identity_and_zero():
    a = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    np.testing.assert_array_equal((a @ Tensor(np.eye(4))).data, a.data)
    np.testing.assert_array_equal((a @ Tensor(np.zeros((4, 2)))).data, np.zeros((3, 2)))


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_backward_rule():
    rng = np.random.default_rng(1)
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    g = rng.normal(size=(3, 2))
    T.backward(T.tsum(T.matmul(a, b) * Tensor(g)))
    np.testing.assert_allclose(a.grad, g @ b.data.T, rtol=1e-14)
    np.testing.assert_allclose(b.grad, a.data.T @ g, rtol=1e-14)


# -- softmax ---------------------------------------------------------------
def test_softmax_uniform_and_sums():
    np.testing.assert_allclose(T.softmax(Tensor(np.zeros(3))).data, [1 / 3] * 3, rtol=0, atol=1e-15)
    x = np.random.default_rng(2).normal(size=(5, 7)) * 30
    s = T.softmax(Tensor(x)).data
    assert np.all(np.abs(s.sum(axis=-1) - 1) <= 1e-12)


def test_softmax_shift_invariance():
    x = np.random.default_rng(3).normal(size=(4, 6))
    np.testing.assert_allclose(T.softmax(Tensor(x + 123.5)).data, T.softmax(Tensor(x)).data, atol=1e-15)


def test_softmax_high_precision():
    np.testing.assert_allclose(T.softmax(Tensor(np.array([1.0, 2.0, 3.0]))).data, mp_softmax([1, 2, 3]), rtol=1e-14)


def test_softmax_large_inputs_stay_finite():
    s = T.softmax(Tensor(np.array([1000.0, 1000.0, -1000.0]))).data
    np.testing.assert_allclose(s, [0.5, 0.5, 0.0])


# -- layer norm ------------------------------------------------------------
def _ln(x):
    d = x.shape[-1]
    return T.layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d)), eps=1e-5).data


def test_layer_norm_constant_row_is_zero():
    np.testing.assert_array_equal(_ln(np.full((1, 6), 3.25)), np.zeros((1, 6)))


def test_layer_norm_normalised_row_is_fixed_point():
    r = np.array([[-1.0, 1.0, -1.0, 1.0]])
    np.testing.assert_allclose(_ln(r), r, atol=1e-5)


def test_layer_norm_moments_and_oracle():
    x = np.random.default_rng(4).normal(3.0, 2.0, size=(4, 9))
    y = _ln(x)
    np.testing.assert_allclose(y.mean(axis=-1), 0, atol=1e-9)
    # unit variance up to the eps term
    np.testing.assert_allclose(y.var(axis=-1), x.var(axis=-1) / (x.var(axis=-1) + 1e-5), atol=1e-9)
    for row, out in zip(x, y):
        np.testing.assert_allclose(out, mp_layer_norm(row), rtol=1e-12, atol=1e-13)


def test_layer_norm_rejects_nonpositive_eps():
    with pytest.raises(ValueError):
        T.layer_norm(Tensor(np.ones((1, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)


# -- gelu ------------------------------------------------------------------
def test_gelu_points():
    g = T.gelu(Tensor(np.array([0.0, 10.0, 1.0, -3.0, 0.5]))).data
    assert g[0] == 0.0
    assert abs(g[1] - 10.0) < 1e-4
    for x, v in zip([1.0, -3.0, 0.5], g[2:]):
        assert abs(v - float(mp_gelu(x))) < 1e-14


def test_gelu_monotone_on_positive_range():
    x = np.linspace(-0.75, 20, 2001)
    assert np.all(np.diff(T.gelu(Tensor(x)).data) > 0)


def test_gelu_extreme_inputs_finite():
    g = T.gelu(Tensor(np.array([-1000.0, 1000.0]))).data
    np.testing.assert_array_equal(g, [-0.0, 1000.0])


# -- cross entropy ---------------------------------------------------------
def test_cross_entropy_uniform_is_log_v():
    loss = T.cross_entropy(Tensor(np.zeros((3, 4))), np.array([1, 2, 3]), pad_id=0)
    assert abs(loss.item() - np.log(4)) < 1e-15
    assert abs(loss.item() - 1.386294) < 1e-6


def test_cross_entropy_confident_target():
    logits = np.zeros((1, 5))
    logits[0, 2] = 1e6
    assert T.cross_entropy(Tensor(logits), np.array([2]), pad_id=0).item() < 1e-12


def test_cross_entropy_oracle_and_padding():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(3, 5)) * 2
    tgt = np.array([4, 1, 3])
    got = T.cross_entropy(Tensor(logits), tgt, pad_id=0).item()
    assert abs(got - mp_cross_entropy(logits, tgt)) < 1e-14
    # pad positions are excluded from the mean
    padded = T.cross_entropy(Tensor(np.vstack([logits, rng.normal(size=(2, 5))])), np.array([4, 1, 3, 0, 0]), pad_id=0)
    assert abs(padded.item() - got) < 1e-15


def test_cross_entropy_all_pad_warns():
    x = leaf(np.zeros((2, 3)))
    with pytest.warns(EmptyTargetWarning):
        loss = T.cross_entropy(x, np.array([0, 0]), pad_id=0)
    assert loss.item() == 0.0


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        T.cross_entropy(Tensor(np.zeros((1, 3))), np.array([7]), pad_id=0)


# -- backward --------------------------------------------------------------
def test_backward_quadratic_form():
    x = leaf([1.0, -2.0, 0.5])
    T.backward(T.tsum(x * x))
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_backward_scalar_product():
    a, b = leaf(3.0), leaf(-4.0)
    T.backward(a * b)
    assert a.grad == b.data and b.grad == a.data


def test_backward_shared_subexpression():
    x = leaf([1.5, -0.5])
    y = T.tsum(x * x + x)
    T.backward(y)
    np.testing.assert_array_equal(x.grad, 2 * x.data + 1)


def test_backward_accumulates_until_zero_grad():
    x = leaf([2.0])
    for _ in range(3):
        T.backward(T.tsum(x * 3.0))
    np.testing.assert_array_equal(x.grad, [9.0])
    T.zero_grad([x])
    assert x.grad is None


def test_backward_rejects_non_scalar():
    with pytest.raises(ValueError, match="scalar"):
        T.backward(leaf([1.0, 2.0]) * 2.0)


def test_tape_is_topological_and_visits_once():
    x = leaf(np.ones((2, 2)))
    h = T.gelu(x @ x)
    loss = T.tsum(h * h + h)
    tape = T.Tape.from_output(loss)
    assert tape.check_order()
    assert len({id(n) for n in tape.nodes}) == len(tape.nodes)


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad
    assert T.grad_enabled()


def test_assert_finite():
    T.assert_finite(Tensor(np.ones(3)))
    with pytest.raises(FloatingPointError):
        T.assert_finite(Tensor(np.array([1.0, np.nan])))


def test_forward_ops_are_pure():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 5, 8))
    g, b = rng.normal(size=8), rng.normal(size=8)
    one = T.gelu(T.layer_norm(Tensor(x), Tensor(g), Tensor(b))).data
    two = T.gelu(T.layer_norm(Tensor(x), Tensor(g), Tensor(b))).data
    assert one.tobytes() == two.tobytes()


# -- gradient checks per op ------------------------------------------------
RNG = np.random.default_rng(7)


def _check(f, params, tol=1e-4):
    rep = T.grad_check(f, params, h=1e-5, tol=tol)
    assert rep.passed, rep
    return rep


def test_grad_check_linear_is_exact():
    x = leaf(RNG.normal(size=5))
    w = Tensor(RNG.normal(size=5))
    rep = _check(lambda: T.tsum(x * w), [x])
    assert rep.max_rel_error < 1e-9


def test_grad_check_quadratic_is_exact():
    x = leaf(RNG.normal(size=4))
    rep = _check(lambda: T.tsum(x * x), [x])
    assert rep.max_rel_error < 1e-8


@pytest.mark.parametrize(
    "name",
    ["add_broadcast", "mul", "gelu", "softmax", "layer_norm", "matmul_batched", "matmul_nd", "attention_masked", "cross_entropy", "take_rows", "concat_getitem", "reshape_transpose", "mean"],
)
def test_grad_check_ops(name):
    r = np.random.default_rng(zlib.crc32(name.encode()))
    a = leaf(r.normal(size=(2, 3, 4)))
    b = leaf(r.normal(size=(4,)))
    w = Tensor(r.normal(size=(2, 3, 4)))
    if name == "add_broadcast":
        _check(lambda: T.tsum((a + b) * w), [a, b])
    elif name == "mul":
        _check(lambda: T.tsum(a * b * w), [a, b])
    elif name == "gelu":
        _check(lambda: T.tsum(T.gelu(a) * w), [a])
    elif name == "softmax":
        _check(lambda: T.tsum(T.softmax(a, axis=-1) * w), [a])
    elif name == "layer_norm":
        g, bias = leaf(r.normal(size=4)), leaf(r.normal(size=4))
        _check(lambda: T.tsum(T.layer_norm(a, g, bias) * w), [a, g, bias])
    elif name == "matmul_batched":
        m = leaf(r.normal(size=(4, 5)))
        _check(lambda: T.tsum(T.gelu(a @ m)), [a, m])
    elif name == "matmul_nd":
        m = leaf(r.normal(size=(2, 4, 3)))
        _check(lambda: T.tsum(T.gelu(a @ m)), [a, m])
    elif name == "attention_masked":
        q, k, v = (leaf(r.normal(size=(2, 3, 4))) for _ in range(3))
        mask = np.triu(np.full((3, 3), -1e9), k=1)
        _check(lambda: T.tsum(T.attention(q, k, v, mask) * w), [q, k, v])
    elif name == "cross_entropy":
        logits = leaf(r.normal(size=(2, 3, 5)))
        tgt = np.array([[1, 4, 0], [2, 0, 0]])
        _check(lambda: T.cross_entropy(logits, tgt, pad_id=0), [logits])
    elif name == "take_rows":
        emb = leaf(r.normal(size=(6, 4)))
        ids = np.array([[0, 5, 0], [2, 2, 1]])
        _check(lambda: T.tsum(T.take_rows(emb, ids) * w), [emb])
    elif name == "concat_getitem":
        _check(lambda: T.tsum(T.concat([a, a * 2.0], axis=1)[:, 1:4] * T.concat([w, w], axis=1)[:, 1:4]), [a])
    elif name == "reshape_transpose":
        _check(lambda: T.tsum(a.reshape(6, 4).transpose(1, 0) * Tensor(w.data.reshape(6, 4).T)), [a])
    elif name == "mean":
        _check(lambda: T.tmean(a * w, axis=1).sum(), [a])
