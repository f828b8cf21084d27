import numpy as np
import pytest

from celldino import tensor as T
from celldino.tensor import Tensor

from oracles import assert_grads_close, numerical_grad

SEEDS = [0, 1, 2, 3, 4]


def rand(rng, *shape, scale=1.0):
    return (rng.standard_normal(shape) * scale).astype(np.float32)


# ---------------------------------------------------------------------------
# tempered softmax


def test_softmax_uniform_on_equal_logits():
    p = T.tempered_softmax(Tensor([0.0, 0.0, 0.0]), tau=1.0)
    np.testing.assert_allclose(p.data, [1 / 3] * 3, atol=1e-7)


def test_softmax_hand_value():
    # logits [1, 2], tau 0.5: p = [1/(1+e^2), e^2/(1+e^2)]
    e2 = np.exp(2.0)
    expected = np.array([1 / (1 + e2), e2 / (1 + e2)])
    p = T.tempered_softmax(Tensor([1.0, 2.0]), tau=0.5)
    np.testing.assert_allclose(p.data, expected, atol=1e-6)
    np.testing.assert_allclose(p.data, [0.1192, 0.8808], atol=1e-4)


def test_softmax_sharpening_limit():
    p = T.tempered_softmax(Tensor([5.0, 0.0]), tau=0.01)
    assert p.data[0] > 0.9999


def test_softmax_rejects_bad_inputs():
    with pytest.raises(ValueError):
        T.tempered_softmax(Tensor([1.0, 2.0]), tau=0.0)
    with pytest.raises(ValueError):
        T.tempered_softmax(Tensor([1.0, 2.0]), tau=-1.0)
    x = Tensor([1.0, 2.0])
    x.data[0] = np.nan
    with pytest.raises(ValueError):
        T.tempered_softmax(x, tau=1.0)


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    logits = rng.uniform(-50, 50, size=(6, 8)).astype(np.float32)
    p = T.tempered_softmax(Tensor(logits), tau=0.7)
    np.testing.assert_allclose(p.data.sum(axis=-1), 1.0, atol=1e-6)
    # saturated entries may round to exactly 0/1 in float32
    assert np.all(p.data >= 0) and np.all(p.data <= 1)
    moderate = T.tempered_softmax(Tensor(logits / 10.0), tau=1.0)
    assert np.all(moderate.data > 0) and np.all(moderate.data < 1)


@pytest.mark.parametrize("tau", [0.05, 0.5, 1.0, 7.0])
def test_softmax_preserves_argmax(tau):
    rng = np.random.default_rng(99)
    logits = rng.uniform(-50, 50, size=(20, 8)).astype(np.float32)
    p = T.tempered_softmax(Tensor(logits), tau=tau)
    np.testing.assert_array_equal(p.data.argmax(axis=-1), logits.argmax(axis=-1))


# ---------------------------------------------------------------------------
# cross-entropy


def test_ce_matched_uniform_is_entropy():
    p = Tensor([0.5, 0.5])
    loss = T.cross_entropy_rows(p, p)
    assert abs(loss.item() - np.log(2)) < 1e-6


def test_ce_matched_onehot_is_zero():
    p = Tensor([1.0, 0.0])
    loss = T.cross_entropy_rows(p, p)
    assert abs(loss.item()) < 1e-9


def test_ce_hand_value():
    # -0.5 (ln 0.9 + ln 0.1) = 1.20397...
    loss = T.cross_entropy_rows(Tensor([0.5, 0.5]), Tensor([0.9, 0.1]))
    assert abs(loss.item() - 1.2040) < 1e-4


def test_ce_rejects_shape_mismatch_and_nonstochastic():
    with pytest.raises(ValueError):
        T.cross_entropy_rows(Tensor([[0.5, 0.5]]), Tensor([0.5, 0.5]))
    with pytest.raises(ValueError):
        T.cross_entropy_rows(Tensor([0.7, 0.7]), Tensor([0.5, 0.5]))


@pytest.mark.parametrize("seed", SEEDS)
def test_ce_lower_bounded_by_entropy(seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(6), size=4).astype(np.float32)
    q = rng.dirichlet(np.ones(6), size=4).astype(np.float32)
    entropy = T.cross_entropy_rows(Tensor(p), Tensor(p)).item()
    cross = T.cross_entropy_rows(Tensor(p), Tensor(q)).item()
    assert cross >= entropy - 1e-6


# ---------------------------------------------------------------------------
# backward: spec cases


def test_backward_sum_of_squares():
    w = Tensor([1.0, 2.0], requires_grad=True)
    loss = T.tsum(T.mul(w, w))
    grads = T.backward(loss)
    np.testing.assert_allclose(grads.get(w), [2.0, 4.0], atol=1e-6)


def test_backward_softmax_ce_identity():
    # d/dl of CE(onehot, softmax(l / tau)) == (p - onehot) / tau
    rng = np.random.default_rng(7)
    logits = Tensor(rand(rng, 1, 5), requires_grad=True)
    onehot = np.zeros((1, 5), dtype=np.float32)
    onehot[0, 2] = 1.0
    tau = 0.8
    p = T.tempered_softmax(logits, tau=tau)
    loss = T.cross_entropy_rows(Tensor(onehot), p)
    grads = T.backward(loss)
    expected = (p.data - onehot) / tau
    np.testing.assert_allclose(grads.get(logits), expected, atol=1e-5)

    def f(x):
        with T.no_grad(), T.precision(np.float64):
            q = T.tempered_softmax(Tensor(x), tau=tau)
            return T.cross_entropy_rows(Tensor(onehot), q).item()

    assert_grads_close(grads.get(logits), numerical_grad(f, logits.data), what="softmax-ce")


def test_backward_unused_parameter_zero_grad():
    used = Tensor([3.0], requires_grad=True)
    unused = Tensor([5.0], requires_grad=True)
    loss = T.tsum(T.mul(used, used))
    grads = T.backward(loss)
    assert unused not in grads
    np.testing.assert_array_equal(grads.get(unused), [0.0])


def test_backward_rejects_nonscalar_and_double_use():
    w = Tensor([1.0, 2.0], requires_grad=True)
    y = T.mul(w, w)
    with pytest.raises(ValueError):
        T.backward(y)
    loss = T.tsum(y)
    T.backward(loss)
    with pytest.raises(RuntimeError):
        T.backward(loss)


# ---------------------------------------------------------------------------
# finite-difference checks for every differentiable op
#
# Each case maps a leaf x to a scalar via the op followed by a fixed random
# +-1 projection, keeping true gradient entries well above the fd noise
# floor. Shapes stay at most 8x8 per the module contract.


def _proj(rng, shape):
    return Tensor(rng.choice([-1.0, 1.0], size=shape).astype(np.float32))


def _check_op(seed, build):
    rng = np.random.default_rng(seed)
    x_data, fwd = build(rng)
    x = Tensor(x_data, requires_grad=True)
    loss = fwd(x)
    analytic = T.backward(loss).get(x)

    def f(xd):
        with T.no_grad(), T.precision(np.float64):
            return fwd(Tensor(xd)).item()

    assert_grads_close(analytic, numerical_grad(f, x_data), what=f"seed={seed}")


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_matmul(seed):
    def build(rng):
        x = rand(rng, 5, 6)
        w = Tensor(rand(rng, 6, 4))
        r = _proj(rng, (5, 4))
        return x, lambda t: T.tsum(T.mul(T.matmul(t, w), r))

    _check_op(seed, build)


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_matmul_weight_side(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rand(rng, 2, 5, 6))
    w_data = rand(rng, 6, 4)
    r = _proj(rng, (2, 5, 4))
    w = Tensor(w_data, requires_grad=True)
    loss = T.tsum(T.mul(T.matmul(a, w), r))
    analytic = T.backward(loss).get(w)

    def f(wd):
        with T.no_grad(), T.precision(np.float64):
            return T.tsum(T.mul(T.matmul(a, Tensor(wd)), r)).item()

    assert_grads_close(analytic, numerical_grad(f, w_data), what="matmul-w")


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_softmax(seed):
    def build(rng):
        x = rand(rng, 4, 6)
        r = _proj(rng, (4, 6))
        return x, lambda t: T.tsum(T.mul(T.tempered_softmax(t, tau=1.0), r))

    _check_op(seed, build)


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_layernorm(seed):
    def build(rng):
        x = rand(rng, 4, 8)
        gamma = Tensor(rand(rng, 8, scale=0.5))
        beta = Tensor(rand(rng, 8, scale=0.5))
        r = _proj(rng, (4, 8))
        return x, lambda t: T.tsum(T.mul(T.layernorm(t, gamma, beta), r))

    _check_op(seed, build)


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_layernorm_gamma_beta(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rand(rng, 4, 8))
    g_data = rand(rng, 8)
    b_data = rand(rng, 8)
    r = _proj(rng, (4, 8))
    gamma = Tensor(g_data, requires_grad=True)
    beta = Tensor(b_data, requires_grad=True)
    loss = T.tsum(T.mul(T.layernorm(x, gamma, beta), r))
    grads = T.backward(loss)

    def fg(gd):
        with T.no_grad(), T.precision(np.float64):
            return T.tsum(T.mul(T.layernorm(x, Tensor(gd), beta), r)).item()

    def fb(bd):
        with T.no_grad(), T.precision(np.float64):
            return T.tsum(T.mul(T.layernorm(x, gamma, Tensor(bd)), r)).item()

    assert_grads_close(grads.get(gamma), numerical_grad(fg, g_data), what="gamma")
    assert_grads_close(grads.get(beta), numerical_grad(fb, b_data), what="beta")


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_gelu(seed):
    def build(rng):
        x = rand(rng, 6, 6)
        r = _proj(rng, (6, 6))
        return x, lambda t: T.tsum(T.mul(T.gelu(t), r))

    _check_op(seed, build)


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_attention(seed):
    # single-head attention composed from the primitive ops
    def build(rng):
        x = rand(rng, 5, 8)
        wq = Tensor(rand(rng, 8, 8, scale=0.5))
        wk = Tensor(rand(rng, 8, 8, scale=0.5))
        wv = Tensor(rand(rng, 8, 8, scale=0.5))
        r = _proj(rng, (5, 8))

        def fwd(t):
            q = T.matmul(t, wq)
            k = T.matmul(t, wk)
            v = T.matmul(t, wv)
            scores = T.mul(T.matmul(q, T.transpose(k, (1, 0))), 1.0 / np.sqrt(8.0))
            attn = T.tempered_softmax(scores, tau=1.0)
            return T.tsum(T.mul(T.matmul(attn, v), r))

        return x, fwd

    _check_op(seed, build)


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_cross_entropy(seed):
    def build(rng):
        x = rand(rng, 3, 6)
        p_t = Tensor(rng.dirichlet(np.ones(6), size=3).astype(np.float32))
        # keep the student stochastic under fd perturbation via softmax
        return x, lambda t: T.cross_entropy_rows(p_t, T.tempered_softmax(t, tau=1.0))

    _check_op(seed, build)


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_bce_with_logits(seed):
    def build(rng):
        x = rand(rng, 4, 5)
        y = Tensor(rng.integers(0, 2, size=(4, 5)).astype(np.float32))
        return x, lambda t: T.mul(T.bce_with_logits(t, y), 8.0)

    _check_op(seed, build)


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_l2_normalize(seed):
    def build(rng):
        x = rand(rng, 4, 6)
        r = _proj(rng, (4, 6))
        return x, lambda t: T.tsum(T.mul(T.l2_normalize(t), r))

    _check_op(seed, build)


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_shape_ops(seed):
    def build(rng):
        x = rand(rng, 4, 6)
        r = _proj(rng, (2, 2, 6))

        def fwd(t):
            t = T.reshape(t, (2, 2, 6))
            t = T.transpose(t, (1, 0, 2))
            t = T.mul(t, r)
            return T.tsum(t)

        return x, fwd

    _check_op(seed, build)


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_concat_index_mean(seed):
    def build(rng):
        x = rand(rng, 3, 4)
        other = Tensor(rand(rng, 2, 4))
        r = _proj(rng, (4,))

        def fwd(t):
            joined = T.concat([t, other], axis=0)
            row = joined[1]
            return T.tsum(T.mul(row, r)) + T.mul(T.tmean(joined), 4.0)

        return x, fwd

    _check_op(seed, build)


def test_gradcheck_bce_anchor_at_zero_logits():
    # BCE at logit 0 equals ln 2 regardless of the target
    z = Tensor(np.zeros((3, 4), dtype=np.float32), requires_grad=True)
    y = Tensor(np.eye(3, 4, dtype=np.float32))
    loss = T.bce_with_logits(z, y)
    assert abs(loss.item() - np.log(2)) < 1e-6


# ---------------------------------------------------------------------------
# misc op behavior


def test_dropout_identity_in_eval_and_scaling_in_train():
    rng = np.random.default_rng(0)
    x = Tensor(np.ones((50, 50), dtype=np.float32))
    assert T.dropout(x, 0.5, rng, training=False) is x
    out = T.dropout(x, 0.5, rng, training=True)
    kept = out.data[out.data > 0]
    assert np.allclose(kept, 2.0)
    assert 0.3 < (out.data > 0).mean() < 0.7


@pytest.mark.filterwarnings("ignore:overflow")
def test_nonfinite_forward_raises():
    x = Tensor([1.0])
    big = T.mul(x, 3e38)
    with pytest.raises(T.NonFiniteError):
        T.mul(big, 3e38)


def test_broadcast_add_and_unbroadcast_grad():
    a = Tensor(np.ones((3, 4), dtype=np.float32), requires_grad=True)
    b = Tensor(np.ones((1, 4), dtype=np.float32), requires_grad=True)
    loss = T.tsum(T.add(a, b))
    grads = T.backward(loss)
    np.testing.assert_array_equal(grads.get(a), np.ones((3, 4)))
    np.testing.assert_array_equal(grads.get(b), np.full((1, 4), 3.0))
