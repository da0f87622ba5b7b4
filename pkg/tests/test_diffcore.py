import itertools

import numpy as np
import pytest

from pemorl.diffcore import ParamSet, adam_step, grad_check, load_params, save_params
from pemorl.diffcore import layers as L
from pemorl.diffcore import tensor as T
from pemorl.diffcore.checkpoint import dumps, loads
from pemorl.equivariance import all_perms, apply_perm, check_equivariance


def central_diff(f, x, h=1e-5):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f(x)
        x[i] = old - h
        down = f(x)
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


UNARY = {
    "exp": T.exp,
    "tanh": T.tanh,
    "sigmoid": T.sigmoid,
    "softplus": T.softplus,
    "square": T.square,
    "relu": T.relu,
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_grads_match_finite_differences(name):
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=(3, 4))
    x0[np.abs(x0) < 1e-3] = 0.5  # keep away from the relu kink
    w = rng.normal(size=(3, 4))
    x = T.Tensor(x0.copy(), requires_grad=True)
    (UNARY[name](x) * w).sum().backward()
    num = central_diff(lambda v: float((UNARY[name](T.Tensor(v)).data * w).sum()), x0.copy())
    np.testing.assert_allclose(x.grad, num, rtol=1e-6, atol=1e-8)


def test_broadcast_matmul_reduction_grads():
    rng = np.random.default_rng(1)
    a0 = rng.normal(size=(2, 3, 4, 5))
    b0 = rng.normal(size=(5, 2))
    c0 = rng.normal(size=(2,))

    def f(a, b, c):
        out = T.matmul(a, b) + c
        return (T.softmax(out, axis=-2) * T.tmax(out, axis=1, keepdims=True)).mean()

    a, b, c = (T.Tensor(v.copy(), requires_grad=True) for v in (a0, b0, c0))
    f(a, b, c).backward()
    for tens, arr, k in ((a, a0, 0), (b, b0, 1), (c, c0, 2)):
        def g(v, k=k):
            args = [a0, b0, c0]
            args[k] = v
            return f(*map(T.Tensor, args)).item()

        np.testing.assert_allclose(tens.grad, central_diff(g, arr.copy()), rtol=1e-5, atol=1e-9)


def test_getitem_concat_reshape_transpose_grads():
    rng = np.random.default_rng(2)
    x0 = rng.normal(size=(2, 4, 3))
    idx = (slice(None), np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]]))

    def f(x):
        g = T.getitem(x, idx)  # (2, 4, 3, 3)
        h = T.concat([g, T.square(g)], axis=-1).transpose(0, 2, 1, 3).reshape(2, 3, -1)
        return T.tsum(T.log(T.softplus(h) + 1.0))

    x = T.Tensor(x0.copy(), requires_grad=True)
    f(x).backward()
    np.testing.assert_allclose(x.grad, central_diff(lambda v: f(T.Tensor(v)).item(), x0.copy()), rtol=1e-6)


def test_dense_identity_and_relu():
    x = np.arange(6.0).reshape(2, 3)
    out = L.dense(x, T.Tensor(np.eye(3)), T.Tensor(np.zeros(3)), "linear")
    np.testing.assert_array_equal(out.data, x)
    neg = L.dense(-1.0 - x, T.Tensor(np.eye(3)), T.Tensor(np.zeros(3)), "relu")
    np.testing.assert_array_equal(neg.data, np.zeros((2, 3)))


def test_dense_shape_mismatch():
    with pytest.raises(ValueError):
        L.dense(np.ones((2, 3)), T.Tensor(np.ones((4, 2))))


def test_dense_network_grad_check():
    rng = np.random.default_rng(3)
    params = ParamSet(L.init_mlp(rng, [4, 8, 8, 2], "m."))
    x = rng.normal(size=(5, 4))
    for act in ("tanh", "softplus", "relu"):
        rep = grad_check(lambda: T.tmean(T.square(L.mlp(x, params, "m.", 3, hidden_act=act))), params, n_coords=40)
        assert rep.passed, rep


def _attention_params(rng, width=8):
    return ParamSet(L.init_attention(rng, width, "att."))


def test_attention_single_element_is_value_path():
    rng = np.random.default_rng(4)
    p = _attention_params(rng)
    x = rng.normal(size=(1, 8))
    out = L.multi_head_attention(x, 2, p)
    v = x @ p["att.v.w"].data + p["att.v.b"].data
    expected = v @ p["att.o.w"].data + p["att.o.b"].data
    np.testing.assert_allclose(out.data, expected, rtol=1e-12)


def test_attention_duplicates_give_duplicates():
    rng = np.random.default_rng(5)
    p = _attention_params(rng)
    row = rng.normal(size=8)
    out = L.multi_head_attention(np.stack([row, row, rng.normal(size=8)]), 4, p).data
    np.testing.assert_allclose(out[0], out[1], rtol=0, atol=1e-14)


def test_attention_is_permutation_equivariant():
    rng = np.random.default_rng(6)
    p = _attention_params(rng)
    x = rng.normal(size=(3, 8))
    base = L.multi_head_attention(x, 4, p).data
    for rho in all_perms(3):
        out = L.multi_head_attention(apply_perm(x, rho), 4, p).data
        assert np.max(np.abs(out - apply_perm(base, rho))) <= 1e-6


def test_attention_heads_must_divide_width():
    rng = np.random.default_rng(7)
    p = _attention_params(rng, width=6)
    with pytest.raises(ValueError):
        L.multi_head_attention(rng.normal(size=(2, 6)), 4, p)


def test_pool_mean_max_values_and_invariance():
    single = np.array([[1.5, -2.0]])
    np.testing.assert_array_equal(L.pool_mean_max(single).data, [1.5, -2.0, 1.5, -2.0])
    pair = np.array([[1.0, 5.0], [3.0, 1.0]])
    np.testing.assert_array_equal(L.pool_mean_max(pair).data, [2.0, 3.0, 3.0, 5.0])
    rng = np.random.default_rng(8)
    x = rng.normal(size=(4, 3))
    base = L.pool_mean_max(x).data
    for order in itertools.permutations(range(4)):
        # mean over a reordered set may differ in the last ulp, max never does
        out = L.pool_mean_max(x[list(order)]).data
        np.testing.assert_array_equal(out[3:], base[3:])
        np.testing.assert_allclose(out[:3], base[:3], rtol=0, atol=1e-15)
    with pytest.raises(ValueError):
        L.pool_mean_max(np.zeros((0, 3)))


def test_pool_and_attention_pass_equivariance_checker():
    rng = np.random.default_rng(9)
    p = _attention_params(rng)
    inputs = [rng.normal(size=(4, 8)) for _ in range(5)]
    pe = check_equivariance(lambda x: L.multi_head_attention(x, 2, p).data, inputs, "pe", tol=1e-6)
    pi = check_equivariance(lambda x: L.pool_mean_max(x).data, inputs, "pi", tol=1e-6)
    assert pe.passed and pi.passed


def test_adam_zero_gradient_is_noop():
    p = ParamSet({"w": np.array([1.0, -2.0])})
    adam_step(p, {"w": np.zeros(2)}, lr=0.1)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    # bias-corrected first step: m_hat = g, v_hat = g^2  =>  update = lr * g / (|g| + eps)
    p = ParamSet({"w": np.zeros(3)})
    g = np.array([0.3, -5.0, 2e-3])
    adam_step(p, {"w": g}, lr=0.01)
    np.testing.assert_allclose(p["w"].data, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adam_quadratic_bowl_descends():
    rng = np.random.default_rng(10)
    target = rng.normal(size=4)
    p = ParamSet({"w": np.zeros(4)})
    losses = []
    for _ in range(500):
        p.zero_grad()
        loss = T.tsum(T.square(p["w"] - target))
        loss.backward()
        adam_step(p, None, lr=0.01)
        losses.append(loss.item())
    tail = np.array(losses[10:])
    assert np.all(np.diff(tail) <= 1e-12)
    assert losses[-1] < 1e-3 * losses[0]


def test_adam_rejects_nan_gradient():
    p = ParamSet({"w": np.zeros(2)})
    with pytest.raises(FloatingPointError, match="w"):
        adam_step(p, {"w": np.array([np.nan, 0.0])}, lr=0.1)


def test_grad_check_linear_exact():
    p = ParamSet({"w": np.array([1.0, 2.0, 3.0])})
    c = np.array([0.5, -1.0, 4.0])
    rep = grad_check(lambda: T.tsum(p["w"] * c), p, tol=1e-10, hard_limit=1e-10)
    assert rep.passed and rep.max_rel_error <= 1e-10


def test_grad_check_detects_corrupted_backward():
    p = ParamSet({"w": np.array([0.3, -0.7, 1.1])})

    def broken_square(a):
        return T.make_op(a.data**2, (a,), lambda g: ((a, 3.0 * g * a.data),))

    rep = grad_check(lambda: T.tsum(broken_square(p["w"])), p)
    assert not rep.passed


def test_checkpoint_roundtrip_and_bytes_are_deterministic(tmp_path):
    rng = np.random.default_rng(11)
    arrays = {"b": rng.normal(size=(3,)), "a.w": rng.normal(size=(2, 4)), "s": np.array(2.5)}
    blob = dumps(arrays)
    assert blob == dumps(dict(reversed(list(arrays.items()))))
    back = loads(blob)
    assert set(back) == set(arrays)
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])
    path = tmp_path / "p.ckpt"
    save_params(ParamSet(arrays), path)
    assert path.read_bytes() == blob
    assert load_params(path).n_params() == 3 + 8 + 1


def test_checkpoint_rejects_truncation():
    blob = dumps({"w": np.ones(10)})
    with pytest.raises(ValueError):
        loads(blob[:-3])
    with pytest.raises(ValueError):
        loads(b"garbage!" + blob[8:])
