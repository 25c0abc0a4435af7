import time

import numpy as np
import pytest

from glassts import autodiff as ad
from glassts.optim import adam_init, adam_step


def test_exp_at_zero():
    assert ad.exp(ad.tensor([0.0])).data[0] == pytest.approx(1.0)


def test_sigmoid_at_zero():
    assert ad.sigmoid(ad.tensor([0.0])).data[0] == pytest.approx(0.5)


def test_matmul_against_triple_loop():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(2, 3))
    b = rng.normal(size=(3, 4))
    got = ad.matmul(ad.tensor(a), ad.tensor(b)).data
    want = np.zeros((2, 4))
    for i in range(2):
        for j in range(4):
            for k in range(3):
                want[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-14)


def test_backward_square():
    x = ad.tensor([3.0], requires_grad=True)
    with ad.Tape() as tape:
        y = ad.sum_(x * x)
    g = tape.backward(y).wrt(x)
    assert g[0] == pytest.approx(6.0)


def test_backward_sigmoid_scaled():
    x = ad.tensor([0.0], requires_grad=True)
    with ad.Tape() as tape:
        y = ad.sum_(ad.sigmoid(x * 2.0))
    g = tape.backward(y).wrt(x)
    assert g[0] == pytest.approx(0.5)


def test_backward_rejects_nonscalar_loss():
    x = ad.tensor([1.0, 2.0], requires_grad=True)
    with ad.Tape() as tape:
        y = x * x
    with pytest.raises(ad.ShapeMismatch):
        tape.backward(y)


def test_record_reusable_for_second_backward():
    x = ad.tensor([2.0], requires_grad=True)
    with ad.Tape() as tape:
        a = ad.sum_(x * x)
        b = ad.sum_(x * x * x)
    assert tape.backward(a).wrt(x)[0] == pytest.approx(4.0)
    assert tape.backward(b).wrt(x)[0] == pytest.approx(12.0)


def test_unused_parameter_gets_zero_gradient():
    x = ad.tensor([1.0], requires_grad=True)
    w = ad.tensor([5.0], requires_grad=True)
    with ad.Tape() as tape:
        y = ad.sum_(x * 3.0)
        _ = w * 2.0
    g = tape.backward(y).wrt(w)
    assert g[0] == 0.0


def test_fd_check_quadratic():
    err = ad.finite_difference_check(
        lambda x: ad.sum_(x * x), ad.tensor([1.0]), eps=1e-5
    )
    assert err < 1e-8


def test_fd_check_exponential():
    err = ad.finite_difference_check(
        lambda x: ad.sum_(ad.exp(x)), ad.tensor([0.5]), eps=1e-5
    )
    assert err < 1e-7


def test_fd_check_constant_function():
    err = ad.finite_difference_check(
        lambda x: ad.sum_(x * 0.0), ad.tensor([0.3, -0.7]), eps=1e-5
    )
    assert err == 0.0


def test_fd_check_rejects_bad_eps():
    with pytest.raises(ValueError):
        ad.finite_difference_check(lambda x: ad.sum_(x), ad.tensor([1.0]), eps=0.5)


def _random_input(kind, rng):
    # inputs kept away from kink points (abs/relu at 0, clip bounds)
    x = rng.normal(size=(3, 4))
    if kind in ("abs", "relu"):
        x = np.sign(x) * (np.abs(x) + 0.2)
    if kind in ("log", "sqrt"):
        x = np.abs(x) + 0.5
    return x


_UNARY = ["neg", "exp", "log", "sqrt", "abs", "sigmoid", "tanh", "relu", "softplus"]
_BINARY = ["add", "sub", "mul", "div"]


@pytest.mark.parametrize("kind", _UNARY)
def test_unary_primitive_gradients(kind):
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x = _random_input(kind, rng)
        err = ad.finite_difference_check(
            lambda t: ad.sum_(ad.apply_primitive(kind, t)), ad.tensor(x)
        )
        assert err < 1e-4, f"{kind} seed {seed}: {err}"


@pytest.mark.parametrize("kind", _BINARY)
def test_binary_primitive_gradients(kind):
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(3, 4))
        y = rng.normal(size=(3, 4)) + np.where(kind == "div", 0.0, 0.0)
        if kind == "div":
            y = np.sign(y) * (np.abs(y) + 0.5)
        yc = ad.tensor(y)
        err = ad.finite_difference_check(
            lambda t: ad.sum_(ad.apply_primitive(kind, t, yc)), ad.tensor(x)
        )
        assert err < 1e-4, f"{kind} seed {seed}: {err}"
        xc = ad.tensor(x)
        err = ad.finite_difference_check(
            lambda t: ad.sum_(ad.apply_primitive(kind, xc, t)), ad.tensor(y)
        )
        assert err < 1e-4, f"{kind} (rhs) seed {seed}: {err}"


def test_broadcast_gradients():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(3, 4))
        b = rng.normal(size=(4,))
        bc = ad.tensor(b)
        err = ad.finite_difference_check(
            lambda t: ad.sum_(ad.mul(t, bc) + bc), ad.tensor(x)
        )
        assert err < 1e-4
        xc = ad.tensor(x)
        err = ad.finite_difference_check(
            lambda t: ad.sum_(ad.mul(xc, t) + t), ad.tensor(b)
        )
        assert err < 1e-4


def test_matmul_gradients():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        bc = ad.tensor(b)
        err = ad.finite_difference_check(
            lambda t: ad.sum_(ad.matmul(t, bc)), ad.tensor(a)
        )
        assert err < 1e-4
        ac = ad.tensor(a)
        err = ad.finite_difference_check(
            lambda t: ad.sum_(ad.matmul(ac, t)), ad.tensor(b)
        )
        assert err < 1e-4


def test_batched_matmul_gradients():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(2, 3, 4))
        b = rng.normal(size=(2, 4, 2))
        w = rng.normal(size=(4, 2))
        bc, wc = ad.tensor(b), ad.tensor(w)
        err = ad.finite_difference_check(
            lambda t: ad.sum_(ad.matmul(t, bc)), ad.tensor(a)
        )
        assert err < 1e-4
        err = ad.finite_difference_check(
            lambda t: ad.sum_(ad.matmul(t, wc)), ad.tensor(a)
        )
        assert err < 1e-4
        ac = ad.tensor(a)
        err = ad.finite_difference_check(
            lambda t: ad.sum_(ad.matmul(ac, t)), ad.tensor(w)
        )
        assert err < 1e-4


def test_softmax_sum_mean_gradients():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(3, 5))
        err = ad.finite_difference_check(
            lambda t: ad.sum_(ad.mul(ad.softmax(t, axis=1), ad.tensor(x + 2.0))),
            ad.tensor(x),
        )
        assert err < 1e-4
        err = ad.finite_difference_check(
            lambda t: ad.sum_(ad.mean_(t, axis=0) * 3.0), ad.tensor(x)
        )
        assert err < 1e-4


def test_structural_primitive_gradients():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(4, 6))
        y = ad.tensor(rng.normal(size=(4, 6)))
        err = ad.finite_difference_check(
            lambda t: ad.sum_(ad.mul(ad.reshape(t, (2, 12)), ad.reshape(y, (2, 12)))),
            ad.tensor(x),
        )
        assert err < 1e-4
        err = ad.finite_difference_check(
            lambda t: ad.sum_(ad.mul(ad.transpose(t), ad.transpose(y))), ad.tensor(x)
        )
        assert err < 1e-4
        err = ad.finite_difference_check(
            lambda t: ad.sum_(ad.slice_(t, (slice(1, 3), slice(None, 4)))),
            ad.tensor(x),
        )
        assert err < 1e-4
        err = ad.finite_difference_check(
            lambda t: ad.sum_(ad.concat([t, y], axis=1) * 2.0), ad.tensor(x)
        )
        assert err < 1e-4
        err = ad.finite_difference_check(
            lambda t: ad.sum_(ad.clip(t, -0.9, 0.9)),
            ad.tensor(np.sign(x) * np.minimum(np.abs(x), 0.7) + np.sign(x) * 0.05),
        )
        assert err < 1e-4


def test_shape_mismatch_names_kind_and_shapes():
    with pytest.raises(ad.ShapeMismatch) as exc:
        ad.matmul(ad.tensor(np.zeros((2, 3))), ad.tensor(np.zeros((4, 5))))
    msg = str(exc.value)
    assert "matmul" in msg and "(2, 3)" in msg and "(4, 5)" in msg


def test_nonfinite_output_rejected():
    with pytest.raises(ad.NumericsError):
        ad.div(ad.tensor([1.0]), ad.tensor([0.0]))
    with pytest.raises(ad.NumericsError):
        ad.log(ad.tensor([-1.0]))


def test_exp_clamp_guards_overflow():
    out = ad.exp(ad.tensor([1000.0]))
    assert np.isfinite(out.data[0])
    assert out.data[0] == pytest.approx(np.exp(30.0))


def test_forward_determinism_is_bitwise():
    def run():
        rng = np.random.default_rng(7)
        x = ad.tensor(rng.normal(size=(5, 5)), requires_grad=True)
        w = ad.tensor(rng.normal(size=(5, 5)), requires_grad=True)
        with ad.Tape() as tape:
            y = ad.sum_(ad.tanh(ad.matmul(x, w)) * x)
        g = tape.backward(y)
        return y.data.copy(), g.wrt(x).copy(), g.wrt(w).copy()

    y1, gx1, gw1 = run()
    y2, gx2, gw2 = run()
    assert np.array_equal(y1, y2)
    assert np.array_equal(gx1, gx2)
    assert np.array_equal(gw1, gw2)


def _chain_and_time(n):
    x = ad.tensor(np.ones(8), requires_grad=True)
    with ad.Tape() as tape:
        y = x
        for _ in range(n):
            y = y + x
        loss = ad.sum_(y)
    best = np.inf
    for _ in range(7):
        t0 = time.perf_counter()
        tape.backward(loss)
        best = min(best, time.perf_counter() - t0)
    return best


def test_backward_scales_linearly_in_record_length():
    _chain_and_time(200)  # warm-up
    t1 = _chain_and_time(2000)
    t2 = _chain_and_time(4000)
    assert t2 / t1 < 2.5


def test_adam_zero_gradient_keeps_params():
    p = ad.tensor([1.5, -0.5], requires_grad=True)
    state = adam_init([p], lr=0.01)
    adam_step([p], [np.zeros(2)], state)
    np.testing.assert_array_equal(p.data, [1.5, -0.5])


def test_adam_single_step_matches_hand_update():
    # constant gradient 1, lr=1e-3: bias-corrected m_hat = v_hat = 1,
    # so the step is lr / (1 + eps)
    p = ad.tensor([2.0], requires_grad=True)
    state = adam_init([p], lr=1e-3)
    adam_step([p], [np.array([1.0])], state)
    assert p.data[0] == pytest.approx(2.0 - 1e-3, abs=1e-9)
    assert state.step == 1


def test_adam_learning_rate_bounds():
    p = ad.tensor([0.0], requires_grad=True)
    adam_init([p], lr=0.01)  # top of the tuning range
    with pytest.raises(ValueError):
        adam_init([p], lr=1.5)


def test_adam_rejects_shape_mismatch():
    p = ad.tensor([0.0, 1.0], requires_grad=True)
    state = adam_init([p], lr=0.01)
    with pytest.raises(ad.ShapeMismatch):
        adam_step([p], [np.zeros(3)], state)
