import numpy as np
import pytest

import contune.autodiff as ad
from contune.errors import (
    ContractError,
    DegenerateInputError,
    DimensionError,
    NonFiniteError,
)

REL_TOL = 1e-4
FD_H = 1e-5


def rel_err(got, want):
    denom = max(np.abs(want).max(), 1e-12)
    return np.abs(got - want).max() / denom


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    m = ad.constant([[3.0, -1.0], [2.5, 4.0]])
    eye = ad.constant(np.eye(2))
    assert np.array_equal(ad.matmul(eye, m).data, m.data)


def test_matmul_hand_example():
    a = ad.constant([[1.0, 2.0], [3.0, 4.0]])
    b = ad.constant([[0.0], [1.0]])
    assert np.array_equal(ad.matmul(a, b).data, [[2.0], [4.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 3))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(42)
    a = ad.parameter(rng.standard_normal((3, 4)))
    b = ad.parameter(rng.standard_normal((4, 2)))
    loss = ad.total(ad.matmul(a, b))
    ad.backward(loss)
    ga, gb = a.grad.copy(), b.grad.copy()
    a.zero_grad(), b.zero_grad()
    fa = ad.finite_diff_grad(lambda t: ad.total(ad.matmul(t, b)).item(), a, FD_H)
    fb = ad.finite_diff_grad(lambda t: ad.total(ad.matmul(a, t)).item(), b, FD_H)
    assert rel_err(ga, fa) < 1e-6
    assert rel_err(gb, fb) < 1e-6


# ---------------------------------------------------------------------------
# cosine similarity


def test_cosine_orthogonal():
    c = ad.cosine_sim(ad.constant([1.0, 0.0]), ad.constant([0.0, 1.0]))
    assert c.item() == pytest.approx(0.0, abs=1e-15)


def test_cosine_hand_example():
    c = ad.cosine_sim(ad.constant([1.0, 2.0, 2.0]), ad.constant([2.0, 1.0, 2.0]))
    assert c.item() == pytest.approx(8.0 / 9.0, rel=1e-12)


def test_cosine_self_similarity():
    rng = np.random.default_rng(3)
    for _ in range(10):
        v = rng.standard_normal(5)
        assert ad.cosine_sim(ad.constant(v), ad.constant(v)).item() == pytest.approx(1.0)


def test_cosine_zero_norm_rejected():
    with pytest.raises(DegenerateInputError):
        ad.cosine_sim(ad.constant([0.0, 0.0]), ad.constant([1.0, 0.0]))


def test_cosine_gradient_both_sides():
    rng = np.random.default_rng(7)
    a = ad.parameter(rng.standard_normal(6))
    b = ad.parameter(rng.standard_normal(6))
    ad.backward(ad.cosine_sim(a, b))
    ga, gb = a.grad.copy(), b.grad.copy()
    a.zero_grad(), b.zero_grad()
    fa = ad.finite_diff_grad(lambda t: ad.cosine_sim(t, b).item(), a, FD_H)
    fb = ad.finite_diff_grad(lambda t: ad.cosine_sim(a, t).item(), b, FD_H)
    assert rel_err(ga, fa) < REL_TOL
    assert rel_err(gb, fb) < REL_TOL


# ---------------------------------------------------------------------------
# softmax cross entropy


def test_ce_uniform_logits():
    logits = ad.constant(np.zeros((3, 4)))
    loss = ad.softmax_cross_entropy(logits, [0, 1, 3])
    assert loss.item() == pytest.approx(np.log(4.0), rel=1e-12)


def test_ce_peaked_logit():
    loss = ad.softmax_cross_entropy(ad.constant([[10.0, 0.0, 0.0]]), [0])
    assert loss.item() == pytest.approx(9.08e-5, rel=1e-3)


def test_ce_target_out_of_range():
    with pytest.raises(IndexError):
        ad.softmax_cross_entropy(ad.constant(np.zeros((2, 3))), [0, 3])


def test_ce_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    logits = ad.parameter(rng.standard_normal((4, 5)))
    targets = [0, 2, 4, 1]
    ad.backward(ad.softmax_cross_entropy(logits, targets))
    g = logits.grad.copy()
    logits.zero_grad()
    f = ad.finite_diff_grad(
        lambda t: ad.softmax_cross_entropy(t, targets).item(), logits, FD_H)
    assert rel_err(g, f) < 1e-5


# ---------------------------------------------------------------------------
# stop gradient


def test_stop_gradient_identity_forward():
    t = ad.parameter(np.array([1.0, -2.0, 3.5]))
    assert np.array_equal(ad.stop_gradient(t).data, t.data)


def test_stop_gradient_zero_backward():
    t = ad.parameter(np.ones(4))
    loss = ad.total(ad.stop_gradient(t))
    ad.backward(loss)
    assert t.grad is None


def test_stop_gradient_composed_sum():
    t = ad.parameter(np.array([0.3, -1.2, 0.9]))
    ad.backward(ad.total(ad.add(t, ad.stop_gradient(t))))
    assert np.array_equal(t.grad, np.ones(3))
    t.zero_grad()
    fd = ad.finite_diff_grad(
        lambda x: ad.total(ad.add(x, ad.stop_gradient(x))).item(), t, FD_H)
    # finite differences see both paths (gradient 2); backward must see one.
    assert np.allclose(fd, 2.0 * np.ones(3), atol=1e-6)


# ---------------------------------------------------------------------------
# backward mechanics


def test_backward_sum_gives_ones():
    w = ad.parameter(np.array([[1.0, 2.0], [3.0, 4.0]]))
    ad.backward(ad.total(w))
    assert np.array_equal(w.grad, np.ones((2, 2)))


def test_backward_square_gives_2w():
    w = ad.parameter(np.array([1.5, -2.0, 0.5]))
    ad.backward(ad.total(ad.mul(w, w)))
    assert np.allclose(w.grad, 2.0 * w.data, rtol=1e-15)


def test_backward_accumulates_until_cleared():
    w = ad.parameter(np.array([2.0, 3.0]))
    loss = ad.total(ad.mul(w, w))
    ad.backward(loss)
    first = w.grad.copy()
    ad.backward(loss)
    assert np.allclose(w.grad, 2.0 * first)


def test_backward_rejects_non_scalar():
    w = ad.parameter(np.ones((2, 2)))
    with pytest.raises(ContractError):
        ad.backward(ad.add(w, w))


def test_diamond_graph_gradient():
    w = ad.parameter(np.array([1.0, 2.0]))
    y = ad.add(w, w)
    ad.backward(ad.total(ad.mul(y, y)))
    # d/dw sum((2w)^2) = 8w
    assert np.allclose(w.grad, 8.0 * w.data)


# ---------------------------------------------------------------------------
# finite difference oracle


def test_fd_of_sum_is_ones():
    t = ad.constant(np.array([0.1, 0.2, 0.3]))
    assert np.allclose(ad.finite_diff_grad(lambda x: ad.total(x).item(), t),
                       np.ones(3), atol=1e-9)


def test_fd_of_square_at_3():
    t = ad.constant(np.array(3.0).reshape(()))
    g = ad.finite_diff_grad(lambda x: float(x.data) ** 2, t, FD_H)
    assert abs(float(g) - 6.0) < 1e-6


def test_fd_agrees_with_backward_on_matmul_softmax_chain():
    rng = np.random.default_rng(23)
    w = ad.parameter(rng.standard_normal((4, 3)))
    x = ad.constant(rng.standard_normal((2, 4)))

    def f(t):
        return ad.softmax_cross_entropy(ad.matmul(x, t), [0, 2])

    ad.backward(f(w))
    g = w.grad.copy()
    w.zero_grad()
    fd = ad.finite_diff_grad(lambda t: f(t).item(), w, FD_H)
    assert rel_err(g, fd) < REL_TOL


def test_fd_rejects_nonpositive_h():
    with pytest.raises(ContractError):
        ad.finite_diff_grad(lambda x: 0.0, ad.constant(np.ones(2)), 0.0)


# ---------------------------------------------------------------------------
# op property suite: every differentiable op vs finite differences,
# >= 50 seeded random trials each


def _check_op(build, param_shapes, trials, seed):
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        params = [ad.parameter(rng.standard_normal(s)) for s in param_shapes]
        ad.backward(build(*params))
        grads = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                 for p in params]
        for p in params:
            p.zero_grad()
        for i, p in enumerate(params):
            fd = ad.finite_diff_grad(lambda t, i=i: build(*params).item(), p, FD_H)
            assert rel_err(grads[i], fd) < REL_TOL


@pytest.mark.parametrize("name,build,shapes", [
    ("matmul", lambda a, b: ad.total(ad.matmul(a, b)), [(3, 4), (4, 2)]),
    ("add", lambda a, b: ad.total(ad.mul(ad.add(a, b), a)), [(3, 3), (3, 3)]),
    ("sub", lambda a, b: ad.total(ad.mul(ad.sub(a, b), b)), [(2, 4), (2, 4)]),
    ("mul", lambda a, b: ad.total(ad.mul(a, b)), [(5,), (5,)]),
    ("smul", lambda s, a: ad.total(ad.smul(ad.total(s), a)), [(2,), (3, 2)]),
    ("sdiv", lambda a, s: ad.total(ad.sdiv(a, ad.exp(ad.total(s)))), [(3,), (2,)]),
    ("gelu", lambda a: ad.total(ad.gelu(a)), [(4, 3)]),
    ("sigmoid", lambda a: ad.total(ad.mul(ad.sigmoid(a), a)), [(6,)]),
    ("exp", lambda a: ad.total(ad.exp(a)), [(5,)]),
    ("transpose", lambda a, b: ad.total(ad.matmul(ad.transpose(a), b)),
     [(3, 2), (3, 4)]),
    ("take_rows", lambda a: ad.total(ad.take_rows(a, [0, 2, 2])), [(4, 3)]),
    ("cols_hstack", lambda a: ad.total(ad.hstack([ad.cols(a, 0, 2),
                                                  ad.cols(a, 1, 3)])), [(3, 3)]),
    ("vstack", lambda a, b: ad.total(ad.vstack([a, b])), [(2, 3), (1, 3)]),
    ("pick", lambda a: ad.mul(ad.pick(a, 2), ad.pick(a, 0)), [(4,)]),
    ("causal_softmax", lambda a: ad.total(ad.mul(ad.causal_softmax(a), a)),
     [(4, 4)]),
    ("cosine", lambda a, b: ad.cosine_sim(a, b), [(6,), (6,)]),
    ("softmax_ce", lambda a: ad.softmax_cross_entropy(a, [1, 0, 3]), [(3, 4)]),
])
def test_gradient_property_suite(name, build, shapes):
    _check_op(build, shapes, trials=50, seed=hash(name) % (2 ** 32))


def test_ops_deterministic():
    rng = np.random.default_rng(9)
    a = rng.standard_normal((4, 4))
    b = rng.standard_normal((4, 4))
    r1 = ad.matmul(ad.gelu(ad.constant(a)), ad.causal_softmax(ad.constant(b))).data
    r2 = ad.matmul(ad.gelu(ad.constant(a)), ad.causal_softmax(ad.constant(b))).data
    assert np.array_equal(r1, r2)


def test_nonfinite_output_reported():
    big = ad.constant(np.full((2, 2), 1e308))
    with pytest.raises(NonFiniteError):
        ad.add(big, big)
