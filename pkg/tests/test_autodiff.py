"""Forward/backward unit tests and finite-difference checks for every primitive."""

import numpy as np
import pytest

from tinyembed import autodiff as ad
from tinyembed.autodiff import Tensor


def leaf(values, requires_grad=True):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=requires_grad)


# --- forward oracles -------------------------------------------------------


def test_softmax_uniform_on_zeros():
    p = ad.row_softmax(leaf([[0.0, 0.0, 0.0]]))
    np.testing.assert_allclose(p.values, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-12)


def test_rms_norm_constant_vector():
    out = ad.rms_norm(leaf([[2.0, 2.0, 2.0, 2.0]]), leaf(np.ones(4)), eps=1e-6)
    np.testing.assert_allclose(out.values, np.ones((1, 4)), atol=1e-6)


def test_matmul_matches_triple_loop_oracle():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((3, 2))
    got = ad.matmul(leaf(a), leaf(b)).values
    want = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            for k in range(3):
                want[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(got, want, atol=1e-6)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(1)
    x = leaf(rng.standard_normal((5, 7)) * 3)
    p = ad.row_softmax(x).values
    np.testing.assert_allclose(p.sum(axis=1), np.ones(5), atol=1e-6)
    mask = rng.random((5, 7)) > 0.3
    mask[:, 0] = True
    pm = ad.row_softmax(x, mask=mask).values
    np.testing.assert_allclose(pm.sum(axis=1), np.ones(5), atol=1e-6)
    assert (pm[~mask] == 0).all()


def test_l2_normalize_rows_unit_norm():
    rng = np.random.default_rng(2)
    y = ad.l2_normalize_rows(leaf(rng.standard_normal((6, 9)))).values
    np.testing.assert_allclose(np.linalg.norm(y, axis=1), np.ones(6), atol=1e-6)


def test_rope_preserves_norm_and_position_zero():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 8))
    y = ad.rope(leaf(x), head_dim=8).values
    # rotations are orthogonal per position
    np.testing.assert_allclose(np.linalg.norm(y, axis=1), np.linalg.norm(x, axis=1), atol=1e-9)
    # position 0 rotates by angle 0
    np.testing.assert_allclose(y[0], x[0], atol=1e-12)


# --- error handling --------------------------------------------------------


def test_shape_error_names_primitive_and_shapes():
    with pytest.raises(ad.ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        ad.matmul(leaf(np.zeros((2, 3))), leaf(np.zeros((2, 3))))


def test_non_finite_is_hard_error():
    big = leaf(np.full((1, 2), 1e300))
    with np.errstate(over="ignore"), pytest.raises(ad.NonFiniteError, match="mul"):
        ad.mul(big, big)


def test_backward_requires_scalar_loss():
    x = leaf(np.ones((2, 2)))
    y = ad.add(x, x)
    with pytest.raises(ad.ShapeError, match="scalar"):
        ad.backward(y)


def test_zero_norm_row_rejected():
    with pytest.raises(ValueError, match="zero norm"):
        ad.l2_normalize_rows(leaf(np.zeros((1, 4))))


# --- backward oracles ------------------------------------------------------


def test_backward_sum_gives_ones():
    x = leaf(np.arange(6.0).reshape(2, 3))
    ad.backward(ad.sum_all(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_half_squared_norm_gives_x():
    rng = np.random.default_rng(4)
    v = rng.standard_normal((3, 4))
    x = leaf(v)
    ad.backward(ad.scale(ad.sum_all(ad.mul(x, x)), 0.5))
    np.testing.assert_allclose(x.grad, v, atol=1e-12)


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    logits = np.array([[0.2, -1.0, 0.7]])
    x = leaf(logits)
    ad.backward(ad.cross_entropy(x, [1]))
    e = np.exp(logits - logits.max())
    p = e / e.sum()
    want = p.copy()
    want[0, 1] -= 1.0
    np.testing.assert_allclose(x.grad, want, atol=1e-12)


def test_shared_subexpression_accumulates_like_duplicate_graph():
    rng = np.random.default_rng(5)
    v = rng.standard_normal((3, 3))
    x = leaf(v)
    y = ad.silu(x)
    ad.backward(ad.sum_all(ad.add(y, y)))
    shared_grad = x.grad.copy()

    x1, x2 = leaf(v), leaf(v)
    ad.backward(ad.sum_all(ad.add(ad.silu(x1), ad.silu(x2))))
    np.testing.assert_allclose(shared_grad, x1.grad + x2.grad, atol=1e-12)


def test_non_trainable_leaves_untouched():
    x = leaf(np.ones((2, 2)))
    c = leaf(np.ones((2, 2)), requires_grad=False)
    ad.backward(ad.sum_all(ad.mul(x, c)))
    assert c.grad is None
    assert x.grad is not None


def test_no_grad_builds_no_graph():
    x = leaf(np.ones((2, 2)))
    with ad.no_grad():
        y = ad.add(x, x)
    assert not y.requires_grad and y._parents == ()


def test_graph_node_visited_once():
    x = leaf(np.ones((2, 2)))
    y = ad.add(x, x)
    z = ad.sum_all(ad.add(y, y))
    graph = ad.trace(z)
    assert len({id(n) for n in graph.nodes}) == len(graph.nodes)


# --- finite-difference checks for every primitive --------------------------

RNG = np.random.default_rng(7)
_B = Tensor(RNG.standard_normal((4, 3)), requires_grad=False)
_C = Tensor(RNG.standard_normal((3, 5)), requires_grad=False)
_W = Tensor(RNG.standard_normal((3, 4)), requires_grad=False)
_MASK = np.tril(np.ones((3, 3), dtype=bool))

SMOOTH = 1e-5
DEFAULT = 1e-3

GRAD_CASES = {
    "matmul": (lambda x: ad.sum_all(ad.mul(ad.matmul(x, _C), ad.matmul(x, _C))), (4, 3), SMOOTH),
    "matmul_rhs": (lambda x: ad.sum_all(ad.mul(ad.matmul(_B, x), ad.matmul(_B, x))), (3, 5), SMOOTH),
    "transpose": (lambda x: ad.sum_all(ad.mul(ad.transpose(x), _C)), (5, 3), SMOOTH),
    "add": (lambda x: ad.sum_all(ad.mul(ad.add(x, _W), ad.add(x, _W))), (3, 4), SMOOTH),
    "mul": (lambda x: ad.sum_all(ad.silu(ad.mul(x, _W))), (3, 4), SMOOTH),
    "scale": (lambda x: ad.sum_all(ad.silu(ad.scale(x, 1.7))), (3, 4), SMOOTH),
    "row_softmax": (lambda x: ad.sum_all(ad.mul(ad.row_softmax(x), _W)), (3, 4), SMOOTH),
    "row_softmax_masked": (
        lambda x: ad.sum_all(ad.mul(ad.row_softmax(x, mask=_MASK), Tensor(np.ones((3, 3))))),
        (3, 3),
        SMOOTH,
    ),
    "rms_norm": (lambda x: ad.sum_all(ad.mul(ad.rms_norm(x, Tensor(np.full(4, 1.3))), _W)), (3, 4), SMOOTH),
    "rms_norm_gain": (lambda x: ad.sum_all(ad.mul(ad.rms_norm(_W, ad.reshape(x, (4,))), _W)), (4, 1), SMOOTH),
    "rms_norm_grouped": (
        lambda x: ad.sum_all(ad.mul(ad.rms_norm(x, Tensor(np.full(2, 0.8)), group_size=2), _W)),
        (3, 4),
        SMOOTH,
    ),
    "silu": (lambda x: ad.sum_all(ad.silu(x)), (3, 4), SMOOTH),
    "gather_rows": (lambda x: ad.sum_all(ad.silu(ad.gather_rows(x, [0, 2, 2]))), (4, 3), SMOOTH),
    "slice_cols": (lambda x: ad.sum_all(ad.silu(ad.slice_cols(x, 1, 3))), (3, 4), SMOOTH),
    "reshape": (lambda x: ad.sum_all(ad.silu(ad.reshape(x, (2, 6)))), (3, 4), SMOOTH),
    "concat": (lambda x: ad.sum_all(ad.silu(ad.concat([x, x], axis=1))), (3, 4), SMOOTH),
    "concat_rows": (lambda x: ad.sum_all(ad.silu(ad.concat([x, ad.scale(x, 2.0)], axis=0))), (3, 4), SMOOTH),
    "mean_all": (lambda x: ad.mean_all(ad.silu(x)), (3, 4), SMOOTH),
    "sum_all": (lambda x: ad.sum_all(ad.silu(x)), (3, 4), SMOOTH),
    "l2_normalize_rows": (lambda x: ad.sum_all(ad.mul(ad.l2_normalize_rows(x), _W)), (3, 4), SMOOTH),
    "mse": (lambda x: ad.mse(x, _W), (3, 4), SMOOTH),
    "mse_rhs": (lambda x: ad.mse(_W, x), (3, 4), SMOOTH),
    "cross_entropy": (lambda x: ad.cross_entropy(x, [2, 0, 1]), (3, 4), SMOOTH),
    "rope": (lambda x: ad.sum_all(ad.silu(ad.rope(x, head_dim=4))), (5, 8), SMOOTH),
}


def test_every_registered_primitive_has_a_grad_case():
    checked = {name.split("_rhs")[0] for name in GRAD_CASES}
    checked = {n[:-len("_masked")] if n.endswith("_masked") else n for n in checked}
    checked = {n[:-len("_gain")] if n.endswith("_gain") else n for n in checked}
    checked = {n[:-len("_grouped")] if n.endswith("_grouped") else n for n in checked}
    checked = {n[:-len("_rows")] if n == "concat_rows" else n for n in checked}
    assert set(ad.primitive_set()) <= checked


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_primitive_gradient(name):
    fn, shape, tol = GRAD_CASES[name]
    point = Tensor(np.random.default_rng(abs(hash(name)) % 2**32).standard_normal(shape))
    err = ad.grad_check(fn, point, tolerance=tol)
    assert err < tol


# --- grad_check behavior ----------------------------------------------------


def test_grad_check_affine_is_exact():
    fn = lambda x: ad.add(ad.scale(ad.sum_all(x), 3.0), Tensor(np.asarray(1.5)))
    err = ad.grad_check(fn, Tensor(np.random.default_rng(8).standard_normal((3, 3))), tolerance=1e-10)
    assert err < 1e-10


def test_grad_check_softmax_cross_entropy():
    fn = lambda x: ad.cross_entropy(x, [3])
    err = ad.grad_check(fn, Tensor(np.random.default_rng(9).standard_normal((1, 8))), tolerance=1e-5)
    assert err < 1e-5


def test_grad_check_raises_on_wrong_gradient():
    bad = Tensor.__new__(Tensor)

    def fn(x):
        out = ad.sum_all(x)
        wrong = ad.scale(out, 1.0)
        wrong._vjp = lambda g: (np.full_like(x.values, 5.0),)
        wrong._parents = (x,)
        wrong.requires_grad = True
        return wrong

    with pytest.raises(ad.GradientCheckError):
        ad.grad_check(fn, Tensor(np.ones((2, 2))), tolerance=1e-3)


def test_grad_check_subsampling_is_deterministic():
    fn = lambda x: ad.sum_all(ad.silu(x))
    pt = Tensor(np.random.default_rng(10).standard_normal((6, 6)))
    e1 = ad.grad_check(fn, pt, tolerance=1e-4, max_coords=10, seed=3)
    e2 = ad.grad_check(fn, pt, tolerance=1e-4, max_coords=10, seed=3)
    assert e1 == e2
