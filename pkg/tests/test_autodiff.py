import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from haplo import autodiff as ad
from haplo.autodiff import Tensor

TOL = 1e-4


def rand(rng, *shape):
    return rng.normal(size=shape)


# ---- matmul ----------------------------------------------------------------

def test_matmul_identity():
    out = ad.matmul(Tensor([[1.0, 0], [0, 1]]), Tensor([[2.0, 3], [4, 5]]))
    np.testing.assert_array_equal(out.data, [[2, 3], [4, 5]])


def test_matmul_hand_arithmetic():
    out = Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])
    np.testing.assert_array_equal(out.data, [[11.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradcheck():
    rng = np.random.default_rng(0)
    errs = ad.gradcheck(lambda a, b: (a @ b).sum() * 0.5 + ((a @ b) * (a @ b)).sum(),
                        [rand(rng, 4, 5), rand(rng, 5, 3)])
    assert max(errs) < TOL


def test_batched_matmul_gradcheck_broadcast_weight():
    rng = np.random.default_rng(1)
    w = rand(rng, 5, 3)
    errs = ad.gradcheck(lambda a, b: ((a @ b) * (a @ b)).sum(), [rand(rng, 2, 4, 5), w])
    assert max(errs) < TOL


# ---- softmax ---------------------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)


def test_softmax_stabilized():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        out = ad.softmax(Tensor([1000.0, 0.0])).data
    assert out[0] == pytest.approx(1.0) and out[1] < 1e-300


def test_softmax_jacobian():
    rng = np.random.default_rng(2)
    c = rand(rng, 6)
    errs = ad.gradcheck(lambda x: (ad.softmax(x, axis=-1) * Tensor(c)).sum(), [rand(rng, 3, 6)])
    assert max(errs) < TOL


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_rows_sum_to_one(values):
    y = ad.softmax(Tensor(values)).data
    assert np.all(y >= 0)
    assert abs(y.sum() - 1) < 1e-6


# ---- norms and activations -------------------------------------------------

def test_layer_norm_constant_row_is_zero():
    np.testing.assert_allclose(ad.layer_norm(Tensor([1.0, 1.0, 1.0])).data, [0, 0, 0])


def test_layer_norm_rejects_nonpositive_eps():
    with pytest.raises(ValueError):
        ad.layer_norm(Tensor([1.0, 2.0]), eps=0.0)


def test_rms_norm_hand_arithmetic():
    out = ad.rms_norm(Tensor([3.0, 4.0]), Tensor([1.0, 1.0]), eps=0.0).data
    np.testing.assert_allclose(out, [3 / np.sqrt(12.5), 4 / np.sqrt(12.5)])


def test_layer_norm_row_statistics():
    rng = np.random.default_rng(3)
    y = ad.layer_norm(Tensor(rand(rng, 5, 8) * 3 + 2), eps=1e-12).data
    np.testing.assert_allclose(y.mean(-1), 0, atol=1e-10)
    np.testing.assert_allclose(y.var(-1), 1, atol=1e-8)


def test_norm_gradchecks():
    rng = np.random.default_rng(4)
    c = Tensor(rand(rng, 3, 6))
    errs = ad.gradcheck(lambda x, g, b: (ad.layer_norm(x, g, b, 1e-5) * c).sum(),
                        [rand(rng, 3, 6), rand(rng, 6), rand(rng, 6)])
    assert max(errs) < TOL
    errs = ad.gradcheck(lambda x, g: (ad.rms_norm(x, g, 1e-6) * c).sum(),
                        [rand(rng, 3, 6), rand(rng, 6)])
    assert max(errs) < TOL


def test_activations_at_zero_and_closed_form():
    assert ad.gelu(Tensor(0.0)).item() == 0.0
    assert ad.silu(Tensor(0.0)).item() == 0.0
    from math import erf, exp, sqrt
    for v in (-3.0, -0.5, 0.7, 2.5):
        assert ad.gelu(Tensor(v)).item() == pytest.approx(0.5 * v * (1 + erf(v / sqrt(2))), abs=1e-6)
        assert ad.silu(Tensor(v)).item() == pytest.approx(v / (1 + exp(-v)), abs=1e-6)


def test_activation_gradchecks():
    rng = np.random.default_rng(5)
    c = Tensor(rand(rng, 4, 5))
    for fn in (ad.gelu, ad.silu):
        assert max(ad.gradcheck(lambda x: (fn(x) * c).sum(), [rand(rng, 4, 5)])) < TOL


# ---- cross entropy ---------------------------------------------------------

def test_cross_entropy_uniform():
    assert ad.cross_entropy(Tensor(np.zeros((3, 7))), [0, 3, 6]).item() == pytest.approx(np.log(7), abs=1e-12)


def test_cross_entropy_saturated():
    logits = np.zeros((2, 5))
    logits[0, 1] = logits[1, 4] = 1e6
    assert ad.cross_entropy(Tensor(logits), [1, 4]).item() == pytest.approx(0.0, abs=1e-9)


def test_cross_entropy_matches_logsumexp_oracle():
    rng = np.random.default_rng(6)
    logits = rand(rng, 9, 11) * 3
    t = rng.integers(0, 11, size=9)
    t[[2, 5]] = -100
    keep = t != -100
    expected = np.mean([np.log(np.sum(np.exp(row))) - row[k] for row, k in zip(logits[keep], t[keep])])
    assert ad.cross_entropy(Tensor(logits), t).item() == pytest.approx(expected, abs=1e-6)
    errs = ad.gradcheck(lambda x: ad.cross_entropy(x, t), [logits])
    assert max(errs) < TOL


def test_cross_entropy_all_ignored_warns():
    with pytest.warns(ad.EmptyLossWarning):
        out = ad.cross_entropy(Tensor(np.ones((2, 3))), [-100, -100])
    assert out.item() == 0.0


def test_cross_entropy_bad_target():
    with pytest.raises(IndexError):
        ad.cross_entropy(Tensor(np.ones((2, 3))), [0, 3])


# ---- backward driver -------------------------------------------------------

def test_backward_sum():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, [1, 1, 1])


def test_backward_dot():
    x = Tensor([1.0, 2.0], requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2, 4])


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ad.ShapeError):
        (x * 2.0).backward()


def test_grad_accumulates_additively():
    x = Tensor([1.0, -2.0], requires_grad=True)
    (x * x).sum().backward()
    first = x.grad.copy()
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, 2 * first)


def test_tape_visits_each_node_once():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = x * x
    z = (y + y * x).sum()
    tape = z.tape()
    assert len(tape) == len({id(n) for n in tape})
    assert tape[-1] is z and tape[0] is x


def test_backward_is_linear():
    rng = np.random.default_rng(7)
    xv = rand(rng, 4, 3)

    def grad_of(fn):
        x = Tensor(xv.copy(), requires_grad=True)
        fn(x).backward()
        return x.grad

    f = lambda x: ad.softmax(x).sum() * 0 + (ad.gelu(x) * x).sum()
    g = lambda x: ad.layer_norm(x, eps=1e-5).mean() + (x * x * x).sum()
    combo = grad_of(lambda x: f(x) * 2.5 + g(x) * -0.75)
    np.testing.assert_allclose(combo, 2.5 * grad_of(f) - 0.75 * grad_of(g), atol=1e-6)


def test_suffix_broadcast_only():
    ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))
    with pytest.raises(ad.ShapeError):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 1))))


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad


# ---- structural ops --------------------------------------------------------

def test_shape_op_gradchecks():
    rng = np.random.default_rng(8)
    c = rand(rng, 3, 2, 4)
    idx = np.array([[0, 2], [2, 1]])

    def fn(x, y):
        t = ad.take(x, idx)                       # (2,2,4)
        cat = ad.concat([t.reshape(4, 4), y], axis=0)  # (7,4)
        m = ad.masked_fill(cat, np.eye(7, 4, dtype=bool), -3.0)
        tr = m.transpose(1, 0)
        return (tr * tr).sum() + (ad.exp(y * 0.1) * Tensor(c[:, 0, :])).sum()

    errs = ad.gradcheck(fn, [rand(rng, 3, 4), rand(rng, 3, 4)])
    assert max(errs) < TOL


def test_rope_gradcheck_and_norm_preservation():
    rng = np.random.default_rng(9)
    cos, sin = ad.rope_tables(np.arange(5), 6)
    x = rand(rng, 2, 5, 6)
    y = ad.rope(Tensor(x), cos, sin).data
    np.testing.assert_allclose(np.linalg.norm(y, axis=-1), np.linalg.norm(x, axis=-1))
    np.testing.assert_allclose(y[:, 0], x[:, 0])  # position 0 is unrotated
    c = Tensor(rand(rng, 2, 5, 6))
    assert max(ad.gradcheck(lambda t: (ad.rope(t, cos, sin) * c).sum(), [x])) < TOL


def test_rope_relative_property():
    rng = np.random.default_rng(10)
    q, k = rand(rng, 8), rand(rng, 8)

    def score(i, j):
        ci, si = ad.rope_tables([i], 8)
        cj, sj = ad.rope_tables([j], 8)
        return float((ad.rope(Tensor(q[None]), ci, si).data @ ad.rope(Tensor(k[None]), cj, sj).data.T)[0, 0])

    assert score(5, 2) == pytest.approx(score(13, 10), abs=1e-10)


def test_cosine_and_l2_gradchecks():
    rng = np.random.default_rng(11)
    assert max(ad.gradcheck(lambda a, b: ad.cosine_similarity(a, b).sum(), [rand(rng, 4, 5), rand(rng, 4, 5)])) < TOL
    assert max(ad.gradcheck(lambda a: ad.l2_norm(a).sum(), [rand(rng, 4, 5)])) < TOL


def test_cosine_zero_row_defined_as_zero():
    a = Tensor(np.array([[0.0, 0.0], [1.0, 0.0]]), requires_grad=True)
    cos = ad.cosine_similarity(a, Tensor(np.array([[1.0, 2.0], [2.0, 0.0]])))
    np.testing.assert_allclose(cos.data, [0.0, 1.0])
    cos.sum().backward()
    np.testing.assert_array_equal(a.grad[0], [0.0, 0.0])


def test_replay_is_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(12)
        w = Tensor(rand(rng, 6, 6), requires_grad=True)
        x = Tensor(rand(rng, 3, 6))
        ad.cross_entropy(ad.gelu(x @ w) @ w, [0, 1, 2]).backward()
        return w.grad

    assert np.array_equal(run(), run())
