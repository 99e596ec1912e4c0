import numpy as np
import pytest

from decoupled import autodiff as ad
from decoupled.autodiff import Tensor
from decoupled.errors import ContractError, DimensionError, NumericError


def leaf(x):
    return Tensor(x, requires_grad=True)


def test_matmul_values():
    np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(2)), Tensor([[2.0], [3.0]])).data, [[2.0], [3.0]])
    np.testing.assert_array_equal(ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data, [[11.0]])


def test_matmul_gradient_hand_case():
    A = leaf([[1.0, 2.0], [3.0, 4.0]])
    ad.backward(ad.sum_(ad.matmul(A, Tensor(np.eye(2)))))
    np.testing.assert_allclose(A.grad, np.ones((2, 2)))
    report = ad.gradcheck(lambda a: ad.sum_(ad.matmul(a, Tensor(np.eye(2)))), A.data)
    np.testing.assert_allclose(report["numeric"], np.ones((2, 2)), atol=1e-8)


@pytest.mark.parametrize(
    "op, a, b",
    [
        (ad.matmul, np.zeros((2, 3)), np.zeros((2, 3))),
        (ad.add, np.zeros(3), np.zeros(4)),
        (ad.sub, np.zeros((2, 2)), np.zeros((2, 1))),
        (ad.hadamard, np.zeros(2), np.zeros((2, 1))),
    ],
)
def test_shape_mismatch_raises(op, a, b):
    with pytest.raises(DimensionError):
        op(Tensor(a), Tensor(b))


def test_pointwise_values():
    assert ad.tanh(Tensor(0.0)).data == 0.0
    assert ad.relu(Tensor(-1.5)).data == 0.0
    x = leaf(0.0)
    ad.backward(ad.tanh(x))
    assert x.grad == pytest.approx(1.0)


def test_relu_subgradient_at_zero_is_zero():
    x = leaf([0.0, 1.0, -1.0])
    ad.backward(ad.sum_(ad.relu(x)))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_scale_accepts_scalars_only():
    with pytest.raises(DimensionError):
        ad.scale(Tensor([1.0, 2.0]), np.array([1.0, 2.0]))
    np.testing.assert_array_equal(ad.scale(Tensor([1.0, 2.0]), 3).data, [3.0, 6.0])


def test_sum_gradient_is_ones():
    t = leaf([0.3, -1.0, 2.0])
    ad.backward(ad.sum_(t))
    np.testing.assert_array_equal(t.grad, [1.0, 1.0, 1.0])


def test_half_squared_norm_gradient():
    t = leaf([1.0, -2.0])
    ad.backward(ad.scale(ad.sum_(ad.hadamard(t, t)), 0.5))
    np.testing.assert_array_equal(t.grad, [1.0, -2.0])


def test_backward_requires_scalar():
    with pytest.raises(ContractError):
        ad.backward(leaf([1.0, 2.0]) * 2.0)


def test_backward_twice_doubles_gradients(rng):
    w = leaf(rng.normal(size=(3, 2)))
    x = Tensor(rng.normal(size=(4, 3)))
    loss = ad.sum_(ad.tanh(ad.matmul(x, w)))
    ad.backward(loss)
    first = w.grad.copy()
    ad.backward(loss)
    np.testing.assert_array_equal(w.grad, 2 * first)


def test_backward_is_deterministic(rng):
    W = rng.normal(size=(3, 3))
    grads = []
    for _ in range(2):
        w = leaf(W)
        ad.backward(ad.sum_(ad.softmax(ad.matmul(w, w))))
        grads.append(w.grad)
    np.testing.assert_array_equal(grads[0], grads[1])


def test_tape_is_topological(rng):
    a, b = leaf(rng.normal(size=(2, 2))), leaf(rng.normal(size=(2, 2)))
    c = ad.tanh(a @ b)
    out = ad.sum_(c * c + a)
    tape = ad.Tape.from_output(out)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    assert len(pos) == len(tape.nodes)
    for n in tape.nodes:
        for p in n._parents:
            assert pos[id(p)] < pos[id(n)]
    assert {id(t) for t in tape.leaves()} == {id(a), id(b)}


def test_mlp_forward_trivial_cases(rng):
    x = Tensor(rng.normal(size=(5, 3)))
    zero = [(Tensor(np.zeros((3, 4))), Tensor(np.zeros(4)), "tanh")]
    np.testing.assert_array_equal(ad.mlp_forward(zero, x).data, 0.0)
    ident = [(Tensor(np.eye(3)), Tensor(np.zeros(3)), "identity")]
    np.testing.assert_array_equal(ad.mlp_forward(ident, x).data, x.data)


def test_mlp_forward_hand_evaluation():
    w1 = np.array([[1.0, -1.0], [2.0, 0.5]])
    b1 = np.array([0.0, 0.25])
    w2 = np.array([[1.0], [3.0]])
    b2 = np.array([-1.0])
    layers = [(Tensor(w1), Tensor(b1), "relu"), (Tensor(w2), Tensor(b2), "identity")]
    out = ad.mlp_forward(layers, Tensor([[1.0, 1.0]]))
    # hidden = relu([1+2, -1+0.5+0.25]) = [3, 0]; output = 3*1 + 0*3 - 1 = 2
    np.testing.assert_array_equal(out.data, [[2.0]])


def test_mlp_forward_chain_break():
    layers = [(Tensor(np.zeros((3, 4))), Tensor(np.zeros(4)), "tanh"), (Tensor(np.zeros((5, 1))), Tensor(np.zeros(1)), None)]
    with pytest.raises(DimensionError):
        ad.mlp_forward(layers, Tensor(np.zeros((2, 3))))


def test_mlp_mse_gradcheck(rng):
    x = Tensor(rng.normal(size=(6, 3)))
    y = rng.normal(size=(6, 2))
    shapes = [(3, 5), (5,), (5, 2), (2,)]
    sizes = [int(np.prod(s)) for s in shapes]

    def f(theta):
        parts, off = [], 0
        for s, n in zip(shapes, sizes):
            parts.append(ad.reshape(ad.take(theta, slice(off, off + n)), s))
            off += n
        layers = [(parts[0], parts[1], "tanh"), (parts[2], parts[3], None)]
        return ad.mse(ad.mlp_forward(layers, x), y)

    report = ad.gradcheck(f, rng.normal(size=sum(sizes)) * 0.5)
    assert report["max_relative_error"] < 1e-5


UNARY = {
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "relu": ad.relu,
    "abs": ad.abs_,
    "softmax": ad.softmax,
    "sparsemax": ad.sparsemax,
    "transpose": lambda a: ad.transpose(a),
    "reshape": lambda a: ad.reshape(a, (-1,)),
    "take": lambda a: ad.take(a, (slice(None), [0, 2, 2])),
    "scale": lambda a: ad.scale(a, -1.7),
    "mean": ad.mean,
    "sum_axis": lambda a: ad.sum_(a, axis=0),
}


def _away_from_kinks(name, x):
    if name in ("relu", "abs"):
        return np.min(np.abs(x)) > 1e-3
    if name == "sparsemax":
        from decoupled.projections import sparsemax_threshold

        tau, _ = sparsemax_threshold(x)
        return np.min(np.abs(x - tau)) > 1e-3
    return True


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_primitives_gradcheck(rng, name):
    fn = UNARY[name]
    done = 0
    while done < 100:
        x = rng.normal(size=(3, 4))
        if not _away_from_kinks(name, x):
            continue
        c = rng.normal(size=fn(Tensor(x)).shape)
        report = ad.gradcheck(lambda t: ad.sum_(ad.hadamard(fn(t), Tensor(c))), x, atol=1e-4)
        assert report["max_relative_error"] < 1e-5, name
        done += 1


BINARY = {
    "add": (ad.add, (2, 3), (2, 3)),
    "sub": (ad.sub, (2, 3), (2, 3)),
    "hadamard": (ad.hadamard, (2, 3), (2, 3)),
    "matmul": (ad.matmul, (2, 3), (3, 4)),
    "bmm": (ad.bmm, (2, 3, 4), (2, 4, 2)),
    "add_row": (ad.add_row, (2, 3), (3,)),
    "expand_add": (lambda a, b: ad.expand_add(a, b, 1), (2, 3, 4), (2, 4)),
    "concat": (lambda a, b: ad.concat([a, b], axis=0), (2, 3), (1, 3)),
    "stack": (lambda a, b: ad.stack([a, b], axis=1), (2, 3), (2, 3)),
}


# Entries whose true gradient is tiny (|g| < 1e-4) are judged on absolute error,
# which is where central-difference round-off lives.
SWEEP_ATOL = 1e-4


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_primitives_gradcheck(rng, name):
    fn, sa, sb = BINARY[name]
    for _ in range(100):
        a0, b0 = rng.normal(size=sa), rng.normal(size=sb)
        c = rng.normal(size=fn(Tensor(a0), Tensor(b0)).shape)
        ra = ad.gradcheck(lambda t: ad.sum_(ad.hadamard(fn(t, Tensor(b0)), Tensor(c))), a0, atol=SWEEP_ATOL)
        rb = ad.gradcheck(lambda t: ad.sum_(ad.hadamard(fn(Tensor(a0), t), Tensor(c))), b0, atol=SWEEP_ATOL)
        assert ra["max_relative_error"] < 1e-5 and rb["max_relative_error"] < 1e-5, name


@pytest.mark.parametrize("loss", ["mse", "bce"])
def test_losses_gradcheck(rng, loss):
    target = rng.normal(size=(4, 3)) if loss == "mse" else (rng.random((4, 3)) > 0.5).astype(float)
    fn = ad.mse if loss == "mse" else ad.bce_with_logits
    for _ in range(20):
        report = ad.gradcheck(lambda t: fn(t, target), rng.normal(size=(4, 3)))
        assert report["max_relative_error"] < 1e-5


def test_gradcheck_identity_sum_is_exact():
    report = ad.gradcheck(ad.sum_, np.array([0.5, -1.0, 2.0]))
    assert report["max_relative_error"] < 1e-9
    assert report["passed"]


def test_gradcheck_quadratic_error_is_second_order(rng):
    Q = rng.normal(size=(3, 3))
    x0 = rng.normal(size=3)

    def cubic(t):
        # the cubic term makes the central-difference error visible: O(h^2)
        return ad.sum_(ad.hadamard(ad.hadamard(t, t), t)) + ad.sum_(ad.hadamard(t, ad.matmul(Tensor(Q), ad.reshape(t, (3, 1))).reshape(3)))

    errs = []
    for h in (1e-2, 5e-3):
        r = ad.gradcheck(cubic, x0, h=h)
        errs.append(np.abs(r["analytic"] - r["numeric"]).max())
    assert 3.5 < errs[0] / errs[1] < 4.5


def test_gradcheck_reports_non_finite():
    with pytest.raises(NumericError):
        ad.gradcheck(lambda t: ad.sum_(ad.scale(t, np.inf)), np.array([1.0]))


def test_bce_is_stable_for_large_logits():
    out = ad.bce_with_logits(Tensor([1000.0, -1000.0]), np.array([1.0, 0.0]))
    assert np.isfinite(out.data) and out.data < 1e-12
