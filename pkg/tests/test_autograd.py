import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sptlsa import autograd as ag
from sptlsa.autograd import Parameter, Tensor


def numeric_grad(fn, x, eps=1e-6):
    """Plain central differences of a scalar numpy function."""
    x = x.astype(np.float64).copy()
    g = np.zeros_like(x)
    for i in range(x.size):
        orig = x.flat[i]
        x.flat[i] = orig + eps
        up = fn(x)
        x.flat[i] = orig - eps
        down = fn(x)
        x.flat[i] = orig
        g.flat[i] = (up - down) / (2 * eps)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8))


# ------------------------------------------------------------------ matmul

def test_matmul_identity():
    out = ag.matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_projector():
    out = ag.matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0], [7.0]]))
    np.testing.assert_array_equal(out.data, [[5], [0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ag.ShapeError, match=r"\(3, 4\).*\(3, 2\)"):
        ag.matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 2))))


def test_matmul_gradients_match_central_differences():
    rng = np.random.default_rng(0)
    a0, b0 = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    w = rng.normal(size=(3, 2))
    a, b = Parameter(a0), Parameter(b0)
    (ag.matmul(a, b) * w).sum().backward()
    ga = numeric_grad(lambda x: np.sum((x @ b0) * w), a0)
    gb = numeric_grad(lambda x: np.sum((a0 @ x) * w), b0)
    assert rel_err(a.grad, ga) < 1e-6
    assert rel_err(b.grad, gb) < 1e-6


# ----------------------------------------------------------------- softmax

def test_softmax_symmetric_row():
    np.testing.assert_allclose(ag.tempered_softmax(Tensor([[0.0, 0.0]]), 1.0).data, [[0.5, 0.5]])


@pytest.mark.parametrize("tau", [0.1, 1.0, 7.0])
def test_softmax_single_survivor(tau):
    out = ag.tempered_softmax(Tensor([[-np.inf, 3.0]]), tau).data
    assert out[0, 0] == 0.0 and out[0, 1] == 1.0


def test_softmax_sharpening_keeps_argmax():
    row = Tensor([[1.0, 2.0, 3.0]])
    sharp = ag.tempered_softmax(row, 0.5).data[0]
    flat = ag.tempered_softmax(row, 2.0).data[0]
    assert np.argmax(sharp) == np.argmax(flat) == 2
    assert np.var(sharp) > np.var(flat)


def test_softmax_rejects_nonpositive_temperature():
    with pytest.raises(ag.DomainError):
        ag.tempered_softmax(Tensor([[1.0, 2.0]]), 0.0)


def test_softmax_rejects_fully_masked_row():
    with pytest.raises(ag.DegenerateRowError):
        ag.tempered_softmax(Tensor([[ag.MASK_VALUE, -np.inf]]), 1.0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)),
       st.floats(1e-2, 1e2))
def test_softmax_rows_are_distributions(logits, tau):
    p = ag.tempered_softmax(Tensor(logits), tau).data
    assert np.all((p >= 0) & (p <= 1))
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    # near-ties may round to equal probabilities, so compare the mass at the logit argmax
    top = np.argmax(logits, axis=-1)
    np.testing.assert_array_equal(p[np.arange(3), top], p.max(axis=-1))


def test_softmax_temperature_gradient_by_oracle():
    rng = np.random.default_rng(1)
    logits = Parameter(rng.normal(size=(4, 6)))
    tau = Parameter(np.array(0.7))
    w = rng.normal(size=(4, 6))
    err = ag.finite_diff_check(lambda: (ag.tempered_softmax(logits, tau) * w).sum(), [logits, tau])
    assert err < 1e-6


def test_softmax_temperature_gradient_ignores_masked_entries():
    logits = Parameter([[ag.MASK_VALUE, 1.0, 2.0], [0.5, ag.MASK_VALUE, -1.0]])
    tau = Parameter(np.array(0.3))
    out = ag.tempered_softmax(logits, tau)
    (out * Tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])).sum().backward()
    assert np.isfinite(tau.grad).all()
    assert logits.grad[0, 0] == 0.0 and logits.grad[1, 1] == 0.0


# -------------------------------------------------------------- layer norm

def test_layer_norm_constant_row_collapses_to_bias():
    out = ag.layer_norm(Tensor([[5.0, 5.0, 5.0, 5.0]]), Parameter(np.ones(4)), Parameter(np.zeros(4)))
    np.testing.assert_array_equal(out.data, [[0, 0, 0, 0]])


def test_layer_norm_already_normalized():
    out = ag.layer_norm(Tensor([[1.0, -1.0]]), Parameter(np.ones(2)), Parameter(np.zeros(2)), eps=1e-14)
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-12)


def test_layer_norm_gradients():
    rng = np.random.default_rng(2)
    x = Parameter(rng.normal(size=(2, 8)))
    gain = Parameter(rng.normal(size=8))
    bias = Parameter(rng.normal(size=8))
    w = rng.normal(size=(2, 8))
    err = ag.finite_diff_check(lambda: (ag.layer_norm(x, gain, bias) * w).sum(), [x, gain, bias])
    assert err < 1e-5


# ---------------------------------------------------------------- backward

def test_backward_sum_gives_ones():
    w = Parameter([1.0, 2.0, 3.0])
    w.sum().backward()
    np.testing.assert_array_equal(w.grad, [1, 1, 1])


def test_backward_square_is_analytic():
    w = Parameter([1.0, 2.0, 3.0])
    (w * w).sum().backward()
    np.testing.assert_array_equal(w.grad, [2, 4, 6])


def test_backward_accumulates_across_calls():
    w = Parameter([1.0, 2.0])
    out = w.sum()
    out.backward()
    out.backward()
    np.testing.assert_array_equal(w.grad, [2, 2])


def test_backward_rejects_non_scalar():
    with pytest.raises(ValueError):
        ag.backward(Parameter([1.0, 2.0]) * 2.0)


def test_tape_is_topological_and_visits_once():
    x = Parameter([1.0, 2.0])
    y = x * x
    z = y + x
    out = (z * y).sum()
    tape = ag.build_tape(out)
    assert len({id(t) for t in tape}) == len(tape)
    position = {id(t): i for i, t in enumerate(tape)}
    for node in tape:
        for parent in node._parents:
            if parent.requires_grad:
                assert position[id(parent)] < position[id(node)]


def test_shared_subexpressions_sum_per_path_gradients():
    # out = sum(gelu(x) * (x @ m)) with x used twice: autodiff gradient equals
    # the sum of gradients taken with each use of x as its own leaf.
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=(2, 3))
    m = rng.normal(size=(3, 3))

    x = Parameter(x0)
    (ag.gelu(x) * ag.matmul(x, Tensor(m))).sum().backward()

    path1, path2 = Parameter(x0), Parameter(x0)
    (ag.gelu(path1) * ag.matmul(Tensor(x0), Tensor(m))).sum().backward()
    (ag.gelu(Tensor(x0)) * ag.matmul(path2, Tensor(m))).sum().backward()
    np.testing.assert_allclose(x.grad, path1.grad + path2.grad, rtol=1e-13, atol=1e-15)


# ------------------------------------------------------ finite_diff_check

def test_finite_diff_check_sum_of_squares():
    p = Parameter(np.random.default_rng(4).normal(size=5))
    assert ag.finite_diff_check(lambda: (p * p).sum(), [p]) < 1e-9


def test_finite_diff_check_detects_nondeterminism():
    p = Parameter([1.0])
    rng = np.random.default_rng(0)
    with pytest.raises(ag.DeterminismError):
        ag.finite_diff_check(lambda: (p * float(rng.normal())).sum(), [p])


def test_finite_diff_check_rejects_step_outside_range():
    p = Parameter([1.0])
    with pytest.raises(ag.DomainError):
        ag.finite_diff_check(lambda: p.sum(), [p], eps=1e-2)


def test_finite_diff_check_flags_a_wrong_gradient():
    p = Parameter([0.3, -0.2])

    def wrong():
        out = ag.gelu(p)

        def bw(g):
            ag._accumulate(p, 2.0 * g)

        return ag._make(out.data, (p,), bw, "broken").sum()

    assert ag.finite_diff_check(wrong, [p]) > 0.1


# --------------------------------------------- remaining ops across seeds

def _random_case(name, rng):
    a = Parameter(rng.normal(size=(2, 3, 4)))
    b = Parameter(rng.normal(size=(2, 3, 4)))
    w = rng.normal(size=(2, 3, 4))
    cases = {
        "add": lambda: ((a + b) * w).sum(),
        "mul": lambda: (a * b * w).sum(),
        "gelu": lambda: (ag.gelu(a) * w).sum(),
        "mean": lambda: (a.mean(axis=-1) * w[..., 0]).sum(),
        "concat": lambda: (ag.concat([a, b], axis=1) * np.concatenate([w, w], axis=1)).sum(),
        "slice": lambda: (a[:, 1:, :3] * w[:, 1:, :3]).sum(),
        "pad": lambda: (ag.pad(a, [(0, 0), (1, 1), (2, 0)]) * rng_pad).sum(),
        "reshape": lambda: (a.reshape(2, 12) * w.reshape(2, 12)).sum(),
        "transpose": lambda: (a.transpose(2, 0, 1) * w.transpose(2, 0, 1)).sum(),
        "batched_matmul": lambda: (ag.matmul(a, ag.swapaxes(b, -1, -2)) * w[..., :3]).sum(),
        "softmax": lambda: (ag.tempered_softmax(a, 1.3) * w).sum(),
        "cross_entropy": lambda: ag.cross_entropy(a.reshape(6, 4), np.array([0, 1, 2, 3, 0, 1]), 0.1),
        "masked_fill": lambda: (ag.masked_fill(a, w > 0, -3.0) * b).sum(),
    }
    rng_pad = rng.normal(size=(2, 5, 6))
    return cases[name], [a, b]


@pytest.mark.parametrize("name", ["add", "mul", "gelu", "mean", "concat", "slice", "pad", "reshape",
                                  "transpose", "batched_matmul", "softmax", "cross_entropy",
                                  "masked_fill"])
def test_every_op_passes_gradient_check_over_ten_seeds(name):
    for seed in range(10):
        f, params = _random_case(name, np.random.default_rng(seed))
        assert ag.finite_diff_check(f, params) < 1e-4


# ------------------------------------------------------------ cross entropy

def test_cross_entropy_without_smoothing_is_plain_nll_bitwise():
    rng = np.random.default_rng(5)
    z = rng.normal(size=(6, 4))
    y = np.array([0, 3, 1, 2, 2, 0])
    shifted = z - z.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    expected = -np.mean(logp[np.arange(6), y])
    assert ag.cross_entropy(Tensor(z), y, 0.0).data == expected


@pytest.mark.parametrize("eps", [0.0, 0.1, 0.3])
def test_label_smoothing_floor_is_target_entropy(eps):
    k = 5
    target = np.full(k, eps / k)
    target[2] += 1 - eps
    # logits whose softmax equals the smoothed target reach the entropy floor
    logits = np.log(np.maximum(target, 1e-300))[None, :]
    loss = ag.cross_entropy(Tensor(logits), [2], eps).data
    with np.errstate(divide="ignore", invalid="ignore"):
        entropy = -np.sum(np.where(target > 0, target * np.log(target), 0.0))
    np.testing.assert_allclose(loss, entropy, atol=1e-12)


def test_label_smoothing_loss_for_confident_prediction():
    eps, k = 0.1, 4
    p = np.array([0.05, 0.85, 0.04, 0.06])
    loss = ag.cross_entropy(Tensor(np.log(p)[None, :]), [1], eps).data
    expected = -((1 - eps) * np.log(p[1]) + (eps / k) * np.sum(np.log(p)))
    np.testing.assert_allclose(loss, expected, rtol=1e-13)


def test_debug_mode_flags_nonfinite_forward():
    with ag.debug_mode():
        with pytest.raises(ag.NumericalError):
            ag.scale(Tensor([1e308]), 10.0)
