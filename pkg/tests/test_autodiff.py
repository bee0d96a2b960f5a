import numpy as np
import pytest

from hydra_peft.autodiff import OPS, Tape
from hydra_peft.errors import ContractError, ShapeError
from hydra_peft.linalg import Rng, gaussian

from conftest import finite_difference_check

SEQ = 3


def _relu_safe(x):
    # keep FD probes away from the kink
    return np.where(np.abs(x) < 0.05, x + 0.1 * np.sign(x + 1e-300), x)


# op name -> (input shapes, builder(tape, nodes) -> out node, input transform)
CASES = {
    "matmul": ([(4, 3), (3, 5)], lambda t, n: t.matmul(*n), None),
    "matmul_nt": ([(4, 3), (5, 3)], lambda t, n: t.matmul_nt(*n), None),
    "add": ([(4, 3), (4, 3)], lambda t, n: t.add(*n), None),
    "add_bias_rowwise": ([(4, 3), (1, 3)], lambda t, n: t.add_bias_rowwise(*n), None),
    "relu": ([(5, 4)], lambda t, n: t.relu(n[0]), _relu_safe),
    "gelu": ([(5, 4)], lambda t, n: t.gelu(n[0]), None),
    "softmax_rows": ([(4, 6)], lambda t, n: t.softmax_rows(n[0]), None),
    "layernorm_rows": ([(4, 6), (1, 6), (1, 6)], lambda t, n: t.layernorm_rows(*n), None),
    "scale": ([(3, 4)], lambda t, n: t.scale(n[0], -1.7), None),
    "dropout": ([(6, 5)], lambda t, n: t.dropout(n[0], 0.3, Rng(77), True), None),
    "cross_entropy_mean": ([(5, 4)], lambda t, n: t.cross_entropy_mean(n[0], [0, 3, 1, 1, 2]), None),
    "mean": ([(3, 7)], lambda t, n: t.mean(n[0]), None),
    "select_rows": ([(5, 3)], lambda t, n: t.select_rows(n[0], [4, 0, 4, 2]), None),
    "slice_cols": ([(4, 6)], lambda t, n: t.slice_cols(n[0], 1, 4), None),
    "concat_cols": ([(4, 2), (4, 3)], lambda t, n: t.concat_cols(n), None),
    "seq_matmul_nt": ([(2 * SEQ, 4), (2 * SEQ, 4)], lambda t, n: t.seq_matmul_nt(*n, SEQ), None),
    "seq_matmul": ([(2 * SEQ, SEQ), (2 * SEQ, 4)], lambda t, n: t.seq_matmul(*n, SEQ), None),
}


def test_every_registered_op_has_a_gradient_case():
    assert set(CASES) == set(OPS)


def projected_loss(tape, out, proj):
    if out.shape == (1, 1):
        return out
    return tape.mean(tape.matmul(out, tape.leaf(proj)))


def gradient_check(op, probes=50, seed=0):
    shapes, build, transform = CASES[op]
    r = Rng(seed)
    inputs = [gaussian(r, *s, 1.0) for s in shapes]
    if transform is not None:
        inputs = [transform(x) for x in inputs]
    proj = None

    def run(with_grad=False):
        nonlocal proj
        tape = Tape()
        nodes = [tape.leaf(x, requires_grad=True) for x in inputs]
        out = build(tape, nodes)
        if proj is None:
            proj = gaussian(Rng(seed + 1), out.shape[1], 3, 1.0)
        loss = projected_loss(tape, out, proj)
        if with_grad:
            tape.backward(loss)
            return [tape.grads[n.id] for n in nodes]
        return float(loss.value[0, 0])

    analytic = run(with_grad=True)
    worst = 0.0
    per_input = max(1, probes // len(inputs)) + 1
    for x, g in zip(inputs, analytic):
        worst = max(worst, finite_difference_check(run, x, g, per_input, Rng(seed + 2)))
    return worst


@pytest.mark.parametrize("op", sorted(CASES))
def test_gradient_matches_finite_differences(op):
    assert gradient_check(op) <= 1.0


class TestForwardExamples:
    def test_relu(self):
        t = Tape()
        np.testing.assert_array_equal(t.relu(t.leaf([[-1.0, 0.0, 2.0]])).value, [[0, 0, 2]])

    def test_relu_two_entries(self):
        t = Tape()
        np.testing.assert_array_equal(t.relu(t.leaf([[-1.0, 2.0]])).value, [[0.0, 2.0]])

    def test_softmax_symmetric(self):
        t = Tape()
        np.testing.assert_array_equal(t.softmax_rows(t.leaf([[0.0, 0.0]])).value, [[0.5, 0.5]])

    def test_layernorm_seeded_row_moments(self):
        t = Tape()
        out = t.layernorm_rows(t.leaf(gaussian(Rng(12), 1, 64, 3.0))).value
        assert abs(out.mean()) <= 1e-7
        assert abs(out.var() - 1.0) <= 1e-4

    def test_mean_gradient(self):
        t = Tape()
        x = t.leaf(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True)
        t.backward(t.mean(x))
        np.testing.assert_array_equal(t.grads[x.id], np.full((2, 2), 0.25))

    def test_softmax_rows_sum_to_one(self):
        t = Tape()
        out = t.softmax_rows(t.leaf(gaussian(Rng(1), 5, 7, 30.0))).value
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)

    def test_softmax_large_logits_are_finite(self):
        t = Tape()
        out = t.softmax_rows(t.leaf([[1000.0, 1000.0]])).value
        np.testing.assert_array_equal(out, [[0.5, 0.5]])

    def test_layernorm_zero_mean_unit_variance(self):
        t = Tape()
        out = t.layernorm_rows(t.leaf(gaussian(Rng(2), 3, 16, 4.0))).value
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-5)

    def test_gelu_known_values(self):
        t = Tape()
        out = t.gelu(t.leaf([[0.0, 1.0, -1.0]])).value
        np.testing.assert_allclose(out, [[0.0, 0.8411919906, -0.1588080094]], atol=1e-9)

    def test_cross_entropy_uniform(self):
        t = Tape()
        loss = t.cross_entropy_mean(t.leaf(np.zeros((3, 4))), [0, 1, 2]).value
        assert abs(loss[0, 0] - np.log(4)) < 1e-15

    def test_cross_entropy_label_out_of_range(self):
        t = Tape()
        with pytest.raises(ContractError):
            t.cross_entropy_mean(t.leaf(np.zeros((2, 3))), [0, 3])

    def test_seq_matmul_nt_is_per_sequence(self):
        t = Tape()
        q = gaussian(Rng(3), 2 * SEQ, 4, 1.0)
        k = gaussian(Rng(4), 2 * SEQ, 4, 1.0)
        out = t.seq_matmul_nt(t.leaf(q), t.leaf(k), SEQ).value
        for b in range(2):
            s = slice(b * SEQ, (b + 1) * SEQ)
            np.testing.assert_allclose(out[s], q[s] @ k[s].T, atol=1e-14)

    def test_shape_mismatch(self):
        t = Tape()
        with pytest.raises(ShapeError):
            t.add(t.leaf(np.ones((2, 2))), t.leaf(np.ones((2, 3))))

    def test_backward_requires_scalar(self):
        t = Tape()
        x = t.leaf(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(ContractError):
            t.backward(t.scale(x, 2.0))

    def test_unknown_op(self):
        with pytest.raises(ContractError):
            Tape().record("conv2d", [])


class TestDropout:
    def test_zero_rate_is_identity(self):
        t = Tape()
        x = t.leaf(np.ones((2, 3)))
        assert t.dropout(x, 0.0, Rng(0), training=True) is x

    def test_eval_mode_is_identity_and_draws_nothing(self):
        t = Tape()
        x = t.leaf(np.ones((2, 3)))
        r = Rng(5)
        assert t.dropout(x, 0.5, r, training=False) is x
        assert r.next_u64(1)[0] == Rng(5).next_u64(1)[0]

    @pytest.mark.parametrize("p", [1.0, -0.1, 1.5])
    def test_invalid_rate(self, p):
        t = Tape()
        with pytest.raises(ContractError):
            t.dropout(t.leaf(np.ones((1, 1))), p, Rng(0), training=True)

    def test_half_rate_keeps_half_scaled_by_two(self):
        t = Tape()
        out = t.dropout(t.leaf(np.ones((100, 100))), 0.5, Rng(21), training=True).value
        kept = out != 0
        assert abs(kept.mean() - 0.5) <= 0.02
        assert np.all(out[kept] == 2.0)

    def test_inverted_scaling_preserves_mean(self):
        t = Tape()
        out = t.dropout(t.leaf(np.ones((400, 250))), 0.25, Rng(9), training=True).value
        assert set(np.unique(out)) <= {0.0, 1.0 / 0.75}
        assert abs(out.mean() - 1.0) < 0.01


class TestTape:
    def test_frozen_leaves_get_no_gradient(self):
        t = Tape()
        w = t.leaf(np.ones((3, 3)))
        x = t.leaf(np.ones((2, 3)), requires_grad=True)
        t.backward(t.mean(t.matmul(x, w)))
        assert w.id not in t.grads
        assert x.id in t.grads

    def test_nodes_off_the_loss_path_get_nothing(self):
        t = Tape()
        x = t.leaf(np.ones((2, 2)), requires_grad=True)
        y = t.leaf(np.ones((2, 2)), requires_grad=True)
        side = t.relu(y)
        t.backward(t.mean(x))
        assert y.id not in t.grads and side.id not in t.grads

    def test_fan_out_accumulates(self):
        t = Tape()
        x = t.leaf([[2.0]], requires_grad=True)
        t.backward(t.add(t.scale(x, 3.0), t.matmul(x, x)))
        assert t.grads[x.id][0, 0] == 3.0 + 2 * 2.0

    def test_deterministic(self):
        def grads():
            r = Rng(4)
            t = Tape()
            x = t.leaf(gaussian(r, 4, 5, 1.0), requires_grad=True)
            w = t.leaf(gaussian(r, 3, 5, 1.0), requires_grad=True)
            loss = t.cross_entropy_mean(t.gelu(t.matmul_nt(x, w)), [0, 1, 2, 0])
            t.backward(loss)
            return t.grads[x.id].tobytes() + t.grads[w.id].tobytes()

        assert grads() == grads()

    def test_one_dimensional_leaf_is_row(self):
        assert Tape().leaf([1.0, 2.0]).shape == (1, 2)
