import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hydra_peft.adapters import (
    AdapterSpec,
    HydraLinear,
    adapter_param_count,
    effective_updates,
    fold,
    forward_train,
    init_hydra_linear,
    lora_forward,
    seqlora_forward,
    trainable_param_count,
)
from hydra_peft.autodiff import Tape
from hydra_peft.errors import ContractError, ShapeError
from hydra_peft.linalg import Rng, gaussian


def random_layer(seed, d, k, r_a, r_b, sigma=0.5, scaling=1.0):
    """Layer with every factor nonzero (up-projections included)."""
    r = Rng(seed)
    spec = AdapterSpec(parallel_rank=r_a, sequential_rank=r_b, scaling=scaling)
    return HydraLinear(
        w0=gaussian(r, d, k, 1.0),
        b0=gaussian(r, 1, d, 1.0).reshape(-1),
        a_up=gaussian(r, d, r_a, sigma),
        a_down=gaussian(r, r_a, k, sigma),
        b_up=gaussian(r, d, r_b, sigma),
        b_down=gaussian(r, r_b, d, sigma),
        spec=spec,
    )


def dense_reference(layer, x):
    """Straight transcription of the three-branch equation, one column at a time."""
    s = layer.spec.scaling
    out = np.empty((x.shape[0], layer.out_features))
    for i, xi in enumerate(x):
        f = layer.w0 @ xi + layer.b0
        h = f.copy()
        if layer.spec.parallel_rank:
            h += s * (layer.a_up @ (layer.a_down @ xi))
        if layer.spec.sequential_rank:
            h += s * (layer.b_up @ (layer.b_down @ f))
        out[i] = h
    return out


def rank_one_example():
    return HydraLinear(
        w0=np.eye(2), b0=np.zeros(2),
        a_up=np.array([[1.0], [0.0]]), a_down=np.array([[0.0, 1.0]]),
        b_up=np.array([[0.0], [1.0]]), b_down=np.array([[1.0, 0.0]]),
        spec=AdapterSpec(1, 1),
    )


def test_rank_one_example_forward():
    np.testing.assert_array_equal(rank_one_example()(np.array([[1.0, 2.0]])), [[3.0, 3.0]])


def test_rank_one_example_fold():
    merged = fold(rank_one_example())
    np.testing.assert_array_equal(merged.w, [[1.0, 1.0], [1.0, 1.0]])
    np.testing.assert_array_equal(merged.b, [0.0, 0.0])
    np.testing.assert_array_equal(merged(np.array([[1.0, 2.0]])), [[3.0, 3.0]])


def test_rank_one_example_effective_updates():
    a, bw0 = effective_updates(rank_one_example())
    np.testing.assert_array_equal(a, [[0.0, 1.0], [0.0, 0.0]])
    np.testing.assert_array_equal(bw0, [[0.0, 0.0], [1.0, 0.0]])


def test_seeded_8x8_matches_dense_materialisation():
    layer = random_layer(88, 8, 8, 2, 2)
    x = gaussian(Rng(89), 4, 8, 1.0)
    dense_a = layer.a_up @ layer.a_down
    dense_b = layer.b_up @ layer.b_down
    f = x @ layer.w0.T + layer.b0
    oracle = f + x @ dense_a.T + f @ dense_b.T
    assert np.max(np.abs(layer(x) - oracle)) <= 1e-12


def test_zero_rank_layer_is_affine():
    layer = init_hydra_linear(np.arange(6.0).reshape(3, 2), np.ones(3), AdapterSpec(), Rng(0))
    x = np.array([[1.0, -1.0]])
    np.testing.assert_array_equal(layer(x), x @ layer.w0.T + 1.0)
    merged = fold(layer)
    assert merged.w.tobytes() == layer.w0.tobytes() and merged.b.tobytes() == layer.b0.tobytes()


def test_sequential_branch_sees_bias():
    layer = HydraLinear(
        w0=np.zeros((2, 2)), b0=np.array([1.0, -1.0]),
        a_up=np.zeros((2, 0)), a_down=np.zeros((0, 2)),
        b_up=np.eye(2), b_down=2 * np.eye(2),
        spec=AdapterSpec(0, 2),
    )
    np.testing.assert_array_equal(layer(np.ones((1, 2))), [[3.0, -3.0]])
    np.testing.assert_array_equal(fold(layer).b, [3.0, -3.0])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 12), st.integers(1, 12), st.integers(0, 4), st.integers(0, 4),
       st.sampled_from([1.0, 0.5, 2.0]))
def test_forward_matches_dense_reference_and_fold(seed, d, k, r_a, r_b, scaling):
    r_a = min(r_a, d, k)
    r_b = min(r_b, d)
    layer = random_layer(seed, d, k, r_a, r_b, scaling=scaling)
    x = gaussian(Rng(seed + 1), 5, k, 1.0)
    out = layer(x)
    np.testing.assert_allclose(out, dense_reference(layer, x), rtol=0, atol=1e-12)
    np.testing.assert_allclose(fold(layer)(x), out, rtol=0, atol=1e-10)
    a, bw0 = effective_updates(layer)
    np.testing.assert_allclose(layer.w0 + a + bw0, fold(layer).w, rtol=0, atol=1e-12)


def test_effective_updates_zero_when_rank_zero():
    layer = random_layer(1, 4, 3, 0, 0)
    a, bw0 = effective_updates(layer)
    assert not a.any() and not bw0.any()


class TestParamCounts:
    @pytest.mark.parametrize("r", [2, 4, 8])
    def test_hydra_equals_lora_on_square(self, r):
        d = 32
        assert adapter_param_count(d, d, AdapterSpec.hydra(r)) == adapter_param_count(d, d, AdapterSpec.lora(r))

    def test_rectangular(self):
        assert adapter_param_count(768, 3072, AdapterSpec(2, 2)) == 2 * (768 + 3072) + 2 * 2 * 768

    def test_layer_count_matches_arrays(self):
        layer = init_hydra_linear(np.ones((6, 4)), np.zeros(6), AdapterSpec(3, 2), Rng(0))
        n = sum(layer.named_arrays()[f].size for f in ("a_up", "a_down", "b_up", "b_down"))
        assert trainable_param_count(layer) == n == 3 * 10 + 2 * 12


class TestSpec:
    def test_factories(self):
        assert AdapterSpec.lora(4) == AdapterSpec(4, 0)
        assert AdapterSpec.seqlora(4) == AdapterSpec(0, 4)
        assert AdapterSpec.hydra(4) == AdapterSpec(2, 2)

    def test_hydra_needs_even_rank(self):
        with pytest.raises(ContractError):
            AdapterSpec.hydra(3)

    @pytest.mark.parametrize("kw", [{"parallel_rank": -1}, {"init_sigma": -0.1}, {"adapter_dropout": 1.0}])
    def test_invalid(self, kw):
        with pytest.raises(ContractError):
            AdapterSpec(**kw)

    def test_trainable_flag(self):
        assert not AdapterSpec().is_trainable
        assert AdapterSpec(1, 0).is_trainable


class TestInit:
    def test_zero_up_projections_are_neutral(self):
        r = Rng(3)
        w0, b0 = gaussian(r, 5, 7, 1.0), gaussian(r, 1, 5, 1.0).reshape(-1)
        layer = init_hydra_linear(w0, b0, AdapterSpec(2, 2), Rng(7))
        x = gaussian(r, 4, 7, 1.0)
        assert layer(x).tobytes() == (x @ w0.T + b0).tobytes()
        assert not layer.a_up.any() and not layer.b_up.any()

    def test_seeded_replay(self):
        layer = init_hydra_linear(np.ones((4, 3)), np.zeros(4), AdapterSpec(2, 1), Rng(7))
        r = Rng(7)
        np.testing.assert_array_equal(layer.a_down, gaussian(r, 2, 3, 0.02))
        np.testing.assert_array_equal(layer.b_down, gaussian(r, 1, 4, 0.02))

    def test_rank_too_large(self):
        with pytest.raises(ContractError):
            init_hydra_linear(np.ones((4, 3)), np.zeros(4), AdapterSpec(4, 0), Rng(0))
        with pytest.raises(ContractError):
            init_hydra_linear(np.ones((4, 3)), np.zeros(4), AdapterSpec(0, 5), Rng(0))

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            init_hydra_linear(np.ones((4, 3)), np.zeros(3), AdapterSpec(1, 1), Rng(0))
        layer = init_hydra_linear(np.ones((4, 3)), np.zeros(4), AdapterSpec(1, 1), Rng(0))
        with pytest.raises(ShapeError):
            layer(np.ones((2, 4)))


def _branch_grads(layer, x, forward, keys, dropout=0.0, training=False):
    tape = Tape()
    nodes = layer.leaves(tape)
    xn = tape.leaf(x)
    out = forward(tape, xn, nodes, dropout, training)
    tape.backward(tape.mean(tape.matmul(out, tape.leaf(np.ones((out.shape[1], 1))))))
    return out.value, [tape.grads[nodes[k].id] for k in keys]


@pytest.mark.parametrize("seed", range(10))
def test_single_branch_reduction_with_dropout(seed):
    x = gaussian(Rng(seed), 6, 5, 1.0)
    lora = random_layer(seed, 4, 5, 2, 0)
    lora.spec = AdapterSpec(2, 0, adapter_dropout=0.2)
    hydra = lambda t, xn, n, p, tr: forward_train(lora, t, xn, n, tr, Rng(seed)).output
    ref = lambda t, xn, n, p, tr: lora_forward(t, xn, n, p, Rng(seed), tr)
    a = _branch_grads(lora, x, hydra, ("a_up", "a_down"), 0.2, True)
    b = _branch_grads(lora, x, ref, ("a_up", "a_down"), 0.2, True)
    assert a[0].tobytes() == b[0].tobytes()
    assert all(g.tobytes() == h.tobytes() for g, h in zip(a[1], b[1]))

    seq = random_layer(seed, 4, 5, 0, 3)
    seq.spec = AdapterSpec(0, 3, adapter_dropout=0.2)
    hydra = lambda t, xn, n, p, tr: forward_train(seq, t, xn, n, tr, Rng(seed)).output
    ref = lambda t, xn, n, p, tr: seqlora_forward(t, xn, n, p, Rng(seed), tr)
    a = _branch_grads(seq, x, hydra, ("b_up", "b_down"), 0.2, True)
    b = _branch_grads(seq, x, ref, ("b_up", "b_down"), 0.2, True)
    assert a[0].tobytes() == b[0].tobytes()
    assert all(g.tobytes() == h.tobytes() for g, h in zip(a[1], b[1]))


def test_branch_outputs_sum_to_output():
    layer = random_layer(5, 6, 4, 2, 2)
    tape = Tape()
    br = forward_train(layer, tape, tape.leaf(gaussian(Rng(1), 3, 4, 1.0)))
    np.testing.assert_allclose(br.pretrained.value + br.parallel.value + br.sequential.value, br.output.value,
                               atol=1e-14)


def test_frozen_base_gets_no_gradient():
    layer = random_layer(2, 3, 3, 1, 1)
    tape = Tape()
    nodes = layer.leaves(tape)
    out = layer.forward(tape, tape.leaf(np.ones((2, 3))), nodes)
    tape.backward(tape.mean(out))
    assert nodes["w0"].id not in tape.grads and nodes["b0"].id not in tape.grads
    assert all(nodes[k].id in tape.grads for k in ("a_up", "a_down", "b_up", "b_down"))
