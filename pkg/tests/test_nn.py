import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsclab import nn
from tsclab.errors import DataError, DimensionError, LayoutError

from conftest import central_diff, rel_err


def test_spec_validation():
    with pytest.raises(ValueError):
        nn.NetworkSpec(3, ())
    with pytest.raises(ValueError):
        nn.NetworkSpec(3, ((4, "gelu"),))
    with pytest.raises(ValueError):
        nn.NetworkSpec(0)
    with pytest.raises(ValueError):
        nn.NetworkSpec(3, ((0, "relu"),))


def test_layout_partition_and_length(small_net):
    w, spec = small_net
    kinds = [l.role for l in w.layout]
    assert kinds == ["embedding", "embedding", "output"]
    assert w.values.shape == (5 * 5 + 3 * 6 + 3 * 4,)
    assert w.n_embedding == 5 * 5 + 3 * 6
    assert np.shares_memory(w.head, w.values)


def test_spec_round_trip(small_net):
    _, spec = small_net
    assert nn.NetworkSpec.from_dict(spec.to_dict()) == spec


def test_init_is_bounded_and_seeded(small_net):
    w, spec = small_net
    for layer in w.layout:
        bound = 1 / math.sqrt(layer.in_dim)
        assert np.all(np.abs(w.values[layer.offset : layer.stop]) <= bound)
    assert np.array_equal(nn.init_weights(spec).values, w.values)


def test_zero_network_gives_zero_logits(small_net):
    w, spec = small_net
    w = nn.WeightState(np.zeros_like(w.values), w.layout)
    assert np.all(nn.forward(w, spec, np.random.default_rng(0).normal(size=(4, 4))) == 0)


def test_hand_evaluated_two_layer_net():
    # x=2 -> h = relu(1.5*2 - 1) = 2 -> logits = (0.5*2 + 0.25, -1*2 + 0)
    spec = nn.NetworkSpec(1, ((1, "relu"),), 2)
    values = np.array([1.5, -1.0, 0.5, -1.0, 0.25, 0.0])
    w = nn.WeightState(values, nn.build_layout(spec))
    np.testing.assert_array_equal(nn.forward(w, spec, [[2.0]]), [[1.25, -2.0]])


def test_duplicate_rows_identical_logits(small_net):
    w, spec = small_net
    x = np.random.default_rng(1).normal(size=(1, 4))
    out = nn.forward(w, spec, np.vstack([x, x]))
    assert np.array_equal(out[0], out[1])


def test_dimension_errors_name_dims(small_net):
    w, spec = small_net
    with pytest.raises(DimensionError, match="expected 4, got 5"):
        nn.forward(w, spec, np.zeros((2, 5)))
    with pytest.raises(DimensionError):
        nn.forward(w, spec, np.zeros(4))


def test_label_errors(small_net):
    w, spec = small_net
    with pytest.raises(DataError):
        nn.loss_and_grad(w, spec, np.zeros((2, 4)), [0, 3])
    with pytest.raises(DataError):
        nn.loss_and_grad(w, spec, np.zeros((0, 4)), [])


def test_uniform_logits_loss_is_log_c(small_net):
    w, spec = small_net
    w = nn.WeightState(np.zeros_like(w.values), w.layout)
    loss, _ = nn.loss_and_grad(w, spec, np.ones((3, 4)), [0, 1, 2])
    assert loss == pytest.approx(math.log(3), abs=1e-15)


def test_gradient_matches_finite_differences(backend):
    rng = np.random.default_rng(5)
    for trial in range(4):
        spec = nn.NetworkSpec(4, ((6, "relu"), (5, "tanh")), 3, seed=trial)
        w = nn.init_weights(spec)
        X = rng.normal(size=(8, 4))
        y = rng.integers(0, 3, 8)
        _, g = nn.loss_and_grad(w, spec, X, y)

        def f(v):
            return nn.loss_and_grad(nn.WeightState(v, w.layout), spec, X, y)[0]

        assert rel_err(g, central_diff(f, w.values)) < 1e-4


def test_scopes_mask_and_sum(small_net, backend):
    w, spec = small_net
    rng = np.random.default_rng(2)
    X, y = rng.normal(size=(6, 4)), rng.integers(0, 3, 6)
    _, g_all = nn.loss_and_grad(w, spec, X, y, "all")
    _, g_e = nn.loss_and_grad(w, spec, X, y, "embedding_only")
    _, g_o = nn.loss_and_grad(w, spec, X, y, "output_only")
    n = w.n_embedding
    assert np.all(g_e[n:] == 0) and np.all(g_o[:n] == 0)
    np.testing.assert_allclose(g_e + g_o, g_all, rtol=1e-13, atol=1e-16)


def test_head_loss_matches_output_scope(small_net):
    w, spec = small_net
    rng = np.random.default_rng(3)
    X, y = rng.normal(size=(6, 4)), rng.integers(0, 3, 6)
    loss, g = nn.loss_and_grad(w, spec, X, y, "output_only")
    hloss, hg = nn.head_loss_and_grad(nn.split_head(w), nn.embed(w, X), y)
    assert hloss == pytest.approx(loss, rel=1e-14)
    np.testing.assert_allclose(hg, g[w.n_embedding :], rtol=1e-12, atol=1e-16)


def test_adam_zero_grad_is_noop(small_net):
    w, _ = small_net
    opt = nn.AdamState.fresh(w.values.size)
    new_w, new_opt = nn.adam_step(w, np.zeros_like(w.values), opt)
    assert np.array_equal(new_w.values, w.values)
    assert new_opt.step_count == 1 and opt.step_count == 0


def test_adam_scalar_first_step():
    spec = nn.NetworkSpec(1, ((1, "relu"),), 1)
    layout = nn.build_layout(spec)
    w = nn.WeightState(np.zeros(4), layout)
    g = np.array([0.2, -3.0, 0.0, 1e-6])
    opt = nn.AdamState.fresh(4)
    new_w, _ = nn.adam_step(w, g, opt)
    lr, eps = opt.lr, opt.epsilon
    # hand-rolled Adam: m = (1-b1) g, v = (1-b2) g^2, bias corrections divide them back out
    m = (1 - opt.beta1) * g / (1 - opt.beta1)
    v = (1 - opt.beta2) * g * g / (1 - opt.beta2)
    np.testing.assert_allclose(new_w.values, -lr * m / (np.sqrt(v) + eps), rtol=1e-12)
    assert new_w.values[1] == pytest.approx(lr, rel=1e-6)


def test_adam_deterministic_and_layout_checked(small_net):
    w, _ = small_net
    g = np.linspace(-1, 1, w.values.size)
    opt = nn.AdamState.fresh(w.values.size)
    a, _ = nn.adam_step(w, g, opt)
    b, _ = nn.adam_step(w, g, opt)
    assert np.array_equal(a.values, b.values)
    with pytest.raises(LayoutError):
        nn.adam_step(w, g[:-1], opt)


def test_adam_rejects_non_finite(small_net):
    w, _ = small_net
    g = np.zeros(w.values.size)
    g[0] = np.nan
    with pytest.raises(FloatingPointError):
        nn.adam_step(w, g, nn.AdamState.fresh(w.values.size))


def test_grow_output_preserves_old_rows(small_net):
    w, spec = small_net
    X = np.random.default_rng(4).normal(size=(5, 4))
    before = nn.forward(w, spec, X)
    big, big_spec = nn.grow_output(w, spec, 2)
    after = nn.forward(big, big_spec, X)
    assert np.array_equal(after[:, :3], before)
    assert np.all(after[:, 3:] == 0)
    assert np.array_equal(big.embedding, w.embedding)
    with pytest.raises(ValueError):
        nn.grow_output(w, spec, 0)


def test_grow_output_random_rows(small_net):
    w, spec = small_net
    big, big_spec = nn.grow_output(w, spec, 2, init_scale=0.1, seed=9)
    mask = nn.new_rows_mask(w.layout, big.layout)
    assert mask.sum() == 2 * (3 + 1)
    assert np.all(np.abs(big.values[mask]) <= 0.1) and np.any(big.values[mask] != 0)
    assert np.array_equal(big.values[~mask], w.values)
    again, _ = nn.grow_output(w, spec, 2, init_scale=0.1, seed=9)
    assert np.array_equal(again.values, big.values)


def test_drop_head_and_expand(small_net):
    w, spec = small_net
    bare, bare_spec = nn.drop_head(w, spec)
    assert bare_spec.output_classes == 0 and np.array_equal(bare.values, w.embedding)
    big, _ = nn.grow_output(w, spec, 1)
    grown = nn.expand_values(w.values, w.layout, big.layout, fill=-1.0)
    assert np.array_equal(grown, np.where(nn.new_rows_mask(w.layout, big.layout), -1.0,
                                          big.values))
    with pytest.raises(LayoutError):
        nn.new_rows_mask(big.layout, w.layout)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_grow_keeps_old_logits_property(c, new, seed):
    spec = nn.NetworkSpec(3, ((4, "relu"),), c, seed=seed)
    w = nn.init_weights(spec)
    X = np.random.default_rng(seed).normal(size=(3, 3))
    big, big_spec = nn.grow_output(w, spec, new, init_scale=0.5, seed=seed)
    # parameters are copied exactly; BLAS may sum in another order for a wider head
    np.testing.assert_allclose(nn.forward(big, big_spec, X)[:, :c], nn.forward(w, spec, X),
                               rtol=1e-14, atol=1e-16)
    assert np.array_equal(big.values[~nn.new_rows_mask(w.layout, big.layout)], w.values)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_loss_non_negative(seed):
    rng = np.random.default_rng(seed)
    spec = nn.NetworkSpec(3, ((4, "tanh"),), 4, seed=seed)
    w = nn.init_weights(spec)
    loss, _ = nn.loss_and_grad(w, spec, rng.normal(size=(5, 3)) * 10, rng.integers(0, 4, 5))
    assert loss >= 0
