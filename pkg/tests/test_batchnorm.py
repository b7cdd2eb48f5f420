"""BN layer contracts: the normalization identity, running-statistics
update, backward gradients, and the AdaBN statistics-collection pass."""

import numpy as np
import pytest

from sfodlab import batchnorm as bn
from sfodlab.detector import ArchDescriptor, init_model
from sfodlab.ops import ShapeError
from conftest import assert_grads_close, numerical_grad

SEEDS = [0, 1, 2, 3, 4]


def make_state(c, dtype=np.float64, **kw):
    st = bn.bn_init(c)
    return bn.BNState(
        gamma=st.gamma.astype(dtype), beta=st.beta.astype(dtype),
        running_mean=st.running_mean.astype(dtype),
        running_var=st.running_var.astype(dtype), **kw)


def test_worked_example_two_values():
    # per-channel batch {0, 2}, gamma=2, beta=1: mean 1, var 1 -> outputs {-1, 3}
    x = np.array([0.0, 2.0]).reshape(2, 1, 1, 1)
    state = make_state(1)
    state.gamma[:] = 2.0
    state.beta[:] = 1.0
    out, _, _ = bn.bn_forward(x, state, train=True)
    assert np.abs(out.ravel() - np.array([-1.0, 3.0])).max() < 1e-3


def test_constant_input_returns_beta():
    x = np.full((3, 2, 4, 4), 7.25, np.float64)
    state = make_state(2)
    state.beta[:] = (0.5, -1.5)
    out, _, _ = bn.bn_forward(x, state, train=True)
    assert np.allclose(out[:, 0], 0.5) and np.allclose(out[:, 1], -1.5)


def test_eval_identity_statistics(rng):
    x = rng.normal(size=(2, 3, 5, 5))
    state = make_state(3)
    out, state2, cache = bn.bn_forward(x, state, train=False)
    assert cache is None and state2 is state
    assert np.abs(out - x / np.sqrt(1 + 1e-5)).max() < 1e-6


def test_train_output_normalized(rng):
    x = (rng.normal(size=(8, 4, 24, 24)) * rng.uniform(0.5, 3, size=(1, 4, 1, 1))
         + rng.uniform(-2, 2, size=(1, 4, 1, 1)))
    state = make_state(4)
    out, _, _ = bn.bn_forward(x, state, train=True)
    for c in range(4):
        assert abs(out[:, c].mean()) <= 1e-5
        assert abs(out[:, c].var() - 1.0) <= 1e-4
    # float32 path keeps the same contract
    out32, _, _ = bn.bn_forward(x.astype(np.float32), make_state(4, np.float32), True)
    for c in range(4):
        assert abs(float(out32[:, c].mean())) <= 1e-5
        assert abs(float(out32[:, c].var()) - 1.0) <= 1e-4


def test_running_update_convention(rng):
    x = rng.normal(size=(4, 2, 6, 6)) + 3.0
    state = make_state(2, momentum=0.1)
    mean, var = bn.batch_stats(x)
    _, state2, _ = bn.bn_forward(x, state, train=True)
    assert np.allclose(state2.running_mean, 0.1 * 0.0 + 0.9 * mean, atol=1e-6)
    assert np.allclose(state2.running_var, 0.1 * 1.0 + 0.9 * var, atol=1e-6)
    # eval mode mutates nothing
    before = (state2.running_mean.copy(), state2.running_var.copy())
    bn.bn_forward(x, state2, train=False)
    assert np.array_equal(state2.running_mean, before[0])
    assert np.array_equal(state2.running_var, before[1])


def test_forward_errors(rng):
    state = make_state(3)
    with pytest.raises(ShapeError):
        bn.bn_forward(rng.normal(size=(2, 4, 3, 3)), state, train=True)
    with pytest.raises(ShapeError):
        bn.bn_forward(np.zeros((1, 3, 1, 1)), state, train=True)
    with pytest.raises(ValueError):
        bn.bn_backward(np.zeros((1, 3, 2, 2)), None)


def test_backward_zero_upstream(rng):
    x = rng.normal(size=(2, 3, 4, 4))
    _, _, cache = bn.bn_forward(x, make_state(3), train=True)
    dx, dg, db = bn.bn_backward(np.zeros_like(x), cache)
    assert not dx.any() and not dg.any() and not db.any()


def test_beta_gradient_is_upstream_sum(rng):
    x = rng.normal(size=(2, 3, 4, 4))
    dout = rng.normal(size=x.shape)
    _, _, cache = bn.bn_forward(x, make_state(3), train=True)
    _, _, db = bn.bn_backward(dout, cache)
    assert np.allclose(db, dout.sum(axis=(0, 2, 3)), atol=1e-10)


def test_backward_matches_finite_differences():
    for seed in SEEDS:
        r = np.random.default_rng(seed)
        x = r.normal(size=(3, 2, 4, 4))
        gamma = r.normal(size=2) + 1.5
        beta = r.normal(size=2)
        dout = r.normal(size=x.shape)

        def loss():
            state = make_state(2)
            state.gamma[:] = gamma
            state.beta[:] = beta
            out, _, _ = bn.bn_forward(x, state, train=True)
            return float((out * dout).sum())

        state = make_state(2)
        state.gamma[:] = gamma
        state.beta[:] = beta
        _, _, cache = bn.bn_forward(x, state, train=True)
        dx, dg, db = bn.bn_backward(dout, cache)
        assert_grads_close(dx, numerical_grad(loss, x), what=f"bn dx seed {seed}")
        assert_grads_close(dg, numerical_grad(loss, gamma), what=f"bn dgamma seed {seed}")
        assert_grads_close(db, numerical_grad(loss, beta), what=f"bn dbeta seed {seed}")


# ---------------------------------------------------------------------------
# AdaBN statistics collection
# ---------------------------------------------------------------------------

def small_arch():
    return ArchDescriptor(input_size=32, channels=(4, 8), feature_stride=4,
                          anchor_scales=(8.0, 16.0), anchor_aspects=(1.0,),
                          rpn_channels=8, roi_pool_size=3, roi_hidden=16)


def test_collect_requires_images():
    model = init_model(small_arch(), 0)
    with pytest.raises(ValueError):
        bn.collect_target_statistics(model, [])


def test_collect_freezes_weights(rng):
    model = init_model(small_arch(), 0)
    images = [rng.random((32, 32, 3), dtype=np.float32) for _ in range(10)]
    adapted = bn.collect_target_statistics(model, images, batch_size=4)
    for name in model.trainable_names():
        assert adapted.params[name].tobytes() == model.params[name].tobytes(), name
    changed = [n for n in model.stat_names()
               if adapted.params[n].tobytes() != model.params[n].tobytes()]
    assert changed, "statistics should actually move"


def test_collect_zero_images_zero_bias_backbone(rng):
    model = init_model(small_arch(), 0)
    for name in model.params:
        if name.endswith("conv.b"):
            model.params[name][:] = 0.0
    images = [np.zeros((32, 32, 3), np.float32) for _ in range(8)]
    adapted = bn.collect_target_statistics(model, images, batch_size=4)
    assert np.array_equal(adapted.params["backbone.b0.bn.running_mean"],
                          np.zeros(4, np.float32))
    assert np.array_equal(adapted.params["backbone.b0.bn.running_var"],
                          np.zeros(4, np.float32))


def test_collect_is_sample_statistics(rng):
    """Two large samples from one distribution give nearly equal statistics."""
    model = init_model(small_arch(), 1)
    def sample(r):
        return [np.clip(r.normal(0.45, 0.2, (32, 32, 3)), 0, 1).astype(np.float32)
                for _ in range(16)]  # 16*32*32 > 4096 values/channel at layer 0

    a = bn.collect_target_statistics(model, sample(np.random.default_rng(10)), 4)
    b = bn.collect_target_statistics(model, sample(np.random.default_rng(20)), 4)
    for layer, _ in model.arch.bn_layers():
        std = np.sqrt(a.params[f"{layer}.running_var"]) + 1e-8
        dmean = np.abs(a.params[f"{layer}.running_mean"]
                       - b.params[f"{layer}.running_mean"])
        assert (dmean <= 0.05 * std + 1e-4).all(), (layer, dmean, std)


def test_collect_order_invariant(rng):
    model = init_model(small_arch(), 2)
    images = [rng.random((32, 32, 3), dtype=np.float32) for _ in range(12)]
    a = bn.collect_target_statistics(model, images, batch_size=4)
    rolled = images[4:] + images[:4]  # permute whole batches
    b = bn.collect_target_statistics(model, rolled, batch_size=4)
    for name in model.stat_names():
        assert np.abs(a.params[name] - b.params[name]).max() <= 1e-6
