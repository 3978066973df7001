"""Embedding network shapes, the auxiliary head, initialization
determinism, and the hard parameter-sharing property."""

import numpy as np
import pytest

import semcross.tensor as T
from semcross.backbone import (
    aux_predict,
    aux_project,
    embed,
    init_backbone,
)
from semcross.errors import DimensionError, ParameterError
from semcross.semantics import aux_loss
from semcross.tensor import Tensor


@pytest.fixture(autouse=True)
def float64_mode():
    with T.precision("float64"):
        yield


@pytest.fixture(scope="module")
def params84():
    with T.precision("float64"):
        return init_backbone(seed=0, l_out=300)


def test_embed_shape_84(params84):
    out = embed(np.random.default_rng(0).normal(size=(3, 84, 84)), params84)
    assert out.data.shape == (128, 5, 5)


def test_embed_shape_32_and_64():
    params = init_backbone(seed=1, l_out=32)
    rng = np.random.default_rng(1)
    assert embed(rng.normal(size=(3, 32, 32)), params).data.shape == (128, 2, 2)
    assert embed(rng.normal(size=(3, 64, 64)), params).data.shape == (128, 4, 4)


def test_embed_default_filter_counts(params84):
    assert params84.filters == (64, 64, 128, 128)
    assert [b.out_channels for b in params84.blocks] == [64, 64, 128, 128]
    assert params84.l_inter == 128
    assert params84.l_out == 300


def test_embed_rejects_small_or_wrong_inputs(params84):
    with pytest.raises(DimensionError):
        embed(np.zeros((3, 8, 8)), params84)
    with pytest.raises(DimensionError):
        embed(np.zeros((1, 84, 84)), params84)
    with pytest.raises(ParameterError):
        embed(np.zeros((3, 84, 84)), params84, mode="predict")


def test_embed_batched_matches_single_in_eval(params84):
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 3, 84, 84))
    batched = embed(x, params84, mode="eval").data
    for i in range(3):
        single = embed(x[i], params84, mode="eval").data
        assert np.allclose(batched[i], single, atol=1e-5)


def test_embed_deterministic(params84):
    x = np.random.default_rng(3).normal(size=(3, 84, 84))
    a = embed(x, params84).data
    b = embed(x, params84).data
    assert np.array_equal(a, b)


def test_init_is_seed_deterministic():
    a = init_backbone(seed=7, l_out=50)
    b = init_backbone(seed=7, l_out=50)
    assert np.array_equal(a.blocks[2].conv_w.data, b.blocks[2].conv_w.data)
    assert np.array_equal(a.aux_w.data, b.aux_w.data)
    c = init_backbone(seed=8, l_out=50)
    assert not np.array_equal(a.blocks[0].conv_w.data, c.blocks[0].conv_w.data)


def test_init_streams_are_per_parameter():
    # the conv stack must not depend on how many extra heads a model owns
    small = init_backbone(seed=3, l_out=10)
    large = init_backbone(seed=3, l_out=200)
    for ba, bb in zip(small.blocks, large.blocks):
        assert np.array_equal(ba.conv_w.data, bb.conv_w.data)


def test_init_glorot_bounds():
    params = init_backbone(seed=4, l_out=60)
    w = params.blocks[0].conv_w.data  # fan_in 27, fan_out 576
    limit = np.sqrt(6.0 / (27 + 576))
    assert np.abs(w).max() <= limit
    assert np.abs(w).max() > 0.8 * limit  # actually fills the range
    assert np.all(params.blocks[0].conv_b.data == 0)
    assert np.all(params.blocks[0].bn_gamma.data == 1)


# ---------------------------------------------------------------------------
# auxiliary head


def test_aux_project_shape(params84):
    e = Tensor(np.random.default_rng(5).normal(size=(128, 5, 5)))
    out = aux_project(e, params84)
    assert out.data.shape == (25, 300)


def test_aux_project_zero_weight_gives_bias_rows():
    params = init_backbone(seed=6, l_out=7)
    params.aux_w.data[:] = 0.0
    params.aux_b.data[:] = np.arange(7.0)
    out = aux_project(Tensor(np.random.default_rng(6).normal(size=(128, 2, 2))), params).data
    for row in out:
        assert np.array_equal(row, np.arange(7.0))


def test_aux_project_single_patch_is_plain_affine():
    params = init_backbone(seed=7, l_out=9)
    e = np.random.default_rng(7).normal(size=(128, 1, 1))
    out = aux_project(Tensor(e), params).data
    want = params.aux_w.data @ e[:, 0, 0] + params.aux_b.data
    assert out.shape == (1, 9)
    assert np.allclose(out[0], want, atol=1e-12)


def test_aux_project_is_linear_in_features():
    params = init_backbone(seed=8, l_out=11)
    params.aux_b.data[:] = 0.0
    rng = np.random.default_rng(8)
    e1, e2 = rng.normal(size=(2, 128, 2, 2))
    a, b = 0.7, -1.3
    combo = aux_project(Tensor(a * e1 + b * e2), params).data
    parts = a * aux_project(Tensor(e1), params).data + b * aux_project(Tensor(e2), params).data
    assert np.allclose(combo, parts, atol=1e-5)


def test_aux_predict_is_distribution():
    rng = np.random.default_rng(9)
    out = aux_predict(Tensor(rng.normal(size=(25, 40))), tau=1.0).data
    assert abs(out.sum() - 1.0) < 1e-6
    assert out.min() >= 0


def test_aux_predict_high_temperature_flattens():
    rng = np.random.default_rng(10)
    out = aux_predict(Tensor(rng.normal(size=(9, 16))), tau=1e6).data
    assert np.allclose(out, 1.0 / 16, atol=1e-4)


def test_aux_predict_single_onehot_patch():
    l = 6
    e = np.zeros((1, l))
    e[0, 0] = 1.0
    out = aux_predict(Tensor(e), tau=1.0).data
    expected = np.e / (np.e + (l - 1))
    assert out[0] == pytest.approx(expected, abs=1e-12)


def test_aux_predict_batched():
    rng = np.random.default_rng(11)
    e = rng.normal(size=(4, 9, 12))
    batched = aux_predict(Tensor(e), tau=2.0).data
    assert batched.shape == (4, 12)
    for i in range(4):
        assert np.allclose(batched[i], aux_predict(Tensor(e[i]), tau=2.0).data, atol=1e-12)


def test_aux_predict_rejects_bad_tau():
    with pytest.raises(ParameterError):
        aux_predict(Tensor(np.zeros((4, 5))), tau=-1.0)


def test_hard_parameter_sharing():
    # perturbing one backbone weight must move both task outputs
    params = init_backbone(seed=12, l_out=8)
    x = np.random.default_rng(12).normal(size=(3, 16, 16))
    e0 = embed(x, params)
    a0 = aux_project(e0, params).data.copy()
    m0 = e0.data.copy()
    params.blocks[0].conv_w.data[0, 0, 1, 1] += 0.5
    e1 = embed(x, params)
    assert not np.allclose(e1.data, m0)
    assert not np.allclose(aux_project(e1, params).data, a0)


def test_aux_head_gradient_through_kl_matches_fd():
    from semcross.gradcheck import finite_difference_gradient, relative_error

    params = init_backbone(seed=13, l_out=5, filters=(6,))
    rng = np.random.default_rng(13)
    x = rng.normal(size=(3, 4, 4))
    target = np.full(5, 0.2)

    def loss_value():
        e = embed(x, params, mode="eval")
        return aux_loss(aux_predict(aux_project(e, params), tau=1.0), target, "kl")

    loss = loss_value()
    loss.backward()
    analytic = params.aux_w.grad.copy()
    fd = finite_difference_gradient(lambda t: loss_value().item(), params.aux_w)
    assert relative_error(analytic, fd) < 1e-4
