"""Fusion variants: patch bookkeeping, the attention module against a
naive loop oracle, squeeze-excitation saturation limits, and concat."""

import numpy as np
import pytest

import semcross.tensor as T
from semcross.errors import DimensionError, ParameterError
from semcross.fusion import (
    CamParams,
    SeParams,
    cam_attention,
    cam_forward,
    concat_fusion,
    default_scale,
    patchify,
    se_forward,
    unpatchify,
)
from semcross.gradcheck import finite_difference_gradient, relative_error
from semcross.tensor import Tensor

from oracles import naive_cam


@pytest.fixture(autouse=True)
def float64_mode():
    with T.precision("float64"):
        yield


def make_cam(rng, l_inter, l_out, scale=None):
    return CamParams(
        key_w=Tensor(rng.normal(size=(l_out, l_inter)), requires_grad=True),
        key_b=Tensor(rng.normal(size=l_out), requires_grad=True),
        value_w=Tensor(rng.normal(size=(l_out, l_inter)), requires_grad=True),
        value_b=Tensor(rng.normal(size=l_out), requires_grad=True),
        scale=scale if scale is not None else default_scale(l_out),
    )


def make_se(rng, c, r=4):
    return SeParams(
        fc1_w=Tensor(rng.normal(size=(c // r, c)), requires_grad=True),
        fc1_b=Tensor(np.zeros(c // r), requires_grad=True),
        fc2_w=Tensor(rng.normal(size=(c, c // r)), requires_grad=True),
        fc2_b=Tensor(np.zeros(c), requires_grad=True),
    )


# ---------------------------------------------------------------------------
# patchify


def test_patchify_roundtrip():
    e = np.random.default_rng(0).normal(size=(5, 3, 4))
    back = unpatchify(patchify(Tensor(e)), 3, 4)
    assert np.array_equal(back.data, e)


def test_patchify_single_position():
    e = np.random.default_rng(1).normal(size=(7, 1, 1))
    p = patchify(Tensor(e)).data
    assert p.shape == (1, 7)
    assert np.array_equal(p[0], e[:, 0, 0])


def test_patch_order_is_row_major():
    e = np.random.default_rng(2).normal(size=(2, 2, 2))
    p = patchify(Tensor(e)).data
    for row in range(2):
        for col in range(2):
            assert np.array_equal(p[row * 2 + col], e[:, row, col])


def test_unpatchify_rejects_wrong_count():
    with pytest.raises(DimensionError):
        unpatchify(Tensor(np.zeros((5, 3))), 2, 2)


# ---------------------------------------------------------------------------
# cross-attention


def test_cam_single_patch_ignores_query():
    rng = np.random.default_rng(3)
    params = make_cam(rng, l_inter=6, l_out=4)
    e_main = rng.normal(size=(6, 1, 1))
    for _ in range(3):
        e_aux = rng.normal(size=(1, 4))
        out = cam_forward(Tensor(e_main), Tensor(e_aux), params).data
        expected = params.value_w.data @ e_main[:, 0, 0] + params.value_b.data
        assert np.allclose(out[:, 0, 0], expected, atol=1e-12)


def test_cam_zero_scale_averages_values():
    rng = np.random.default_rng(4)
    params = make_cam(rng, l_inter=5, l_out=3, scale=1e-12)
    e_main = rng.normal(size=(5, 2, 2))
    e_aux = rng.normal(size=(4, 3))
    out = cam_forward(Tensor(e_main), Tensor(e_aux), params).data
    patches = [e_main[:, i, j] for i in range(2) for j in range(2)]
    mean_value = np.mean([params.value_w.data @ p + params.value_b.data for p in patches], axis=0)
    for i in range(2):
        for j in range(2):
            assert np.allclose(out[:, i, j], mean_value, atol=1e-5)


def test_cam_output_shape_at_paper_scale():
    rng = np.random.default_rng(5)
    params = make_cam(rng, l_inter=128, l_out=300)
    out = cam_forward(
        Tensor(rng.normal(size=(128, 5, 5))), Tensor(rng.normal(size=(25, 300))), params
    )
    assert out.data.shape == (300, 5, 5)


def test_cam_matches_naive_oracle():
    rng = np.random.default_rng(6)
    for _ in range(10):
        params = make_cam(rng, l_inter=4, l_out=3, scale=float(rng.uniform(0.2, 2.0)))
        e_main = rng.normal(size=(4, 2, 2))
        e_aux = rng.normal(size=(4, 3))
        got = cam_forward(Tensor(e_main), Tensor(e_aux), params).data
        want = naive_cam(
            e_main,
            e_aux,
            params.key_w.data,
            params.key_b.data,
            params.value_w.data,
            params.value_b.data,
            params.scale,
        )
        assert np.allclose(got, want, atol=1e-10)


def test_cam_attention_rows_sum_to_one():
    rng = np.random.default_rng(7)
    params = make_cam(rng, l_inter=8, l_out=5)
    att = cam_attention(
        Tensor(rng.normal(size=(8, 3, 3))), Tensor(rng.normal(size=(9, 5))), params
    ).data
    assert att.shape == (9, 9)
    assert np.allclose(att.sum(axis=1), 1.0, atol=1e-6)
    assert att.min() >= 0


def test_cam_batched_matches_single():
    rng = np.random.default_rng(8)
    params = make_cam(rng, l_inter=4, l_out=3)
    e_main = rng.normal(size=(3, 4, 2, 2))
    e_aux = rng.normal(size=(3, 4, 3))
    batched = cam_forward(Tensor(e_main), Tensor(e_aux), params).data
    for i in range(3):
        single = cam_forward(Tensor(e_main[i]), Tensor(e_aux[i]), params).data
        assert np.allclose(batched[i], single, atol=1e-12)


def test_cam_permutation_consistency():
    # permuting the patch order of both inputs permutes the output patches
    rng = np.random.default_rng(9)
    params = make_cam(rng, l_inter=4, l_out=3)
    e_main = rng.normal(size=(4, 2, 2))
    e_aux = rng.normal(size=(4, 3))
    base = patchify(cam_forward(Tensor(e_main), Tensor(e_aux), params)).data
    perm = np.array([2, 0, 3, 1])
    pm = patchify(Tensor(e_main)).data[perm]
    e_main_p = unpatchify(Tensor(pm), 2, 2).data
    out_p = patchify(cam_forward(Tensor(e_main_p), Tensor(e_aux[perm]), params)).data
    assert np.allclose(out_p, base[perm], atol=1e-10)


def test_cam_patch_count_mismatch():
    rng = np.random.default_rng(10)
    params = make_cam(rng, l_inter=4, l_out=3)
    with pytest.raises(DimensionError):
        cam_forward(Tensor(rng.normal(size=(4, 2, 2))), Tensor(rng.normal(size=(5, 3))), params)


def test_cam_rejects_nonpositive_scale():
    rng = np.random.default_rng(11)
    with pytest.raises(ParameterError):
        make_cam(rng, 4, 3, scale=0.0)


def test_cam_gradients_match_fd():
    rng = np.random.default_rng(12)
    params = make_cam(rng, l_inter=3, l_out=3)
    e_main = Tensor(rng.normal(size=(3, 2, 2)), requires_grad=True)
    e_aux_data = rng.normal(size=(4, 3))
    weights = rng.normal(size=(3, 2, 2))

    def forward(em):
        return T.sum_(T.mul(cam_forward(em, Tensor(e_aux_data), params), Tensor(weights)))

    forward(e_main).backward()
    analytic = e_main.grad.copy()
    fd = finite_difference_gradient(lambda t: forward(Tensor(t.data)).item(), Tensor(e_main.data.copy()))
    assert relative_error(analytic, fd) < 1e-4


# ---------------------------------------------------------------------------
# squeeze-excitation


def test_se_saturated_gate_is_identity():
    rng = np.random.default_rng(13)
    c = 8
    params = make_se(rng, c)
    params.fc1_w.data[:] = 0.0
    params.fc2_w.data[:] = 0.0
    params.fc2_b.data[:] = 50.0  # sigmoid(50) ~ 1
    x = rng.normal(size=(c, 3, 3))
    out = se_forward(Tensor(x), params).data
    assert np.allclose(out, x, atol=1e-5)


def test_se_closed_gate_zeroes_output():
    rng = np.random.default_rng(14)
    c = 8
    params = make_se(rng, c)
    params.fc1_w.data[:] = 0.0
    params.fc2_w.data[:] = 0.0
    params.fc2_b.data[:] = -50.0
    x = rng.normal(size=(c, 3, 3))
    out = se_forward(Tensor(x), params).data
    assert np.allclose(out, 0.0, atol=1e-5)


def test_se_matches_direct_recomputation():
    rng = np.random.default_rng(15)
    c = 8
    params = make_se(rng, c)
    x = rng.normal(size=(c, 4, 4))
    got = se_forward(Tensor(x), params).data
    pooled = x.mean(axis=(1, 2))
    z = np.maximum(params.fc1_w.data @ pooled + params.fc1_b.data, 0.0)
    s = 1.0 / (1.0 + np.exp(-(params.fc2_w.data @ z + params.fc2_b.data)))
    want = x * s[:, None, None]
    assert np.allclose(got, want, atol=1e-10)
    assert got.shape == x.shape


def test_se_batched_matches_single():
    rng = np.random.default_rng(16)
    params = make_se(rng, 4, r=2)
    x = rng.normal(size=(3, 4, 2, 2))
    batched = se_forward(Tensor(x), params).data
    for i in range(3):
        assert np.allclose(batched[i], se_forward(Tensor(x[i]), params).data, atol=1e-12)


def test_se_gradients_match_fd():
    rng = np.random.default_rng(17)
    params = make_se(rng, 4, r=2)
    x = Tensor(rng.normal(size=(4, 2, 2)), requires_grad=True)
    weights = rng.normal(size=(4, 2, 2))

    def forward(xv):
        return T.sum_(T.mul(se_forward(xv, params), Tensor(weights)))

    forward(x).backward()
    analytic = x.grad.copy()
    fd = finite_difference_gradient(lambda t: forward(Tensor(t.data)).item(), Tensor(x.data.copy()))
    assert relative_error(analytic, fd) < 1e-4


# ---------------------------------------------------------------------------
# concat and none


def test_concat_shapes_at_paper_scale():
    rng = np.random.default_rng(18)
    out = concat_fusion(Tensor(rng.normal(size=(128, 5, 5))), Tensor(rng.normal(size=(25, 300))))
    assert out.data.shape == (428, 5, 5)


def test_concat_leading_channels_are_visual():
    rng = np.random.default_rng(19)
    e_main = rng.normal(size=(3, 2, 2))
    e_aux = rng.normal(size=(4, 5))
    out = concat_fusion(Tensor(e_main), Tensor(e_aux)).data
    assert np.array_equal(out[:3], e_main)
    assert np.array_equal(out[3:], unpatchify(Tensor(e_aux), 2, 2).data)


def test_concat_zero_semantic_channels():
    rng = np.random.default_rng(20)
    out = concat_fusion(Tensor(rng.normal(size=(3, 2, 2))), Tensor(np.zeros((4, 6)))).data
    assert np.allclose(out[3:], 0.0)


def test_concat_patch_count_mismatch():
    with pytest.raises(DimensionError):
        concat_fusion(Tensor(np.zeros((3, 2, 2))), Tensor(np.zeros((9, 5))))
