import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lamnet import tensor as T
from lamnet.fsa import FocalSpec, kernel_len
from lamnet.nn import ConvParams, conv2d, count_trainables, param_records
from lamnet.tensor import ShapeError, Tensor
from lamnet.ulm import csm_forward, iem_exchange, iem_gates, init_ulm, ulm_forward


def sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def planes(rows):
    """Rows are channels, columns are positions along W."""
    a = np.asarray(rows, dtype=np.float64)
    return Tensor(a.reshape(1, a.shape[0], 1, a.shape[1]))


def test_csm_zero_input():
    p = init_ulm(np.random.default_rng(0), 16, FocalSpec(), 4, dtype=np.float64)
    assert np.all(csm_forward(Tensor(np.zeros((1, 8, 3, 3))), p.sqz, p.exp).data == 0)


def test_csm_identity_weights_give_relu():
    eye = ConvParams(Tensor(np.eye(4).reshape(4, 4, 1, 1)))
    x = Tensor(np.random.default_rng(1).normal(size=(2, 4, 3, 3)))
    assert np.array_equal(csm_forward(x, eye, eye).data, np.maximum(x.data, 0))


def test_csm_is_composition():
    p = init_ulm(np.random.default_rng(2), 16, FocalSpec(), 4, dtype=np.float64)
    x = Tensor(np.random.default_rng(3).normal(size=(1, 8, 3, 3)))
    manual = conv2d(T.relu(conv2d(x, p.sqz)), p.exp).data
    assert np.array_equal(csm_forward(x, p.sqz, p.exp).data, manual)


def test_csm_is_per_pixel():
    p = init_ulm(np.random.default_rng(2), 16, FocalSpec(), 4, dtype=np.float64)
    x = np.random.default_rng(4).normal(size=(1, 8, 4, 4))
    y = x.copy()
    y[:, :, 0, 0] += 3.0
    a, b = csm_forward(Tensor(x), p.sqz, p.exp).data, csm_forward(Tensor(y), p.sqz, p.exp).data
    changed = np.any(a != b, axis=1)[0]
    assert changed[0, 0] and changed.sum() == 1


def test_csm_channel_mismatch():
    p = init_ulm(np.random.default_rng(0), 16, FocalSpec(), 4)
    with pytest.raises(ShapeError):
        csm_forward(Tensor(np.zeros((1, 4, 2, 2), np.float32)), p.sqz, p.exp)


def test_iem_zero_channel_branch_halves_spatial():
    x_s = Tensor(np.random.default_rng(5).normal(size=(1, 3, 2, 4)))
    out_s, _ = iem_exchange(x_s, Tensor(np.zeros((1, 3, 2, 4))))
    assert np.array_equal(out_s.data, 0.5 * x_s.data)


def test_iem_zero_spatial_branch():
    x_c = Tensor(np.random.default_rng(6).normal(size=(1, 3, 2, 4)))
    out_s, out_c = iem_exchange(Tensor(np.zeros((1, 3, 2, 4))), x_c)
    assert np.all(out_s.data == 0)
    assert np.array_equal(out_c.data, 0.5 * x_c.data)


def test_iem_hand_example():
    x_s, x_c = planes([[1, 0], [0, 1]]), planes([[1, 1], [0, 0]])
    out_s, out_c = iem_exchange(x_s, x_c)
    a = sig(1 / 2)  # g_c = [1, 1]; each x_s row dots to 1; divided by H*W = 2
    b = sig(1 / 2)  # g_s = [1, 1]; column 0 of x_c dots to 1, column 1 to 1; divided by C/2 = 2
    assert np.allclose(out_s.data.reshape(2, 2), [[a, 0], [0, a]], atol=1e-6)
    assert np.allclose(out_c.data.reshape(2, 2), [[b, b], [0, 0]], atol=1e-6)


def test_iem_asymmetric_hand_example():
    # distinguishes the per-channel from the per-position gate
    x_s, x_c = planes([[1, 2], [3, 4]]), planes([[1, 0], [2, 1]])
    alpha, beta = iem_gates(x_s, x_c)
    # g_c = [3, 1]: alpha_0 = sig((3 + 2) / 2), alpha_1 = sig((9 + 4) / 2)
    assert np.allclose(alpha.data.ravel(), [sig(2.5), sig(6.5)], atol=1e-12)
    # g_s = [3, 7]: beta_0 = sig((3 + 14) / 2), beta_1 = sig((0 + 7) / 2)
    assert np.allclose(beta.data.ravel(), [sig(8.5), sig(3.5)], atol=1e-12)
    assert alpha.shape == (1, 2, 1, 1) and beta.shape == (1, 1, 1, 2)


def test_iem_shape_mismatch():
    with pytest.raises(ShapeError):
        iem_exchange(Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.zeros((1, 3, 2, 2))))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))
def test_iem_gates_open_interval_and_sign(seed, c, h, w):
    rng = np.random.default_rng(seed)
    x_s, x_c = rng.normal(size=(2, c, h, w)), rng.normal(size=(2, c, h, w))
    alpha, beta = iem_gates(Tensor(x_s), Tensor(x_c))
    for g in (alpha.data, beta.data):
        assert np.all((g > 0) & (g < 1))
    out_s, _ = iem_exchange(Tensor(x_s), Tensor(x_c))
    assert np.array_equal(np.sign(out_s.data), np.sign(x_s))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_iem_channel_gate_spatially_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    x_s, x_c = rng.normal(size=(1, 3, 3, 4)), rng.normal(size=(1, 3, 3, 4))
    perm = rng.permutation(12)

    def shuffle(a):
        return a.reshape(1, 3, 12)[:, :, perm].reshape(1, 3, 3, 4)

    a1, _ = iem_gates(Tensor(x_s), Tensor(x_c))
    a2, _ = iem_gates(Tensor(shuffle(x_s)), Tensor(shuffle(x_c)))
    assert np.allclose(a1.data, a2.data, atol=1e-12)


def test_ulm_zero_input():
    p = init_ulm(np.random.default_rng(0), 16, FocalSpec(), 4, dtype=np.float64)
    assert np.all(ulm_forward(Tensor(np.zeros((1, 16, 6, 6))), p).data == 0)


def test_ulm_parameter_count_example():
    p = init_ulm(np.random.default_rng(0), 16, FocalSpec(), 4)
    assert count_trainables(param_records(p)) == 1680


@pytest.mark.parametrize("c", [8, 16, 32, 64])
@pytest.mark.parametrize("g", [1, 2, 4])
@pytest.mark.parametrize("spec", [FocalSpec((1,), (1,)), FocalSpec((1, 2), (2, 1)), FocalSpec()])
def test_ulm_parameter_formula(c, g, spec):
    if c % (2 * g):
        pytest.skip("channels must split evenly into groups")
    k = kernel_len(spec)
    p = init_ulm(np.random.default_rng(0), c, spec, g)
    assert 2 * count_trainables(param_records(p)) == 5 * c * c + 2 * (g + 1) * k * c


def test_ulm_matches_manual_pipeline():
    from lamnet.fsa import lsam_forward

    rng = np.random.default_rng(7)
    p = init_ulm(rng, 8, FocalSpec(), 2, dtype=np.float64)
    x = Tensor(rng.normal(size=(1, 8, 6, 6)))
    mixed = conv2d(x, p.in_proj).data
    xs = lsam_forward(Tensor(mixed[:, :4]), p.lsam_h, p.lsam_v, p.spec)
    xc = csm_forward(Tensor(mixed[:, 4:]), p.sqz, p.exp)
    s2, c2 = iem_exchange(xs, xc)
    expect = conv2d(T.concat([s2, c2]), p.out_proj).data
    assert np.allclose(ulm_forward(x, p).data, expect, atol=1e-12)


def test_ulm_without_iem_skips_gating():
    rng = np.random.default_rng(8)
    p = init_ulm(rng, 8, FocalSpec(), 2, dtype=np.float64)
    x = Tensor(rng.normal(size=(1, 8, 6, 6)))
    assert not np.allclose(ulm_forward(x, p, use_iem=True).data, ulm_forward(x, p, use_iem=False).data)


def test_ulm_rejects_odd_channels():
    with pytest.raises(ValueError):
        init_ulm(np.random.default_rng(0), 7, FocalSpec(), 1)


def test_ulm_channel_mismatch():
    p = init_ulm(np.random.default_rng(0), 8, FocalSpec(), 2)
    with pytest.raises(ShapeError):
        ulm_forward(Tensor(np.zeros((1, 6, 4, 4), np.float32)), p)


def test_ulm_grad_check():
    rng = np.random.default_rng(9)
    p = init_ulm(rng, 8, FocalSpec(), 4, dtype=np.float64)
    params = [t for t in (p.in_proj.weight, p.sqz.weight, p.exp.weight, p.out_proj.weight,
                          p.lsam_h.dw.weight, p.lsam_h.pw.weight, p.lsam_v.dw.weight, p.lsam_v.pw.weight)]
    x = Tensor(rng.normal(size=(1, 8, 6, 6)))
    assert T.grad_check(lambda x, *_: ulm_forward(x, p), [x] + params) < 1e-4
