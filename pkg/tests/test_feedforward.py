"""Feed-forward sub-layer: both variants, add-norm, parameter arithmetic."""

import numpy as np
import pytest

import anchorbert.feedforward as F
import anchorbert.tensor as T
from anchorbert.errors import ShapeError
from anchorbert.tensor import Tensor
from helpers import check_grad, rel_err


def make_standard(d, d_f, rng, dtype=np.float64, grad=False):
    return F.StandardFfn(
        w1=Tensor(rng.normal(0, 0.2, (d, d_f)).astype(dtype), requires_grad=grad),
        b1=Tensor(rng.normal(0, 0.2, (d_f,)).astype(dtype), requires_grad=grad),
        w2=Tensor(rng.normal(0, 0.2, (d_f, d)).astype(dtype), requires_grad=grad),
        b2=Tensor(rng.normal(0, 0.2, (d,)).astype(dtype), requires_grad=grad),
    )


def make_factorized(d, d_f, d_r, rng, dtype=np.float64, grad=False):
    return F.FactorizedFfn(
        w1a=Tensor(rng.normal(0, 0.2, (d, d_r)).astype(dtype), requires_grad=grad),
        w1b=Tensor(rng.normal(0, 0.2, (d_r, d_f)).astype(dtype), requires_grad=grad),
        w2a=Tensor(rng.normal(0, 0.2, (d_f, d_r)).astype(dtype), requires_grad=grad),
        w2b=Tensor(rng.normal(0, 0.2, (d_r, d)).astype(dtype), requires_grad=grad),
        b1=Tensor(rng.normal(0, 0.2, (d_f,)).astype(dtype), requires_grad=grad),
        b2=Tensor(rng.normal(0, 0.2, (d,)).astype(dtype), requires_grad=grad),
    )


def test_zero_input_zero_biases_gives_zero_both_variants():
    rng = np.random.default_rng(0)
    std = make_standard(8, 32, rng)
    std.b1 = Tensor(np.zeros(32))
    std.b2 = Tensor(np.zeros(8))
    fac = make_factorized(8, 32, 4, rng)
    fac.b1 = Tensor(np.zeros(32))
    fac.b2 = Tensor(np.zeros(8))
    x = Tensor(np.zeros((4, 8)))
    np.testing.assert_allclose(F.ffn_forward(x, std).data, 0.0, atol=1e-12)
    np.testing.assert_allclose(F.ffn_forward(x, fac).data, 0.0, atol=1e-12)


def test_factorized_matches_substituted_standard():
    rng = np.random.default_rng(1)
    d, d_f, d_r = 16, 64, 4
    fac = make_factorized(d, d_f, d_r, rng, dtype=np.float32)
    std = F.StandardFfn(
        w1=Tensor(fac.w1a.data @ fac.w1b.data),
        b1=Tensor(fac.b1.data.copy()),
        w2=Tensor(fac.w2a.data @ fac.w2b.data),
        b2=Tensor(fac.b2.data.copy()),
    )
    x = Tensor(rng.uniform(-1, 1, (10, d)).astype(np.float32))
    out_f = F.ffn_forward(x, fac).data
    out_s = F.ffn_forward(x, std).data
    assert np.abs(out_f - out_s).max() < 1e-5


def test_standard_matches_oracle():
    rng = np.random.default_rng(2)
    d, d_f = 8, 32
    p = make_standard(d, d_f, rng)
    x = rng.normal(size=(4, d))
    out = F.ffn_forward(Tensor(x), p).data
    oracle = np.maximum(x @ p.w1.data + p.b1.data, 0) @ p.w2.data + p.b2.data
    assert rel_err(out, oracle) < 1e-12


def test_ffn_width_mismatch():
    rng = np.random.default_rng(3)
    p = make_standard(8, 32, rng)
    with pytest.raises(ShapeError):
        F.ffn_forward(Tensor(np.zeros((4, 7))), p)
    pf = make_factorized(8, 32, 4, rng)
    with pytest.raises(ShapeError):
        F.ffn_forward(Tensor(np.zeros((4, 7))), pf)


def test_param_count_arithmetic():
    # closed form ...
    assert F.ffn_param_count(64, 256) == 2 * 64 * 256 + 256 + 64 == 33088
    assert F.ffn_param_count(64, 256, 8) == 8 * (2 * 64 + 2 * 256) + 256 + 64 == 5440
    assert 5440 / 33088 < 0.17
    # ... verified by enumeration
    rng = np.random.default_rng(4)
    assert sum(t.data.size for t in make_standard(64, 256, rng).tensors()) == 33088
    assert sum(t.data.size for t in make_factorized(64, 256, 8, rng).tensors()) == 5440


def test_add_norm_negated_residual_is_zero():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(3, 8)))
    g = Tensor(np.ones(8))
    b = Tensor(np.zeros(8))
    out = F.add_norm(x, T.scale(x, -1.0), g, b).data
    np.testing.assert_allclose(out, 0.0, atol=1e-5)


def test_add_norm_zero_input_is_plain_layer_norm():
    rng = np.random.default_rng(6)
    s = Tensor(rng.normal(size=(3, 8)))
    g = Tensor(rng.normal(size=8) + 1.0)
    b = Tensor(rng.normal(size=8))
    out = F.add_norm(Tensor(np.zeros((3, 8))), s, g, b).data
    oracle = T.layer_norm(s, g, b).data
    np.testing.assert_array_equal(out, oracle)


def test_add_norm_matches_composition_oracle():
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=(3, 8)))
    s = Tensor(rng.normal(size=(3, 8)))
    g = Tensor(rng.normal(size=8) + 1.0)
    b = Tensor(rng.normal(size=8))
    out = F.add_norm(x, s, g, b).data
    oracle = T.layer_norm(T.add(x, s), g, b).data
    np.testing.assert_array_equal(out, oracle)


def test_add_norm_shape_mismatch():
    with pytest.raises(ShapeError):
        F.add_norm(Tensor(np.zeros((3, 8))), Tensor(np.zeros((3, 7))),
                   Tensor(np.ones(8)), Tensor(np.zeros(8)))


def test_grad_both_ffn_variants():
    rng = np.random.default_rng(8)
    d, d_f, d_r = 6, 8, 3
    x = Tensor(rng.normal(size=(4, d)) + 0.3, requires_grad=True)
    w = rng.normal(size=(4, d))
    std = make_standard(d, d_f, rng, grad=True)
    check_grad(lambda: T.sum_all(T.mul(F.ffn_forward(x, std), Tensor(w))),
               [x] + std.tensors())
    x2 = Tensor(rng.normal(size=(4, d)) + 0.3, requires_grad=True)
    fac = make_factorized(d, d_f, d_r, rng, grad=True)
    check_grad(lambda: T.sum_all(T.mul(F.ffn_forward(x2, fac), Tensor(w))),
               [x2] + fac.tensors())
