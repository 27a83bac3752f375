import numpy as np
import pytest

from kansae.errors import ConfigError, DimensionError, EmptyInputError, ModeError
from kansae.model import (
    backward,
    calibrate_knots,
    decode,
    encode,
    forward,
    grad_check,
    init_params,
    loss,
    loss_and_grads,
)
from kansae.spline import SplineBank, evaluate_bank


def random_model(mode, d=6, M=5, seed=0, calibrate=True):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(64, d))
    params = init_params(d, M, mode, X.mean(axis=0), seed)
    params.W_enc += 0.3 * rng.normal(size=params.W_enc.shape)
    params.b_enc += 0.1 * rng.normal(size=M)
    if mode == "kan":
        if calibrate:
            calibrate_knots(params, X)
        params.bank.control[:] = rng.normal(size=params.bank.control.shape)
    return params, X


def test_init_tied_and_unit_columns():
    p = init_params(8, 16, "kan", np.arange(8.0), seed=3)
    np.testing.assert_array_equal(p.W_enc, p.W_dec.T)
    np.testing.assert_allclose(np.linalg.norm(p.W_dec, axis=0), 1.0, atol=1e-12)
    np.testing.assert_array_equal(p.b_pre, np.arange(8.0))
    assert np.all(p.bank.control == 0) and np.all(p.b_enc == 0)
    q = init_params(8, 16, "kan", np.arange(8.0), seed=3)
    np.testing.assert_array_equal(p.W_dec, q.W_dec)


def test_fresh_kan_outputs_b_pre():
    p, X = random_model("kan")
    p.bank.control[:] = 0.0
    tr = forward(p, X)
    assert np.all(tr.z == 0)
    np.testing.assert_array_equal(tr.x_hat, np.broadcast_to(p.b_pre, X.shape))


def test_relu_matches_definition():
    p, X = random_model("relu")
    h, z = encode(p, X)
    np.testing.assert_allclose(h, (X - p.b_pre) @ p.W_enc.T + p.b_enc)
    np.testing.assert_array_equal(z, np.maximum(h, 0))
    np.testing.assert_allclose(decode(p, z), z @ p.W_dec.T + p.b_pre)


def test_kan_encode_matches_reference_spline():
    p, X = random_model("kan")
    h, z = encode(p, X)
    np.testing.assert_allclose(z, evaluate_bank(p.bank, h), atol=1e-12)


def test_single_token_encode():
    p, X = random_model("kan")
    _, z1 = encode(p, X[3])
    _, zb = encode(p, X)
    np.testing.assert_allclose(z1, zb[3], atol=1e-14)


def test_loss_decomposition():
    p, X = random_model("kan")
    lb = loss(p, X, 0.1)
    tr = forward(p, X)
    assert lb.recon == pytest.approx(np.mean(np.sum((X - tr.x_hat) ** 2, axis=1)))
    assert lb.sparsity == pytest.approx(np.mean(np.sum(np.abs(tr.z), axis=1)))
    assert lb.total == pytest.approx(lb.recon + 0.1 * lb.sparsity)


def test_errors():
    p, X = random_model("relu")
    with pytest.raises(DimensionError):
        encode(p, X[:, :3])
    with pytest.raises(EmptyInputError):
        loss(p, X[:0], 0.1)
    with pytest.raises(ConfigError):
        init_params(4, 4, "gelu")
    with pytest.raises(ModeError):
        calibrate_knots(p, X)
    with pytest.raises(ValueError):
        grad_check(p, X[:4], 0.1, step=0.0)


def test_calibration_percentiles_and_widening():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(2000, 4))
    p = init_params(4, 3, "kan", X.mean(axis=0), 0)
    p.W_enc[2] = 0.0  # constant pre-activation -> degenerate span
    calibrate_knots(p, X)
    H = (X - p.b_pre) @ p.W_enc.T + p.b_enc
    lo, hi = np.percentile(H, [1, 99], axis=0)
    np.testing.assert_allclose(p.bank.spans[:2], np.stack([lo, hi], 1)[:2])
    np.testing.assert_allclose(p.bank.spans[2], [-1.0, 1.0])
    assert p.bank.widened == 1


@pytest.mark.parametrize("mode", ["kan", "relu"])
@pytest.mark.parametrize("seed", range(3))
def test_grad_check(mode, seed):
    p, X = random_model(mode, seed=seed)
    assert grad_check(p, X[:6], 0.05) < 1e-4


def test_sharded_grads_sum_to_full():
    p, X = random_model("kan", seed=5)
    full = loss_and_grads(p, X, 0.1, X.shape[0])
    a = loss_and_grads(p, X[:20], 0.1, X.shape[0])
    b = loss_and_grads(p, X[20:], 0.1, X.shape[0])
    assert a[0] + b[0] == pytest.approx(full[0])
    for k, g in full[2].blocks().items():
        np.testing.assert_allclose(a[2].blocks()[k] + b[2].blocks()[k], g, atol=1e-12)


def test_backward_kink_convention():
    # a relu latent sitting exactly at h = 0 gets zero gradient through the kink
    p, X = random_model("relu", d=3, M=2)
    x = X[:1]
    p.b_enc[0] -= ((x - p.b_pre) @ p.W_enc.T + p.b_enc)[0, 0]
    _, g = backward(p, x, 0.5)
    assert np.all(g.W_enc[0] == 0) and g.b_enc[0] == 0


def test_bank_rejects_wrong_shapes():
    with pytest.raises(Exception):
        SplineBank(np.zeros((2, 13)), np.zeros((2, 8)))
