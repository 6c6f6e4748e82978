import math

import numpy as np
import pytest

from fairaudit.errors import ContractError
from fairaudit.model import (
    Arch,
    ModelParams,
    ModelSpec,
    batch_losses,
    batch_per_sample_grads,
    batch_predict,
    forward_loss,
    init_params,
    load_params,
    num_params,
    per_sample_grad,
    predict,
    save_params,
    unpack,
)

from oracles import fd_relative_errors, xent_mp

LR = ModelSpec(Arch.LR, (6,), 4)
MLP = ModelSpec(Arch.MLP, (6,), 3, hidden=5)
CNN = ModelSpec(Arch.CNN, (1, 16, 16), 3)


def test_param_counts():
    assert num_params(ModelSpec("LR", (784,), 10)) == 7850
    assert num_params(ModelSpec("MLP", (784,), 10)) == 203_530
    # 28x28 -> conv5 24 -> pool 12 -> conv4 9 -> pool 4
    expected = 16 * 25 + 16 + 32 * 16 * 16 + 32 + 32 * 512 + 32 + 32 * 10 + 10
    assert num_params(ModelSpec("CNN", (1, 28, 28), 10)) == expected


def test_cnn_rejects_tiny_input():
    with pytest.raises(ContractError):
        ModelSpec("CNN", (1, 12, 12), 10)


def test_init_deterministic_and_bounded():
    a, b = init_params(MLP, 5), init_params(MLP, 5)
    assert np.array_equal(a.theta, b.theta)
    assert not np.array_equal(a.theta, init_params(MLP, 6).theta)
    p = unpack(MLP, a.theta)
    assert np.all(p["b1"] == 0) and np.all(p["b2"] == 0)
    assert np.abs(p["w1"]).max() <= math.sqrt(1 / 6)
    assert np.abs(p["w2"]).max() <= math.sqrt(1 / 5)


def test_theta_length_contract():
    with pytest.raises(ContractError):
        ModelParams(LR, np.zeros(3))


@pytest.mark.parametrize("spec", [LR, MLP, CNN], ids=["LR", "MLP", "CNN"])
def test_uniform_logits_give_log_L(spec):
    zero = ModelParams(spec, np.zeros(num_params(spec)))
    x = np.random.default_rng(0).random(spec.input_size)
    assert forward_loss(zero, x, 1) == pytest.approx(math.log(spec.num_classes), abs=1e-15)
    assert predict(zero, x) == 0


def test_loss_vanishes_with_margin():
    theta = np.zeros(num_params(LR))
    theta[-4:] = [0.0, 800.0, 0.0, 0.0]  # bias on class 1
    assert forward_loss(ModelParams(LR, theta), np.zeros(6), 1) == 0.0


def test_loss_matches_high_precision_recomputation():
    rng = np.random.default_rng(11)
    params = ModelParams(LR, rng.standard_normal(num_params(LR)) * 3)
    x = rng.standard_normal(6)
    p = unpack(LR, params.theta)
    z = p["w"] @ x + p["b"]
    for y in range(4):
        assert float(xent_mp(z, y)) == pytest.approx(forward_loss(params, x, y), rel=1e-14)


def test_lr_gradient_closed_form_at_zero():
    x = np.arange(1.0, 7.0)
    g = per_sample_grad(ModelParams(LR, np.zeros(num_params(LR))), x, 2)
    delta = np.full(4, 0.25)
    delta[2] -= 1.0
    np.testing.assert_allclose(g, np.concatenate([np.outer(delta, x).ravel(), delta]), rtol=0, atol=1e-15)


@pytest.mark.parametrize("spec,tol", [(LR, 1e-6), (MLP, 1e-6), (CNN, 1e-5)], ids=["LR", "MLP", "CNN"])
def test_finite_difference_agreement(spec, tol):
    assert fd_relative_errors(spec, probes=10, seed=3)[0] < tol


@pytest.mark.parametrize("spec", [LR, MLP, CNN], ids=["LR", "MLP", "CNN"])
def test_batched_matches_single(spec):
    rng = np.random.default_rng(2)
    params = init_params(spec, 1)
    X = rng.random((5, spec.input_size))
    y = rng.integers(0, spec.num_classes, 5)
    G = batch_per_sample_grads(params, X, y)
    L = batch_losses(params, X, y)
    for i in range(5):
        np.testing.assert_allclose(G[i], per_sample_grad(params, X[i], int(y[i])), rtol=1e-12, atol=1e-15)
        assert L[i] == pytest.approx(forward_loss(params, X[i], int(y[i])), rel=1e-12)


def test_pure_functions():
    params = init_params(CNN, 4)
    x = np.random.default_rng(0).random(CNN.input_size)
    g1, g2 = per_sample_grad(params, x, 1), per_sample_grad(params, x, 1)
    assert g1.tobytes() == g2.tobytes()
    assert forward_loss(params, x, 1) == forward_loss(params, x, 1)


def test_predict_ties_and_argmax():
    spec = ModelSpec("LR", (1,), 2)
    assert predict(ModelParams(spec, np.array([0.0, 0.0, 0.1, 0.9])), [0.0]) == 1
    assert batch_predict(ModelParams(spec, np.array([0.0, 0.0, 0.5, 0.5])), [[1.0], [2.0]]).tolist() == [0, 0]


def test_shape_mismatch_is_contract_error():
    params = init_params(LR, 0)
    with pytest.raises(ContractError):
        forward_loss(params, np.zeros(5), 0)
    with pytest.raises(ContractError):
        per_sample_grad(params, np.zeros(7), 0)
    with pytest.raises(ContractError):
        forward_loss(params, np.zeros(6), 4)


def test_snapshot_round_trip(tmp_path):
    params = init_params(CNN, 9)
    path = save_params(params, tmp_path / "p.bin", {"note": "x"})
    back, header = load_params(path)
    assert back.theta.tobytes() == params.theta.tobytes()
    assert back.spec == CNN and header["note"] == "x" and "cnn_convention" in header
