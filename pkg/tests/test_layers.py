import numpy as np
import pytest
import torch

from invc import layers
from invc.errors import NumericError, SizeError

from helpers import check_all_gradients, directional_fd_error


def rand_map(c, w, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(c, w, generator=g, dtype=dtype)


# --- instance_norm -------------------------------------------------------------

def test_in_constant_channel_maps_to_zero():
    m = torch.tensor([[5.0, 5.0, 5.0, 5.0]])
    out = layers.instance_norm(m, eps=1e-5)
    assert torch.allclose(out, torch.zeros_like(out), atol=1e-6)


def test_in_two_point_channel():
    m = torch.tensor([[0.0, 2.0]])
    out = layers.instance_norm(m, eps=0.0)
    assert torch.allclose(out, torch.tensor([[-1.0, 1.0]]))


def test_in_statistics_match_two_pass_oracle():
    eps = 1e-5
    m = rand_map(4, 128, seed=3)
    out = layers.instance_norm(m, eps)
    m_np = m.numpy()
    # independent two-pass oracle
    mu = m_np.mean(axis=1, keepdims=True)
    var = ((m_np - mu) ** 2).mean(axis=1, keepdims=True)
    expected = (m_np - mu) / np.sqrt(var + eps)
    np.testing.assert_allclose(out.numpy(), expected, atol=1e-6)
    assert np.abs(out.numpy().mean(axis=1)).max() <= 1e-6
    np.testing.assert_allclose(out.numpy().std(axis=1),
                               np.sqrt(var[:, 0] / (var[:, 0] + eps)), atol=1e-6)


def test_in_affine_invariance():
    rng = np.random.default_rng(0)
    for trial in range(30):
        m = rand_map(3, 64, seed=trial)
        a = torch.tensor(rng.uniform(0.5, 3.0, size=(3, 1)))
        b = torch.tensor(rng.normal(size=(3, 1)))
        out1 = layers.instance_norm(m, 1e-8)
        out2 = layers.instance_norm(a * m + b, 1e-8)
        assert (out1 - out2).abs().max() < 1e-5


def test_in_idempotent():
    m = rand_map(5, 200, seed=9)
    once = layers.instance_norm(m)
    twice = layers.instance_norm(once)
    assert (once - twice).abs().max() < 1e-5


def test_in_batched_matches_per_sample():
    batch = torch.stack([rand_map(4, 32, seed=i) for i in range(3)])
    out = layers.instance_norm(batch)
    for i in range(3):
        assert torch.equal(out[i], layers.instance_norm(batch[i]))


def test_in_rejects_non_finite():
    m = torch.zeros(2, 4)
    m[0, 0] = float("inf")
    with pytest.raises(NumericError):
        layers.instance_norm(m)


# --- adaptive_instance_norm ------------------------------------------------------

def test_adain_identity_affine_equals_in():
    m = rand_map(4, 50, seed=2)
    gamma = torch.ones(4, dtype=m.dtype)
    beta = torch.zeros(4, dtype=m.dtype)
    assert torch.equal(layers.adaptive_instance_norm(m, gamma, beta),
                       layers.instance_norm(m))


def test_adain_zero_gamma_gives_constant_beta():
    m = rand_map(3, 20, seed=4)
    gamma = torch.zeros(3, dtype=m.dtype)
    beta = torch.full((3,), 7.0, dtype=m.dtype)
    out = layers.adaptive_instance_norm(m, gamma, beta)
    assert torch.allclose(out, torch.full_like(out, 7.0))


def test_adain_channel_statistics_oracle():
    g = torch.Generator().manual_seed(11)
    m = rand_map(6, 256, seed=11)
    gamma = torch.randn(6, generator=g, dtype=m.dtype)
    beta = torch.randn(6, generator=g, dtype=m.dtype)
    out = layers.adaptive_instance_norm(m, gamma, beta)
    means = out.mean(dim=1)
    stds = out.std(dim=1, correction=0)
    in_stds = layers.instance_norm(m).std(dim=1, correction=0)
    assert (means - beta).abs().max() < 1e-5
    assert (stds - gamma.abs() * in_stds).abs().max() < 1e-5


def test_adain_channel_mismatch():
    with pytest.raises(SizeError):
        layers.adaptive_instance_norm(rand_map(4, 8), torch.ones(3), torch.zeros(3))


# --- pixel shuffle -----------------------------------------------------------------

def test_pixel_shuffle_identity_r1():
    m = rand_map(4, 8)
    assert torch.equal(layers.pixel_shuffle_1d(m, 1), m)


def test_pixel_shuffle_enumerated_2x2():
    m = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
    out = layers.pixel_shuffle_1d(m, 2)
    assert out.shape == (1, 4)
    assert torch.equal(out, torch.tensor([[1.0, 3.0, 2.0, 4.0]]))


def test_pixel_shuffle_index_formula():
    m = rand_map(6, 5, seed=1)
    out = layers.pixel_shuffle_1d(m, 2)
    for c in range(3):
        for w in range(5):
            for k in range(2):
                assert out[c, w * 2 + k] == m[c * 2 + k, w]


def test_pixel_shuffle_is_value_permutation():
    m = rand_map(8, 13, seed=6)
    out = layers.pixel_shuffle_1d(m, 2)
    assert out.shape == (4, 26)
    assert torch.equal(m.flatten().sort().values, out.flatten().sort().values)


def test_pixel_shuffle_bijection():
    m = rand_map(8, 5, seed=7)
    assert torch.equal(layers.pixel_unshuffle_1d(layers.pixel_shuffle_1d(m, 4), 4), m)


def test_pixel_shuffle_indivisible_channels():
    with pytest.raises(SizeError):
        layers.pixel_shuffle_1d(rand_map(3, 4), 2)


# --- pooling ----------------------------------------------------------------------

def test_avg_pool_constant_map():
    out = layers.avg_pool_over_time(torch.full((5, 9), 3.0))
    assert torch.allclose(out, torch.full((5,), 3.0))


def test_avg_pool_matches_direct_mean():
    m = rand_map(7, 91, seed=8)
    np.testing.assert_allclose(layers.avg_pool_over_time(m).numpy(),
                               m.numpy().mean(axis=1), atol=1e-7)


def test_avg_pool_of_instance_norm_is_zero_vector():
    for seed in range(10):
        m = rand_map(6, 100, seed=seed, dtype=torch.float32)
        pooled = layers.avg_pool_over_time(layers.instance_norm(m))
        assert pooled.abs().max() < 1e-6


# --- dropout / dense / residual ------------------------------------------------------

def test_dropout_rate_zero_or_eval_is_identity():
    m = rand_map(4, 10)
    g = torch.Generator().manual_seed(0)
    assert torch.equal(layers.dropout(m, 0.0, g, True), m)
    assert torch.equal(layers.dropout(m, 0.5, None, False), m)


def test_dropout_inverted_scaling_preserves_expectation():
    g = torch.Generator().manual_seed(0)
    m = torch.ones(200, 200, dtype=torch.float64)
    out = layers.dropout(m, 0.3, g, True)
    kept = out[out != 0]
    assert torch.allclose(kept, torch.full_like(kept, 1 / 0.7))
    assert abs(out.mean().item() - 1.0) < 0.01


def test_dropout_train_mode_requires_rng():
    with pytest.raises(ValueError):
        layers.dropout(rand_map(2, 2), 0.5, None, True)


def test_residual_block_zero_inner_weights_is_identity():
    block = layers.ResidualDense(6)
    with torch.no_grad():
        block.fc2.weight.zero_()
        block.fc2.bias.zero_()
    x = torch.randn(3, 6)
    block.eval()
    assert torch.allclose(block(x), x)


def test_dense_contract():
    w = torch.eye(4)
    b = torch.zeros(4)
    x = torch.randn(2, 4)
    assert torch.allclose(layers.dense(x, w, b), x)
    with pytest.raises(SizeError):
        layers.dense(torch.randn(2, 3), w, b)


# --- conv / conv bank -----------------------------------------------------------------

def test_conv1d_kernel1_identity_weights():
    conv = layers.Conv1d(3, 3, 1)
    with torch.no_grad():
        conv.weight.copy_(torch.eye(3).unsqueeze(-1))
        conv.bias.zero_()
    x = torch.randn(1, 3, 17)
    assert torch.allclose(conv(x), x)


def test_conv1d_preserves_length_and_strides():
    x = torch.randn(2, 4, 64)
    for k in (1, 2, 3, 5, 8):
        conv = layers.Conv1d(4, 6, k)
        assert conv(x).shape == (2, 6, 64)
    strided = layers.Conv1d(4, 6, 5, stride=2)
    assert strided(x).shape == (2, 6, 32)


def test_conv1d_circular_padding_shift_equivariance():
    # a time-constant input stays exactly time-constant (no edge decay)
    conv = layers.Conv1d(2, 3, 5)
    x = torch.ones(1, 2, 32)
    out = conv(x)
    assert (out - out[..., :1]).abs().max() < 1e-6


def test_conv_bank_passthrough():
    bank = layers.ConvBank(2, 2, 1, act="linear")
    with torch.no_grad():
        bank.convs[0].weight.copy_(torch.eye(2).unsqueeze(-1))
        bank.convs[0].bias.zero_()
    x = torch.randn(1, 2, 9)
    assert torch.allclose(bank(x), x)


def test_conv_bank_channel_count_and_length():
    bank = layers.ConvBank(4, 3, 8)
    out = bank(torch.randn(2, 4, 40))
    assert out.shape == (2, 24, 40)


def test_conv_bank_box_response_oracle():
    bank = layers.ConvBank(1, 1, 3, act="linear")
    with torch.no_grad():
        for conv in bank.convs:
            conv.weight.fill_(1.0)
            conv.bias.zero_()
    x = torch.zeros(1, 1, 15)
    x[0, 0, 7] = 1.0
    out = bank(x)
    # kernel-3 branch: all-ones filter on an impulse -> 3-wide box
    box = out[0, 2]
    expected = torch.zeros(15)
    expected[6:9] = 1.0
    assert torch.allclose(box, expected)


def test_conv_input_needs_time_steps():
    with pytest.raises(SizeError):
        layers.Conv1d(2, 2, 3)(torch.randn(1, 2, 0))


# --- analytic gradients vs central finite differences ------------------------------------

def _grad_check_single(fn, x, seed=0):
    x = x.clone().requires_grad_(True)
    loss = fn(x).pow(2).sum()
    loss.backward()
    return directional_fd_error(lambda: fn(x).pow(2).sum(), x, x.grad, seed=seed)


@pytest.mark.parametrize("name,fn", [
    ("instance_norm", lambda x: layers.instance_norm(x, 1e-5)),
    ("adain", lambda x: layers.adaptive_instance_norm(
        x, torch.tensor([1.3, -0.4, 0.8], dtype=torch.float64),
        torch.tensor([0.2, 0.0, -1.0], dtype=torch.float64), 1e-5)),
    ("pixel_shuffle", lambda x: layers.pixel_shuffle_1d(x, 3)),
    ("avg_pool", layers.avg_pool_over_time),
])
def test_layer_gradients_match_finite_differences(name, fn):
    x = rand_map(3, 24, seed=5)
    assert _grad_check_single(fn, x, seed=3) <= 1e-5


def test_conv_block_gradients_match_finite_differences():
    torch.manual_seed(0)
    block = layers.ConvBlock(3, 4, 5, use_in=True).double().eval()
    x = rand_map(3, 16, seed=1).unsqueeze(0)

    def loss_fn():
        return block(x).pow(2).sum()

    errors = check_all_gradients(loss_fn, dict(block.named_parameters()), n_dirs=3)
    assert max(errors.values()) <= 1e-5, errors


def test_conv_bank_gradients_match_finite_differences():
    torch.manual_seed(0)
    bank = layers.ConvBank(2, 3, 4).double()
    x = rand_map(2, 12, seed=2).unsqueeze(0)

    def loss_fn():
        return bank(x).pow(2).sum()

    errors = check_all_gradients(loss_fn, dict(bank.named_parameters()), n_dirs=3)
    assert max(errors.values()) <= 1e-5, errors
