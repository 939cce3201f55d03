import json
import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy import stats

from mrharmonize.networks import (CKPT_MAGIC, Checkpoint, CheckpointError, HarmonizationModel, ModelConfig,
                                  ShapeError, build_model, collapse_beta, config_digest, decode_checkpoint,
                                  encode_checkpoint, gumbel_noise, gumbel_softmax, hard_onehot,
                                  load_checkpoint, model_tensors, optimizer_tensors, restore_model,
                                  restore_optimizer, sample_theta, save_checkpoint, stable_seed)

TINY = ModelConfig(width=4, key_dim=16, artifact_growth=4)


def _tiny(seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    return HarmonizationModel(TINY).to(dtype)


# -- Gumbel softmax --------------------------------------------------------------

def test_gumbel_equal_logits_monte_carlo():
    g = torch.Generator().manual_seed(0)
    draws = gumbel_softmax(torch.zeros(1000, 5), 1.0, generator=g)
    assert torch.allclose(draws.mean(0), torch.full((5,), 0.2), atol=0.02)
    # hard winners of equal logits are uniform as well
    counts = torch.bincount(draws.argmax(1), minlength=5).numpy()
    assert stats.chisquare(counts).pvalue > 1e-3


def test_gumbel_noise_distribution():
    x = gumbel_noise((20000,), torch.Generator().manual_seed(1), torch.float64).numpy()
    assert stats.kstest(x, stats.gumbel_r.cdf).pvalue > 1e-3
    assert np.all(np.isfinite(gumbel_noise((100000,), torch.Generator().manual_seed(2)).numpy()))


def test_gumbel_saturation_and_errors():
    logits = torch.zeros(1, 5, 4, 4)
    logits[:, 2] = 20.0
    out = gumbel_softmax(logits, 1.0, seed=3)
    assert bool((out[:, 2] > 0.999).all())
    margin = torch.tensor([[3.0, 2.0, 0.0, -1.0, 0.5]])
    cold = gumbel_softmax(margin.repeat(200, 1), 0.01, seed=4)
    assert bool((cold.max(1).values > 0.99).mean(dtype=torch.float32) > 0.97)
    with pytest.raises(ValueError):
        gumbel_softmax(logits, 0.0)
    with pytest.raises(ValueError):
        gumbel_softmax(logits, -1.0)
    assert torch.equal(gumbel_softmax(logits, 0.5, seed=7), gumbel_softmax(logits, 0.5, seed=7))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10 ** 6), tau=st.floats(0.05, 5))
def test_gumbel_channel_sum(seed, tau):
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(2, 5, 3, 3, generator=g) * 5
    out = gumbel_softmax(logits, tau, generator=g)
    assert torch.allclose(out.sum(1), torch.ones(2, 3, 3), atol=1e-5)


def test_hard_onehot_and_collapse():
    logits = torch.tensor([[0.0, 3, 1, 0, 0]]).view(1, 5, 1, 1)
    oh = hard_onehot(logits)
    assert oh.flatten().tolist() == [0, 1, 0, 0, 0]
    assert collapse_beta(oh).item() == 0.25
    levels = torch.eye(5).view(5, 5, 1, 1)
    assert collapse_beta(levels).flatten().tolist() == [0, 0.25, 0.5, 0.75, 1.0]


# -- shapes and bounds --------------------------------------------------------------

def test_output_shapes():
    m = _tiny(dtype=torch.float32)
    x = torch.rand(2, 1, 64, 64) * 1.5
    beta = m.anatomy_encode(x, 1.0, generator=torch.Generator().manual_seed(0))
    assert beta.shape == (2, 5, 64, 64)
    assert torch.allclose(beta.sum(1), torch.ones(2, 64, 64), atol=1e-5)
    mu, lv = m.contrast_encode(x)
    assert mu.shape == (2, 2) and lv.shape == (2, 2)
    assert m.artifact_encode(x).shape == (2, 2)
    y = m.decode(beta, mu)
    assert y.shape == (2, 1, 64, 64)
    assert float(y.detach().min()) >= 0 and float(y.detach().max()) <= 1.5
    assert m.keys(mu, mu).shape == (2, 16) and m.query(mu, mu).shape == (2, 16)


def test_shape_errors():
    m = _tiny(dtype=torch.float32)
    with pytest.raises(ShapeError):
        m.anatomy_encode(torch.rand(1, 1, 40, 40))
    with pytest.raises(ShapeError):
        m.contrast_encode(torch.rand(1, 2, 32, 32))
    with pytest.raises(ShapeError):
        m.decode(torch.rand(1, 4, 32, 32), torch.zeros(1, 2))
    with pytest.raises(ShapeError):
        m.decode(torch.rand(1, 5, 32, 32), torch.zeros(2, 2))
    with pytest.raises(ValueError):
        m.anatomy_encode(torch.rand(1, 1, 32, 32), mode="sharp")


@pytest.mark.parametrize("fill", ["zeros", "max", "checker"])
def test_outputs_finite_at_extremes(fill):
    m = build_model(ModelConfig(width=8))
    x = torch.zeros(1, 1, 32, 32)
    if fill == "max":
        x += 1.5
    elif fill == "checker":
        x[..., ::2, ::2] = 1.5
    beta = m.anatomy_encode(x, 0.5, generator=torch.Generator().manual_seed(0))
    mu, lv = m.contrast_encode(x)
    eta = m.artifact_encode(x)
    out = m.decode(beta, torch.full((1, 2), 1e3))
    for t in (beta, mu, lv, eta, out, m.keys(mu, eta)):
        assert torch.isfinite(t).all()


@torch.no_grad()
def test_sensitivities():
    m = _tiny(dtype=torch.float32)
    x = torch.rand(1, 1, 32, 32)
    mu0, _ = m.contrast_encode(x)
    mu1, _ = m.contrast_encode(x + 0.3)
    assert float((mu0 - mu1).abs().sum()) > 0
    beta = m.anatomy_encode(x, mode="soft")
    a = m.decode(beta, torch.tensor([[0.0, 0.0]]))
    b = m.decode(beta, torch.tensor([[1.0, -1.0]]))
    assert float((a - b).abs().mean()) > 0
    th = torch.tensor([[0.2, 0.4]])
    assert torch.equal(m.keys(th, th), m.keys(th.clone(), th.clone()))


def test_decoder_translation_equivariance():
    # the anatomy encoder uses instance norm, so only the decoder is strictly
    # equivariant; shifts must be multiples of 16 and the compared window
    # must sit further from the border than the receptive field
    m = build_model(ModelConfig(width=4)).eval().double()
    torch.manual_seed(0)
    beta = torch.softmax(torch.randn(1, 5, 336, 336, dtype=torch.float64) * 3, 1)
    theta = torch.tensor([[0.3, -0.5]], dtype=torch.float64)
    with torch.no_grad():
        a = m.decode(beta[..., :320, :320], theta)
        b = m.decode(beta[..., 16:336, 16:336], theta)
    assert torch.allclose(a[..., 144:176, 144:176], b[..., 128:160, 128:160], atol=1e-12, rtol=0)


def test_anatomy_encoder_ignores_global_gain():
    # instance norm after the first conv removes a global intensity scale
    m = build_model(ModelConfig(width=4)).eval().double()
    x = torch.rand(2, 1, 32, 32, dtype=torch.float64)
    with torch.no_grad():
        a = m.anatomy_logits(x)
        b = m.anatomy_logits(3.0 * x)
    # exact up to the norm's epsilon; biases start at zero
    assert torch.allclose(a, b, atol=1e-3)


# -- gradients vs central finite differences ----------------------------------------------

def _fd_check(loss_fn, params, n_coords=12, seed=0, h=1e-6, rel=1e-3):
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    grads = [p.grad.clone() for p in params]
    rng = np.random.default_rng(seed)
    # one random direction across all parameters plus a few single coordinates
    with torch.no_grad():
        dirs = [[torch.randn_like(p) for p in params]]
        for _ in range(n_coords):
            k = int(rng.integers(len(params)))
            d = [torch.zeros_like(p) for p in params]
            d[k].view(-1)[int(rng.integers(params[k].numel()))] = 1.0
            dirs.append(d)
        for d in dirs:
            analytic = sum(float((g * v).sum()) for g, v in zip(grads, d))
            for p, v in zip(params, d):
                p.add_(h * v)
            up = float(loss_fn())
            for p, v in zip(params, d):
                p.sub_(2 * h * v)
            down = float(loss_fn())
            for p, v in zip(params, d):
                p.add_(h * v)
            numeric = (up - down) / (2 * h)
            assert abs(analytic - numeric) <= rel * max(abs(numeric), abs(analytic)) + 1e-7, (analytic, numeric)


def test_gradients_anatomy_and_decoder():
    m = _tiny()
    torch.manual_seed(1)
    x = torch.rand(2, 1, 16, 16, dtype=torch.float64) * 1.5
    noise = gumbel_noise((2, 5, 16, 16), torch.Generator().manual_seed(2), torch.float64)
    theta = torch.randn(2, 2, dtype=torch.float64)
    w = torch.randn(2, 1, 16, 16, dtype=torch.float64)

    def loss():
        beta = m.anatomy_encode(x, 0.7, noise=noise)
        return (m.decode(beta, theta) * w).sum()

    _fd_check(loss, list(m.anatomy_net.parameters()) + list(m.decoder.parameters()))


def test_gradients_encoders_and_heads():
    m = _tiny()
    torch.manual_seed(3)
    x = torch.rand(3, 1, 16, 16, dtype=torch.float64) * 1.5
    eps = torch.randn(3, 2, dtype=torch.float64)

    def loss():
        mu, lv = m.contrast_encode(x)
        theta = sample_theta(mu, lv, eps=eps)
        eta = m.artifact_encode(x)
        k = m.keys(theta, eta)
        q = m.query(theta, eta)
        return (k * q).sum() + (theta ** 2).sum() + eta.sum()

    params = (list(m.contrast_net.parameters()) + list(m.artifact_net.parameters())
              + list(m.key_head.parameters()) + list(m.query_head.parameters()))
    _fd_check(loss, params, n_coords=20)


# -- theta sampling --------------------------------------------------------------

def test_sample_theta():
    mu = torch.tensor([[0.3, -0.7]])
    floor = torch.full((1000, 2), -10.0)
    draws = sample_theta(mu.expand(1000, -1), floor, seed=0)
    # sigma = e^-5 at the clamp: mean absolute deviation is e^-5 * sqrt(2 / pi)
    assert float((draws - mu).abs().mean()) < 0.01
    eps = torch.tensor([[1.0, -2.0]])
    assert torch.allclose(sample_theta(mu, floor[:1], eps=eps), mu + np.exp(-5) * eps, atol=1e-7)
    big = sample_theta(torch.zeros(10000, 2, dtype=torch.float64), torch.zeros(10000, 2, dtype=torch.float64), seed=1)
    cov = np.cov(big.numpy().T)
    assert np.allclose(cov, np.eye(2), atol=0.05)
    assert torch.equal(sample_theta(mu, torch.zeros(1, 2), seed=5), sample_theta(mu, torch.zeros(1, 2), seed=5))
    mu_r = mu.clone().requires_grad_()
    lv_r = torch.zeros(1, 2, requires_grad=True)
    sample_theta(mu_r, lv_r, seed=2).sum().backward()
    assert mu_r.grad is not None and bool((lv_r.grad != 0).all())


# -- checkpoints -------------------------------------------------------------------

def _trained_pair(tmp_path):
    m = build_model(ModelConfig(width=4))
    opt = torch.optim.Adam(m.parameters(), lr=1e-3)
    x = torch.rand(2, 1, 32, 32)
    for _ in range(2):
        opt.zero_grad()
        mu, lv = m.contrast_encode(x)
        (m.decode(m.anatomy_encode(x, mode="soft"), mu).mean() + lv.mean()).backward()
        opt.step()
    return m, opt, x


def test_checkpoint_byte_identity_and_outputs(tmp_path):
    m, opt, x = _trained_pair(tmp_path)
    tensors = {**model_tensors(m), **optimizer_tensors(m, opt)}
    ck = Checkpoint(tensors, {"model": ModelConfig(width=4).to_dict()}, 2, 11, {"eta_clean_mean": [0.1, 0.2]})
    p1 = save_checkpoint(tmp_path / "a.ckpt", ck)
    back = load_checkpoint(p1)
    p2 = save_checkpoint(tmp_path / "b.ckpt", back)
    assert p1.read_bytes() == p2.read_bytes()
    assert back.step == 2 and back.seed == 11 and back.extra == {"eta_clean_mean": [0.1, 0.2]}

    m2 = build_model(back.config["model"])
    restore_model(m2, back.tensors)
    with torch.no_grad():
        assert torch.equal(m.contrast_encode(x)[0], m2.contrast_encode(x)[0])
        assert torch.equal(m.anatomy_encode(x, mode="soft"), m2.anatomy_encode(x, mode="soft"))
    opt2 = torch.optim.Adam(m2.parameters(), lr=1e-3)
    restore_optimizer(m2, opt2, back.tensors)
    assert optimizer_tensors(m2, opt2).keys() == optimizer_tensors(m, opt).keys()
    for k, v in optimizer_tensors(m2, opt2).items():
        assert np.array_equal(v, tensors[k])


def test_checkpoint_layout(tmp_path):
    ck = Checkpoint({"model/w": np.arange(6, dtype=np.float32).reshape(2, 3)}, {"a": 1}, 5, 0, {})
    data = encode_checkpoint(ck)
    assert data[:8] == CKPT_MAGIC
    version, hlen = struct.unpack("<IQ", data[8:20])
    header = json.loads(data[20:20 + hlen])
    assert version == 1 and header["config_digest"] == config_digest({"a": 1})
    assert header["tensors"] == [{"name": "model/w", "offset": 0, "shape": [2, 3]}]
    assert np.array_equal(np.frombuffer(data[20 + hlen:], "<f4"), np.arange(6, dtype=np.float32))


def test_checkpoint_errors(tmp_path):
    ck = Checkpoint({"model/w": np.ones(3, np.float32)}, {"a": 1}, 0, 0, {})
    path = save_checkpoint(tmp_path / "c.ckpt", ck)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, expected_digest=config_digest({"a": 2}))
    assert load_checkpoint(path, expected_digest=config_digest({"a": 2}), force=True).step == 0
    assert load_checkpoint(path, expected_digest=config_digest({"a": 1})).config == {"a": 1}
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"NOTACKPT" + bytes(20))
    data = bytearray(path.read_bytes())
    data[8] = 9
    with pytest.raises(CheckpointError):
        decode_checkpoint(bytes(data))


def test_stable_seed():
    assert stable_seed(1, "a") == stable_seed(1, "a")
    assert stable_seed(1, "a") != stable_seed(1, "b")
    assert 0 <= stable_seed(3) < 2 ** 63
