import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from mrharmonize.losses import (LossWeights, code_l1, contrastive_loss, cycle_loss, kl_to_standard_normal,
                                recon_loss, sample_anatomy_patches, sample_artifact_triplets, soft_levels,
                                total_loss)

f64 = dict(dtype=torch.float64)


def _scalar_contrastive(q, pos, negs):
    sp = sum(a * b for a, b in zip(q, pos))
    sn = [sum(a * b for a, b in zip(q, n)) for n in negs]
    return -math.log(math.exp(sp) / (math.exp(sp) + sum(math.exp(s) for s in sn) / len(sn)))


def test_contrastive_examples():
    q = torch.tensor([1.0, 0.0], **f64)
    assert contrastive_loss(q, q, q[None]).item() == pytest.approx(math.log(2), abs=1e-12)
    zero = torch.tensor([[0.0, 1.0]], **f64)
    val = contrastive_loss(q, q, zero).item()
    assert val == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    assert val == pytest.approx(0.3132617, abs=1e-7)
    assert contrastive_loss(q, 20 * q, zero).item() < 1e-8
    with pytest.raises(ValueError):
        contrastive_loss(q, q, torch.zeros(0, 2, **f64))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10 ** 6), n=st.integers(1, 9), scale=st.floats(0.1, 10))
def test_contrastive_matches_scalar_oracle(seed, n, scale):
    g = torch.Generator().manual_seed(seed)
    q, pos = torch.randn(2, 6, generator=g, **f64) * scale
    negs = torch.randn(n, 6, generator=g, **f64) * scale
    if float((negs @ q).abs().max()) > 600 or abs(float(q @ pos)) > 600:
        return
    expected = _scalar_contrastive(q.tolist(), pos.tolist(), negs.tolist())
    assert contrastive_loss(q, pos, negs).item() == pytest.approx(expected, rel=1e-9, abs=1e-12)


def test_contrastive_extreme_logits_finite():
    q = torch.tensor([[1.0]], **f64)
    for a, b in [(1e4, -1e4), (-1e4, 1e4)]:
        out = contrastive_loss(q, q * a, (q * b)[:, None])
        assert torch.isfinite(out)


def test_kl_examples():
    z = torch.zeros(1, 2, **f64)
    assert kl_to_standard_normal(z, z).item() == 0.0
    assert kl_to_standard_normal(torch.tensor([[1.0, 0.0]], **f64), z).item() == pytest.approx(0.5)
    lv = torch.tensor([[math.log(4), 0.0]], **f64)
    assert kl_to_standard_normal(z, lv).item() == pytest.approx(0.5 * (4 - math.log(4) - 1), abs=1e-12)
    assert kl_to_standard_normal(z, lv).item() == pytest.approx(0.8069, abs=1e-4)


@settings(max_examples=40, deadline=None)
@given(mu=st.lists(st.floats(-5, 5), min_size=2, max_size=2), lv=st.lists(st.floats(-8, 8), min_size=2, max_size=2))
def test_kl_nonnegative(mu, lv):
    assert kl_to_standard_normal(torch.tensor([mu], **f64), torch.tensor([lv], **f64)).item() >= -1e-12


class _FixedEncoders:
    def __init__(self, theta, eta):
        self.theta, self.eta = theta, eta

    def contrast_encode(self, x):
        return self.theta.expand(x.shape[0], -1), None

    def artifact_encode(self, x):
        return self.eta.expand(x.shape[0], -1)


def test_cycle_examples():
    x = torch.zeros(3, 1, 16, 16)
    theta, eta = torch.tensor([[0.3, -0.2]], **f64), torch.tensor([[1.0, 2.0]], **f64)
    enc = _FixedEncoders(theta, eta)
    assert cycle_loss(x, theta, eta, enc).item() == 0.0
    off = theta + torch.tensor([[0.1, -0.1]], **f64)
    assert cycle_loss(x, off, eta, enc).item() == pytest.approx(0.2, abs=1e-12)
    assert code_l1(theta, eta, -theta, -eta).item() >= 0


def test_total_loss_examples():
    ones = {k: torch.tensor(1.0, **f64) for k in ("recon", "kl", "contr_anat", "contr_artifact", "cycle")}
    assert total_loss(ones).item() == pytest.approx(1.30001, abs=1e-12)
    zeros = {k: v * 0 for k, v in ones.items()}
    assert total_loss(zeros).item() == 0.0
    assert total_loss(ones, LossWeights(0, 0, 0, 0)).item() == 1.0
    with pytest.raises(ValueError):
        LossWeights(kl=-1)
    assert recon_loss(torch.ones(2, 1, 4, 4), torch.zeros(2, 1, 4, 4)).item() == 1.0


@settings(max_examples=40, deadline=None)
@given(x=st.lists(st.floats(0, 1.5), min_size=1, max_size=30))
def test_soft_levels_partition_and_reconstruction(x):
    t = torch.tensor(x, **f64).view(1, 1, 1, -1)
    lv = soft_levels(t)
    assert torch.allclose(lv.sum(1), torch.ones_like(t[:, 0]), atol=1e-12)
    centers = torch.linspace(0, 1.5, 5, **f64).view(1, 5, 1, 1)
    assert torch.allclose((lv * centers).sum(1), t[:, 0], atol=1e-12)


def _betas(seed, b=2, h=12, w=10):
    g = torch.Generator().manual_seed(seed)
    bi = torch.softmax(torch.randn(b, 5, h, w, generator=g) * 3, 1)
    bj = torch.softmax(torch.randn(b, 5, h, w, generator=g) * 3, 1)
    x = torch.rand(b, 2, h, w, generator=g) * 1.5
    return bi, bj, x


def test_patch_location_contract_1x1():
    bi, bj, x = _betas(0)
    t = sample_anatomy_patches(bi, bj, x, patch=1, n_neg=4, n_query=50, generator=torch.Generator().manual_seed(1))
    assert t.n_image == 2 and t.negatives.shape == (50, 4, 5)
    for k, (b, r, c) in enumerate(t.locations.tolist()):
        assert torch.allclose(t.query[k], F.normalize(bi[b, :, r, c], dim=0))
        assert torch.allclose(t.positive[k], F.normalize(bj[b, :, r, c], dim=0))
        img_negs = [F.normalize(soft_levels(x[b:b + 1, i:i + 1])[0, :, r, c], dim=0) for i in range(2)]
        for n in range(2):
            assert any(torch.allclose(t.negatives[k, n], v, atol=1e-6) for v in img_negs)


def test_patch_unit_norm_reproducible_and_errors():
    bi, bj, x = _betas(2)
    a = sample_anatomy_patches(bi, bj, x, generator=torch.Generator().manual_seed(3))
    b = sample_anatomy_patches(bi, bj, x, generator=torch.Generator().manual_seed(3))
    assert torch.equal(a.query, b.query) and torch.equal(a.negatives, b.negatives)
    for v in (a.query, a.positive, a.negatives):
        assert torch.allclose(v.norm(dim=-1), torch.ones(v.shape[:-1]), atol=1e-6)
    assert a.query.shape == (64, 45) and a.negatives.shape == (64, 8, 45)
    with pytest.raises(ValueError):
        sample_anatomy_patches(bi, bj, x, patch=11)
    with pytest.raises(ValueError):
        sample_anatomy_patches(bi, bj[:, :, :-1], x)


def test_patch_location_negatives_avoid_query_location():
    bi, bj, x = _betas(4, b=1, h=4, w=4)
    # distinct one-hot-ish content per location lets us identify where a patch came from
    t = sample_anatomy_patches(bi, bi.clone(), x, patch=1, n_neg=2, n_query=200,
                               generator=torch.Generator().manual_seed(0), foreground=False)
    loc_negs = t.negatives[:, 1]
    assert not bool(torch.isclose(loc_negs, t.query, atol=1e-7).all(-1).any())


def test_patch_queries_on_foreground():
    bi, bj, _ = _betas(5, b=1, h=16, w=16)
    x = torch.zeros(1, 1, 16, 16)
    x[..., 4:8, 6:12] = 1.0
    t = sample_anatomy_patches(bi, bj, x, patch=3, n_query=100, generator=torch.Generator().manual_seed(2))
    for _, r, c in t.locations.tolist():
        assert x[0, 0, r + 1, c + 1] > 0


def _pool(n=3, shape=(32, 32, 6)):
    rng = np.random.default_rng(0)
    return [rng.random(shape).astype(np.float32) * (i + 1) / n for i in range(n)]


def test_artifact_triplet_policy():
    pool = _pool()
    t = sample_artifact_triplets(pool, m=2, seed=0)
    assert t.negative_source.count(-1) == 1 and len(t.negatives) == 2
    assert t.negative_source[1] != t.volume
    t = sample_artifact_triplets(pool, m=4, severity_range=(0.3, 0.3), seed=5)
    vol = pool[t.volume]
    slices = [vol[..., k] for k in range(vol.shape[2])]
    assert any(np.array_equal(t.query, s) for s in slices)
    assert any(np.array_equal(t.positive, s) for s in slices)
    for neg, src, sev in zip(t.negatives, t.negative_source, t.severities):
        if src == -1:
            assert sev == 0.3 and np.mean((neg - t.query) ** 2) > 0
    a = sample_artifact_triplets(pool, seed=9)
    b = sample_artifact_triplets(pool, seed=9)
    assert np.array_equal(a.negatives, b.negatives)


def test_artifact_triplet_errors():
    pool = _pool()
    with pytest.raises(ValueError):
        sample_artifact_triplets(pool[:1])
    with pytest.raises(ValueError):
        sample_artifact_triplets(pool, m=1)
    with pytest.raises(ValueError):
        sample_artifact_triplets(pool, severity_range=(0.5, 0.2))
