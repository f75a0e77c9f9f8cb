import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from time_engine.fusion import (DAFT, Fusion, Projection, STRATEGIES, fuse_cat, fuse_daft, fuse_max,
                                fuse_sum, project)

T = torch.tensor


def test_cat_examples():
    assert fuse_cat(T([1., 2.]), T([3., 4., 5.])).tolist() == [1, 2, 3, 4, 5]
    assert fuse_cat(T([0., 0.]), T([7.])).tolist() == [0, 0, 7]
    assert fuse_cat(torch.zeros(3, 192), torch.zeros(3, 2048)).shape == (3, 2240)
    with pytest.raises(ValueError):
        fuse_cat(torch.zeros(0), T([1.]))


def test_sum_max_examples():
    assert fuse_sum(T([1., 2.]), T([3., 4.])).tolist() == [4, 6]
    assert fuse_max(T([1., 5.]), T([3., 4.])).tolist() == [3, 5]
    for f in (fuse_sum, fuse_max):
        with pytest.raises(ValueError):
            f(torch.zeros(2), torch.zeros(3))


def test_fusion_algebra_random_cases():
    g = torch.Generator().manual_seed(0)
    for _ in range(1000):
        k = int(torch.randint(1, 40, (1,), generator=g))
        a = torch.randn(k, generator=g)
        b = torch.randn(k, generator=g)
        assert torch.equal(fuse_sum(a, b), fuse_sum(b, a))
        assert torch.equal(fuse_max(a, b), fuse_max(b, a))
        assert torch.equal(fuse_max(a, a), a)
        assert torch.equal(fuse_sum(a, torch.zeros(k)), a)
        d_i = int(torch.randint(1, 40, (1,), generator=g))
        assert fuse_cat(a, torch.randn(d_i, generator=g)).shape == (k + d_i,)
        assert torch.equal(fuse_cat(a, b)[:k], a) and torch.equal(fuse_cat(a, b)[k:], b)


@given(st.sampled_from(STRATEGIES), st.integers(1, 32), st.integers(1, 48))
def test_dimension_contract(strategy, k, d_img):
    f = Fusion(strategy, 192, d_img, k)
    z = f(torch.randn(5, 192), torch.randn(5, d_img))
    expected = 192 + d_img if strategy == "cat" else k
    assert z.shape == (5, expected) and f.out_dim == expected


def test_projection_examples():
    p = Projection(192, 4, 192)
    with torch.no_grad():
        p.w_t.weight.copy_(torch.eye(192))
        p.w_i.weight.zero_()
    e_t, e_i = torch.randn(192), torch.randn(4)
    t, i = project(p, e_t, e_i)
    assert torch.equal(t, e_t) and torch.equal(i, torch.zeros(192))
    q = Projection(3, 3, 2)
    with torch.no_grad():
        q.w_t.weight.copy_(T([[1., 2., 3.], [4., 5., 6.]]))
    t, _ = project(q, T([1., 0., -1.]), torch.zeros(3))
    assert t.tolist() == [-2., -2.]
    assert q.w_t.bias is None and q.w_i.bias is None
    with pytest.raises(ValueError):
        project(q, torch.zeros(4), torch.zeros(3))


def test_daft_identity_at_init():
    torch.manual_seed(0)
    for k in (1, 7, 64, 192):
        p = DAFT(k)
        e_t, e_i = torch.randn(20, k) * 10, torch.randn(20, k) * 10
        assert (fuse_daft(p, e_t, e_i) - e_i).abs().max().item() == 0.0
    assert DAFT(192).bottleneck[0].out_features == math.ceil(2 * 192 / 7)


def test_daft_forced_alpha_one():
    p = DAFT(4)
    with torch.no_grad():
        p.bottleneck[2].bias.copy_(torch.cat([torch.ones(4), torch.zeros(4)]))
    e_i = torch.randn(3, 4)
    assert torch.allclose(p(torch.randn(3, 4), e_i), 2 * e_i)


def test_daft_dim_mismatch():
    with pytest.raises(ValueError):
        DAFT(4)(torch.zeros(2, 4), torch.zeros(2, 5))
    with pytest.raises(ValueError):
        DAFT(4)(torch.zeros(2, 5), torch.zeros(2, 5))


def test_daft_gradients_match_finite_differences():
    torch.manual_seed(1)
    k = 6
    p = DAFT(k).double()
    with torch.no_grad():
        for param in p.parameters():
            param.normal_(0, 0.5)
    e_t = torch.randn(4, k, dtype=torch.float64)
    e_i = torch.randn(4, k, dtype=torch.float64)
    w = torch.randn(4, k, dtype=torch.float64)

    def loss():
        z = p(e_t, e_i)
        return (w * z).sum() + 0.5 * (z ** 2).sum()

    p.zero_grad()
    loss().backward()
    h = 1e-5
    for name, param in p.named_parameters():
        analytic = param.grad.clone()
        numeric = torch.zeros_like(param)
        flat = param.data.view(-1)
        for idx in range(flat.numel()):
            orig = flat[idx].item()
            with torch.no_grad():
                flat[idx] = orig + h
                up = loss().item()
                flat[idx] = orig - h
                down = loss().item()
                flat[idx] = orig
            numeric.view(-1)[idx] = (up - down) / (2 * h)
        scale = torch.maximum(analytic.abs(), numeric.abs()).clamp_min(1e-3)
        rel = ((analytic - numeric).abs() / scale).max().item()
        assert rel < 1e-4, f"{name}: relative error {rel}"


def test_fusion_is_pure():
    torch.manual_seed(0)
    f = Fusion("daft", 192, 16, 32)
    before = {n: p.clone() for n, p in f.state_dict().items()}
    a, b = torch.randn(3, 192), torch.randn(3, 16)
    z1, z2 = f(a, b), f(a, b)
    assert torch.equal(z1, z2)
    for n, p in f.state_dict().items():
        assert torch.equal(before[n], p)


def test_unknown_strategy():
    with pytest.raises(ValueError):
        Fusion("film", 192, 8)
