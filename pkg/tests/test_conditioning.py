import numpy as np
import pytest
import torch

from mindvis.conditioning import (ConditionBundle, ConditionProjector, CrossAttention, LabelConditioner, ToyUNet,
                                  UNetConfig, cross_attention, denoise_unet, timestep_embedding)

CFG = UNetConfig(channels=(4, 8), time_dim=8, context_dim=4, heads=1, groups=2, M=2)


def live_unet(mode="ct", seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    unet = ToyUNet(UNetConfig(**{**CFG.to_dict(), "cond_mode": mode})).to(dtype)
    for site in unet.cross_attention_sites():
        torch.nn.init.normal_(site.to_out.weight, std=0.5)
    return unet


def rand_bundle(rng, b=2, m=2, d=4, td=8):
    return ConditionBundle(torch.from_numpy(rng.normal(size=(b, m, d))), torch.from_numpy(rng.normal(size=(b, td))))


def test_full_scale_condition_rows():
    assert UNetConfig.full_scale().M == 77
    assert UNetConfig().M == 8


def test_bundle_validation():
    b = ConditionBundle(torch.zeros(3, 4), torch.zeros(5))
    assert b.tau.shape == (1, 3, 4) and b.sigma.shape == (1, 5) and b.M == 3
    with pytest.raises(ValueError):
        ConditionBundle(torch.zeros(2, 0, 4), torch.zeros(2, 5))
    with pytest.raises(ValueError):
        ConditionBundle(torch.zeros(2, 3, 4), torch.zeros(3, 5))
    r = ConditionBundle(torch.arange(2.0).reshape(2, 1, 1), torch.zeros(2, 1)).repeat(3)
    assert r.tau.flatten().tolist() == [0, 0, 0, 1, 1, 1]


@pytest.mark.parametrize("bad", [dict(cond_mode="t"), dict(channels=(4, 8, 16)), dict(channels=(6, 8), groups=4),
                                 dict(time_dim=7), dict(M=0)])
def test_unet_config_validation(bad):
    with pytest.raises(ValueError):
        UNetConfig(**{**CFG.to_dict(), **bad})


# --- projector -------------------------------------------------------------------

def test_projector_shapes(rng):
    proj = ConditionProjector(num_tokens=16, token_dim=12, M=5, context_dim=7, time_dim=6)
    out = proj(torch.from_numpy(rng.normal(size=(3, 16, 12)).astype(np.float32)))
    assert out.tau.shape == (3, 5, 7) and out.sigma.shape == (3, 6)
    with pytest.raises(ValueError):
        proj(torch.zeros(3, 15, 12))
    with pytest.raises(ValueError):
        ConditionProjector(4, 12, 5, 7, 6)


def test_projector_zero_map_is_input_independent(rng):
    proj = ConditionProjector(6, 4, 3, 5, 2)
    with torch.no_grad():
        proj.pool.weight.zero_()
        proj.to_tau.weight.zero_()
        proj.to_sigma.weight.zero_()
        proj.to_sigma.bias.normal_()
    a = proj(torch.from_numpy(rng.normal(size=(1, 6, 4)).astype(np.float32)))
    b = proj(torch.from_numpy(rng.normal(size=(1, 6, 4)).astype(np.float32)))
    torch.testing.assert_close(a.tau, b.tau)
    torch.testing.assert_close(a.tau[0], proj.to_tau.bias.expand(3, 5))
    torch.testing.assert_close(a.sigma[0], proj.to_sigma.bias)


def test_projector_sigma_is_linear_in_tau_mean(rng):
    proj = ConditionProjector(6, 4, 3, 5, 2)
    torch.nn.init.normal_(proj.to_sigma.weight)
    out = proj(torch.from_numpy(rng.normal(size=(2, 6, 4)).astype(np.float32)))
    torch.testing.assert_close(out.sigma, proj.to_sigma(out.tau.mean(1)))


def test_sigma_projector_starts_at_zero(rng):
    proj = ConditionProjector(6, 4, 3, 5, 2)
    out = proj(torch.from_numpy(rng.normal(size=(2, 6, 4)).astype(np.float32)))
    assert torch.count_nonzero(out.sigma) == 0


def test_label_conditioner():
    lc = LabelConditioner(5, M=3, context_dim=4, time_dim=6)
    out = lc(torch.tensor([0, 4, 0]))
    assert out.tau.shape == (3, 3, 4) and torch.count_nonzero(out.sigma) == 0
    torch.testing.assert_close(out.tau[0], out.tau[2])


# --- cross-attention ---------------------------------------------------------------

def test_single_condition_row_broadcasts_value(rng):
    ca = CrossAttention(4, 3).double()
    torch.nn.init.normal_(ca.to_out.weight)
    feats = torch.from_numpy(rng.normal(size=(1, 4, 2, 2)))
    tau = torch.from_numpy(rng.normal(size=(1, 1, 3)))
    out = cross_attention(feats, tau, ca)
    v = ca.to_v(tau)[0, 0]
    expect = feats + ca.to_out(v).reshape(1, 4, 1, 1)
    torch.testing.assert_close(out, expect)
    feats2 = torch.from_numpy(rng.normal(size=(1, 4, 2, 2)))
    torch.testing.assert_close(cross_attention(feats2, tau, ca) - feats2, out - feats)


def test_identical_value_rows(rng):
    ca = CrossAttention(4, 3).double()
    torch.nn.init.normal_(ca.to_out.weight)
    feats = torch.from_numpy(rng.normal(size=(1, 4, 2, 2)))
    tau = torch.from_numpy(rng.normal(size=(1, 1, 3))).expand(1, 5, 3).clone()
    with torch.no_grad():
        ca.to_k.weight.normal_()
    out = ca(feats, tau) - feats
    expect = ca.to_out(ca.to_v(tau[:, :1]))[0, 0].reshape(4, 1, 1).expand(4, 2, 2)
    torch.testing.assert_close(out[0], expect)


def test_zero_output_projection_is_identity(rng):
    ca = CrossAttention(4, 3)
    feats = torch.from_numpy(rng.normal(size=(2, 4, 3, 3)).astype(np.float32))
    assert torch.equal(ca(feats, torch.randn(2, 5, 3)), feats)


def test_attention_rows_sum_to_one(rng):
    unet = live_unet(dtype=torch.float32)
    for site in unet.cross_attention_sites():
        site.keep_attn = True
    cond = ConditionBundle(torch.randn(2, 2, 4), torch.randn(2, 8))
    unet(torch.randn(2, 3, 4, 4), torch.tensor([3, 900]), cond)
    for site in unet.cross_attention_sites():
        np.testing.assert_allclose(site.last_attn.sum(-1).numpy(), 1.0, atol=1e-6)


# --- UNet ----------------------------------------------------------------------------

def test_time_embedding_shape_and_range():
    e = timestep_embedding(torch.tensor([1, 500, 1000]), 8)
    assert e.shape == (3, 8) and e.abs().max() <= 1.0


def test_mode_c_equals_ct_with_zero_sigma(rng):
    ct = live_unet("ct")
    c = ToyUNet(UNetConfig(**{**CFG.to_dict(), "cond_mode": "c"})).double()
    c.load_state_dict(ct.state_dict())
    x = torch.from_numpy(rng.normal(size=(2, 3, 4, 4)))
    t = torch.tensor([10, 700])
    tau = torch.from_numpy(rng.normal(size=(2, 2, 4)))
    zero = ConditionBundle(tau, torch.zeros(2, 8, dtype=torch.float64))
    assert torch.equal(ct(x, t, zero), c(x, t, zero))
    sig = ConditionBundle(tau, torch.ones(2, 8, dtype=torch.float64))
    assert torch.equal(c(x, t, sig), c(x, t, zero))
    assert not torch.equal(ct(x, t, sig), ct(x, t, zero))


def test_output_shape_for_all_t(rng):
    unet = live_unet()
    x = torch.from_numpy(rng.normal(size=(3, 3, 4, 4)))
    for t in (1, 2, 500, 1000):
        out = denoise_unet(x, torch.full((3,), t), rand_bundle(rng, b=3), unet.config, unet)
        assert out.shape == x.shape
    with pytest.raises(ValueError):
        denoise_unet(x[:, :2], torch.ones(3, dtype=torch.long), None, unet.config, unet)
    with pytest.raises(ValueError):
        denoise_unet(x, torch.ones(3, dtype=torch.long), None, UNetConfig(**{**CFG.to_dict(), "M": 3}), unet)


def test_perturbing_one_tau_row_changes_output(rng):
    unet = live_unet()
    x = torch.from_numpy(rng.normal(size=(1, 3, 4, 4)))
    t = torch.tensor([250])
    cond = rand_bundle(rng, b=1)
    base = unet(x, t, cond)
    tau = cond.tau.clone()
    tau[0, 1] += 0.1
    assert (unet(x, t, ConditionBundle(tau, cond.sigma)) - base).norm() > 0


def test_gradient_flows_through_tau_and_sigma(rng):
    unet = live_unet()
    x = torch.from_numpy(rng.normal(size=(1, 3, 4, 4)))
    t = torch.tensor([250])
    cond = rand_bundle(rng, b=1)
    target = torch.from_numpy(rng.normal(size=(1, 3, 4, 4)))

    def loss(tau, sigma):
        return ((unet(x, t, ConditionBundle(tau, sigma)) - target) ** 2).mean().item()

    h = 1e-6
    for which in ("tau", "sigma"):
        base = getattr(cond, which)
        fd = []
        for i in range(base.numel()):
            up, down = base.clone(), base.clone()
            up.view(-1)[i] += h
            down.view(-1)[i] -= h
            args = {"tau": cond.tau, "sigma": cond.sigma}
            fd.append((loss(**{**args, which: up}) - loss(**{**args, which: down})) / (2 * h))
        assert np.linalg.norm(fd) > 1e-8, which


def test_unconditional_path_skips_cross_attention(rng):
    unet = live_unet()
    x = torch.from_numpy(rng.normal(size=(1, 3, 4, 4)))
    a = unet(x, torch.tensor([5]), None)
    for site in unet.cross_attention_sites():
        torch.nn.init.normal_(site.to_q.weight)
    assert torch.equal(unet(x, torch.tensor([5]), None), a)
