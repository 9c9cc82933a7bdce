import numpy as np
import pytest
import torch
import torch.nn as nn

from kiim.core import ExperimentConfig
from kiim.network import (
    KIIM,
    BidirectionalFusion,
    ConvEncoder,
    Ensemble,
    SoftAttention,
    SwinEncoder,
    UNetDecoder,
    ensemble,
    forward_sample,
    scaled_dot_attention,
)
from kiim.network.encoder import relative_position_index, shift_mask, window_partition, window_reverse
from kiim.objective import torch_composite
from conftest import random_sample


def toy_inputs(B=2, H=8, G=21, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    rgb = torch.rand(B, 3, H, H, generator=g, dtype=dtype)
    vi = torch.rand(B, 3, H, H, generator=g, dtype=dtype)
    crop = torch.randint(0, G, (B, H, H), generator=g)
    onehot = torch.nn.functional.one_hot(crop, G).permute(0, 3, 1, 2).to(dtype)
    land = (torch.rand(B, H, H, generator=g) > 0.4).to(dtype)
    label = torch.randint(0, 4, (B, H, H), generator=g)
    P = torch.rand(G, 4, generator=g, dtype=dtype) + 0.05
    return rgb, vi, onehot, land, label, P / P.sum(1, keepdim=True)


def tiny(**kw):
    base = dict(embed_dim=8, depths=(1, 1), num_heads=(1, 2), window_size=4, patch_size=2, attn_hidden=4)
    base.update(kw)
    return ExperimentConfig(**base)


def model_for(cfg, img=8, dtype=torch.float64, seed=0):
    torch.manual_seed(seed)
    return KIIM(cfg, img).to(dtype)


# -- soft attention --------------------------------------------------------------


def test_soft_attention_zero_params_gives_half():
    att = SoftAttention(8)
    for p in att.parameters():
        nn.init.zeros_(p)
    out = att(torch.randint(0, 2, (3, 10, 10)).float())
    assert out.shape == (3, 10, 10)
    assert torch.all(out == 0.5)


def test_soft_attention_constant_input_constant_output():
    torch.manual_seed(0)
    att = SoftAttention(8).double()
    nn.init.zeros_(att.conv1.bias)
    out = att(torch.zeros(1, 12, 12, dtype=torch.float64))
    assert torch.all(out == out[0, 0, 0])


def test_soft_attention_range():
    torch.manual_seed(3)
    att = SoftAttention(16).double()
    for p in att.parameters():
        nn.init.normal_(p, std=0.5)
    out = att(torch.randint(0, 2, (4, 16, 16)).double())
    assert out.min() > 0 and out.max() < 1


# -- scaled dot-product attention -------------------------------------------------


def test_attention_rows_sum_to_one():
    torch.manual_seed(0)
    q, k, v = (torch.randn(2, 8, 4, 5, dtype=torch.float64) for _ in range(3))
    out, w = scaled_dot_attention(q, k, v, return_weights=True)
    assert w.shape == (2, 20, 20)
    assert (w.sum(-1) - 1).abs().max() <= 1e-6
    assert out.shape == v.shape


def test_attention_single_position_returns_v():
    torch.manual_seed(0)
    q, k, v = (torch.randn(3, 6, 1, 1) for _ in range(3))
    assert torch.equal(scaled_dot_attention(q, k, v), v)


def test_attention_constant_keys_average_values():
    torch.manual_seed(0)
    q = torch.randn(1, 4, 3, 3, dtype=torch.float64)
    k = torch.randn(1, 4, 1, 1, dtype=torch.float64).expand(1, 4, 3, 3)
    v = torch.randn(1, 4, 3, 3, dtype=torch.float64)
    out = scaled_dot_attention(q, k, v)
    assert torch.allclose(out, v.mean((2, 3), keepdim=True).expand_as(v), atol=1e-12)


def test_attention_scaling_and_logit_shift():
    torch.manual_seed(1)
    q, k, v = (torch.randn(1, 4, 2, 3, dtype=torch.float64) for _ in range(3))
    qf, kf, vf = (t.flatten(2)[0].T for t in (q, k, v))
    ref = torch.softmax(qf @ kf.T / 2.0, -1) @ vf  # sqrt(C) = 2
    assert torch.allclose(scaled_dot_attention(q, k, v).flatten(2)[0].T, ref, atol=1e-12)
    # a bias shared by every key of a query is a per-row logit shift
    shifted = torch.softmax(qf @ kf.T / 2.0 + 3.7, -1) @ vf
    assert torch.allclose(shifted, ref, atol=1e-12)


def test_attention_shape_mismatch():
    with pytest.raises(ValueError):
        scaled_dot_attention(torch.zeros(1, 4, 2, 2), torch.zeros(1, 4, 3, 3), torch.zeros(1, 4, 3, 3))


# -- fusion --------------------------------------------------------------------------


def test_fusion_alpha_init_and_blend():
    torch.manual_seed(0)
    f = BidirectionalFusion(8).double()
    assert f.alpha.numel() == 1 and f.alpha.item() == pytest.approx(0.8)
    a, b = (torch.randn(2, 8, 3, 3, dtype=torch.float64) for _ in range(2))
    rgb_att, vi_att = f.attended(a, b)
    assert torch.allclose(f(a, b), 0.8 * rgb_att + 0.2 * vi_att, atol=1e-12)


def test_fusion_cross_definition():
    torch.manual_seed(0)
    f = BidirectionalFusion(4).double()
    a, b = (torch.randn(1, 4, 2, 2, dtype=torch.float64) for _ in range(2))
    rgb_att, vi_att = f.attended(a, b)
    assert torch.allclose(rgb_att, scaled_dot_attention(f.q_vi(b), f.k_rgb(a), f.v_rgb(a)))
    assert torch.allclose(vi_att, scaled_dot_attention(f.q_rgb(a), f.k_vi(b), f.v_vi(b)))


def test_fusion_alpha_zero_is_vi_branch():
    torch.manual_seed(0)
    f = BidirectionalFusion(8, alpha_init=0.0).double()
    a, b = (torch.randn(1, 8, 3, 3, dtype=torch.float64) for _ in range(2))
    assert torch.equal(f(a, b), f.attended(a, b)[1])


@pytest.mark.parametrize("mode", ["cross", "self"])
def test_identical_streams_shared_qkv_reduce_to_self_attention(mode):
    torch.manual_seed(0)
    f = BidirectionalFusion(8, mode=mode, alpha_init=1.0, share_qkv=True).double()
    x = torch.randn(2, 8, 4, 4, dtype=torch.float64)
    ref = scaled_dot_attention(f.q_rgb(x), f.k_rgb(x), f.v_rgb(x))
    assert (f(x, x) - ref).abs().max() <= 1e-6


def test_fusion_none_is_weighted_sum():
    f = BidirectionalFusion(4, mode="none", alpha_init=0.3).double()
    a, b = (torch.randn(1, 4, 2, 2, dtype=torch.float64) for _ in range(2))
    assert torch.allclose(f(a, b), 0.3 * a + 0.7 * b)


def test_fusion_shape_mismatch_and_bad_mode():
    f = BidirectionalFusion(4)
    with pytest.raises(ValueError):
        f(torch.zeros(1, 4, 2, 2), torch.zeros(1, 4, 3, 3))
    with pytest.raises(ValueError):
        BidirectionalFusion(4, mode="sideways")


# -- encoder / decoder ------------------------------------------------------------------


def test_window_partition_round_trip():
    x = torch.randn(2, 8, 8, 3)
    w = window_partition(x, 4)
    assert w.shape == (8, 16, 3)
    assert torch.equal(window_reverse(w, 4, 8, 8), x)


def test_relative_position_index_range():
    idx = relative_position_index(4)
    assert idx.shape == (16, 16)
    assert idx.min() == 0 and idx.max() == (2 * 4 - 1) ** 2 - 1
    assert torch.all(idx.diagonal() == idx[0, 0])


def test_shift_mask_blocks_cross_region_pairs():
    m = shift_mask(8, 8, 4, 2)
    assert m.shape == (4, 16, 16)
    assert torch.all(m[0] == 0)  # top-left window is one region
    assert (m[-1] < 0).any()


def test_swin_encoder_stage_shapes():
    enc = SwinEncoder(64, 3, 16, (2, 2, 2, 2), (1, 2, 4, 8), 4, 4)
    feats = enc(torch.randn(2, 3, 64, 64))
    assert [tuple(f.shape[1:]) for f in feats] == [(8, 64, 64), (16, 16, 16), (32, 8, 8), (64, 4, 4), (128, 2, 2)]
    assert enc.out_channels == [8, 16, 32, 64, 128]


def test_conv_encoder_matches_interface():
    enc = ConvEncoder(32, 3, 8, 3, 2)
    feats = enc(torch.randn(1, 3, 32, 32))
    assert [f.shape[1] for f in feats] == enc.out_channels
    assert feats[1].shape[-1] == 16 and feats[-1].shape[-1] == 4


def test_decoder_restores_resolution():
    enc = SwinEncoder(32, 3, 8, (1, 1), (1, 2), 4, 4)
    dec = UNetDecoder(enc.out_channels, 4)
    out = dec(enc(torch.randn(2, 3, 32, 32)))
    assert out.shape == (2, 4, 32, 32)


# -- ensemble --------------------------------------------------------------------------


def test_ensemble_endpoints(rng):
    logits = rng.normal(size=(5, 5, 4))
    p = rng.dirichlet(np.ones(4), (5, 5))
    sm = np.exp(logits - logits.max(-1, keepdims=True))
    sm /= sm.sum(-1, keepdims=True)
    assert np.allclose(ensemble(logits, p, [20.0, -20.0]), sm, atol=1e-12)
    shifted = (p + 1e-8) / (p + 1e-8).sum(-1, keepdims=True)
    assert np.allclose(ensemble(logits, p, [-20.0, 20.0]), shifted, atol=1e-12)


@pytest.mark.parametrize("w", [[0.5, 0.5], [3.0, -1.0], [-2.0, 0.1]])
def test_ensemble_fixed_point(rng, w):
    p = rng.dirichlet(np.ones(4), (4, 4))
    out = ensemble(np.log(p), p, w)
    assert np.allclose(out, p, atol=1e-7)
    assert np.allclose(out.sum(-1), 1.0)


def test_ensemble_mixing_weights():
    e = Ensemble((0.5, 0.5))
    assert torch.allclose(e.mixing_weights(), torch.tensor([0.5, 0.5]))
    e = Ensemble((1.0, -1.0))
    u = e.mixing_weights()
    assert u.sum().item() == pytest.approx(1.0) and (u > 0).all()


def test_arithmetic_ensemble(rng):
    logits = rng.normal(size=(3, 3, 4))
    p = rng.dirichlet(np.ones(4), (3, 3))
    sm = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    out = ensemble(logits, p, [0.0, 0.0], mode="arithmetic")
    assert np.allclose(out, 0.5 * sm + 0.5 * p)


# -- full model ------------------------------------------------------------------------


def test_toy_forward_shapes_and_normalization():
    cfg = ExperimentConfig(embed_dim=16)
    model = model_for(cfg, 64, torch.float32)
    assert model.encoder.out_channels[1:] == [16, 32, 64, 128]
    rgb, vi, crop, land, _, P = toy_inputs(2, 64, dtype=torch.float32)
    out = model(rgb, vi, crop, land, P)
    assert out.stream_logits.shape == out.projection_probs.shape == out.log_probs.shape == (2, 4, 64, 64)
    assert out.attention_map.shape == (2, 64, 64)
    probs = out.ensemble_probs
    assert probs.min() >= 0 and (probs.sum(1) - 1).abs().max() <= 1e-5
    assert out.attention_map.min() > 0 and out.attention_map.max() < 1


def test_fresh_model_fusion_alpha():
    assert model_for(ExperimentConfig(), 64, torch.float32).fusion.alpha.item() == pytest.approx(0.8)


def test_all_off_returns_softmax_of_stream():
    cfg = tiny(use_attention_module=False, use_projection_module=False, use_land_masked_dice=False,
               fusion_mode="none")
    model = model_for(cfg)
    rgb, vi, crop, land, _, P = toy_inputs()
    out = model(rgb, vi, crop, land, P)
    assert torch.allclose(out.ensemble_probs, out.stream_logits.softmax(1), atol=1e-12)
    assert torch.all(out.attention_map == 1)


def test_projection_branch_dominates_when_weighted():
    cfg = tiny(ensemble_init=(-20.0, 20.0))
    model = model_for(cfg)
    rgb, vi, crop, land, _, P = toy_inputs()
    out = model(rgb, vi, crop, land, P)
    assert torch.allclose(out.projection_probs, torch.einsum("bghw,gk->bkhw", crop, P))
    assert (out.ensemble_probs - out.projection_probs).abs().max() < 1e-6


def test_attention_applies_to_both_streams():
    model = model_for(tiny())
    rgb, vi, crop, land, _, P = toy_inputs()
    seen = []
    model.encoder.register_forward_hook(lambda m, inp, out: seen.append(inp[0].detach()))
    out = model(rgb, vi, crop, land, P)
    att = out.attention_map.detach().unsqueeze(1)
    assert torch.allclose(seen[0], torch.cat([rgb * att, vi * att]), atol=1e-12)


def test_pre_logits_attention_leaves_inputs_alone():
    model = model_for(tiny(attention_apply="pre_logits"))
    rgb, vi, crop, land, _, P = toy_inputs()
    seen = []
    model.encoder.register_forward_hook(lambda m, inp, out: seen.append(inp[0].detach()))
    model(rgb, vi, crop, land, P)
    assert torch.equal(seen[0], torch.cat([rgb, vi]))


def test_encoder_weights_are_shared():
    model = model_for(tiny())
    names = [n for n, _ in model.named_parameters() if n.startswith("encoder.")]
    assert not any("rgb" in n or "vi" in n for n in names)
    assert sum(isinstance(m, SwinEncoder) for m in model.modules()) == 1
    # perturbing one encoder weight moves the features of both streams
    rgb, vi, *_ = toy_inputs()
    before = model.encoder(torch.cat([rgb, vi]))[-1].detach()
    with torch.no_grad():
        w = model.encoder.stages[0][0].attn.qkv.weight
        w.add_(0.1 * torch.randn(w.shape, generator=torch.Generator().manual_seed(0), dtype=w.dtype))
    after = model.encoder(torch.cat([rgb, vi]))[-1].detach()
    assert (after[:2] - before[:2]).abs().max() > 0
    assert (after[2:] - before[2:]).abs().max() > 0


def test_fusion_none_alpha_one_ignores_vi():
    cfg = tiny(fusion_mode="none", alpha_fusion_init=1.0)
    model = model_for(cfg)
    rgb, vi, crop, land, _, P = toy_inputs()
    a = model(rgb, vi, crop, land, P).stream_logits
    b = model(rgb, torch.rand_like(vi), crop, land, P).stream_logits
    assert torch.equal(a, b)


def test_forward_is_deterministic():
    model = model_for(tiny()).eval()
    x = toy_inputs()
    P = x[-1]
    a = model(*x[:4], P).log_probs
    b = model(*x[:4], P).log_probs
    assert torch.equal(a, b)


def test_forward_dimension_errors():
    model = model_for(tiny())
    rgb, vi, crop, land, _, P = toy_inputs()
    with pytest.raises(ValueError):
        model(rgb, vi, crop[:, :20], land, P)
    with pytest.raises(ValueError):
        model(rgb, vi, crop, land, P[:, :3])


def test_forward_sample_outputs(rng):
    torch.manual_seed(0)
    model = KIIM(tiny(), 16)
    s = random_sample(rng, 16)
    P = np.full((21, 4), 0.25)
    out = forward_sample(model, s, P)
    assert out.ensemble_probs.shape == (16, 16, 4)
    assert out.attention_map.shape == (16, 16)
    assert np.allclose(out.ensemble_probs.sum(-1), 1.0, atol=1e-5)
    assert model.training


def test_conv_encoder_model_runs():
    model = model_for(tiny(encoder="conv"))
    rgb, vi, crop, land, _, P = toy_inputs()
    assert model(rgb, vi, crop, land, P).log_probs.shape == (2, 4, 8, 8)


# -- finite-difference gradient checks (float64, 8x8) ---------------------------------------


def _loss(model, inputs):
    rgb, vi, crop, land, label, P = inputs
    out = model(rgb, vi, crop, land, P)
    return torch_composite(out.log_probs, label, land, 0.5)[0]


def _fd_check(model, param, inputs, idx_list, h=1e-6, rtol=1e-3):
    model.zero_grad()
    _loss(model, inputs).backward()
    analytic = param.grad.detach().clone()
    for idx in idx_list:
        orig = param.data[idx].item()
        with torch.no_grad():
            param.data[idx] = orig + h
            up = _loss(model, inputs).item()
            param.data[idx] = orig - h
            down = _loss(model, inputs).item()
            param.data[idx] = orig
        fd = (up - down) / (2 * h)
        a = analytic[idx].item()
        assert abs(fd - a) <= rtol * max(abs(fd), abs(a), 1e-6), (idx, fd, a)


@pytest.mark.parametrize("encoder", ["swin", "conv"])
def test_gradcheck_fusion_alpha(encoder):
    model = model_for(tiny(encoder=encoder))
    _fd_check(model, model.fusion.alpha, toy_inputs(), [()])


def test_gradcheck_ensemble_weights():
    model = model_for(tiny())
    _fd_check(model, model.ensemble.w, toy_inputs(), [(0,), (1,)])


def test_gradcheck_attention_kernels():
    model = model_for(tiny())
    inputs = toy_inputs(seed=2)
    att = model.attention
    # the 0.02 init leaves gradients near round-off; use weights of order one
    g = torch.Generator().manual_seed(1)
    with torch.no_grad():
        for p in att.parameters():
            p.copy_(0.5 * torch.randn(p.shape, generator=g, dtype=p.dtype))
    _fd_check(model, att.conv2.weight, inputs, [(0, c, i, j) for c in range(4) for i in range(3) for j in range(3)])
    _fd_check(model, att.conv2.bias, inputs, [(0,)])
    _fd_check(model, att.conv1.weight, inputs, [(c, 0, i, j) for c in range(4) for i in range(3) for j in (0, 2)])
    _fd_check(model, att.conv1.bias, inputs, [(c,) for c in range(4)])
