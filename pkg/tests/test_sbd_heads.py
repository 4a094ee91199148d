import pytest
import torch
import torch.nn as nn

from sbcb.backbone import param_count
from sbcb.sbd_heads import (VARIANTS, AdaptiveWeightLearner, DDSSideBlock, FuseLayer, HeadConfig, SBDHead,
                            SideLayer, binary_side_layer, dff_fuse, fcn_aux_head, FCNHead, head_forward,
                            semantic_side_layer, sliced_concat)

RESNET101 = (64, 256, 512, 2048)


def side_params(c_in, c_out):
    return (c_in + 1) * c_out + 10 * c_out


def casenet_params(side_ch, n):
    *b, s = side_ch
    k = len(side_ch)
    return sum(side_params(c, 1) for c in b) + side_params(s, n) + n * (k + 1)


def test_binary_side_layer_shape_and_params():
    layer = binary_side_layer(64)
    assert param_count(layer) == 75
    assert layer(torch.randn(2, 64, 32, 32), (64, 64)).shape == (2, 1, 64, 64)


def test_constant_field_stays_constant():
    layer = binary_side_layer(8)
    x = torch.full((1, 8, 5, 7), 0.3)
    with torch.no_grad():
        y = layer(x, (20, 28))
        p = layer.project(x)[0, 0, 0, 0]
        expected = p * layer.refine.weight.sum() + layer.refine.bias[0]
    torch.testing.assert_close(y, torch.full_like(y, float(expected)), rtol=1e-6, atol=1e-6)


def test_semantic_side_layer():
    layer = semantic_side_layer(2048, 19)
    assert param_count(layer.project) == 19 * 2049 == 38931
    small = semantic_side_layer(16, 19)
    assert small(torch.randn(1, 16, 8, 8), (64, 64)).shape == (1, 19, 64, 64)
    assert semantic_side_layer(16, 1)(torch.randn(1, 16, 8, 8), (64, 64)).shape == \
        binary_side_layer(16)(torch.randn(1, 16, 8, 8), (64, 64)).shape


def test_side_layer_refuses_downsampling():
    with pytest.raises(ValueError):
        binary_side_layer(4)(torch.randn(1, 4, 16, 16), (8, 8))


def test_sliced_concat_layout():
    B, N, K, H, W = 2, 19, 4, 3, 5
    binary = [torch.randn(B, 1, H, W) for _ in range(K - 1)]
    sem = torch.randn(B, N, H, W)
    out = sliced_concat(binary, sem)
    assert out.shape == (B, K * N, H, W)
    for c in range(N):
        for k in range(K - 1):
            assert torch.equal(out[:, c * K + k], binary[k][:, 0])
        assert torch.equal(out[:, c * K + K - 1], sem[:, c])
    assert sliced_concat([torch.randn(1, 1, 2, 2)], torch.randn(1, 1, 2, 2)).shape[1] == 2


def test_sliced_concat_shape_mismatch():
    with pytest.raises(ValueError):
        sliced_concat([torch.randn(1, 1, 4, 4)], torch.randn(1, 3, 5, 4))


def test_sliced_concat_permutation():
    binary = [torch.randn(1, 1, 4, 4) for _ in range(3)]
    sem = torch.randn(1, 6, 4, 4)
    perm = torch.randperm(6)
    a = sliced_concat(binary, sem).view(1, 6, 4, 4, 4)[:, perm]
    b = sliced_concat(binary, sem[:, perm]).view(1, 6, 4, 4, 4)
    assert torch.equal(a, b)


def test_fuse_layer_params_and_identity():
    fuse = FuseLayer(19, 4)
    assert param_count(fuse) == 95
    with torch.no_grad():
        fuse.conv.weight.zero_()
        fuse.conv.weight[:, 3] = 1.0
    sem = torch.randn(1, 19, 6, 6)
    out = fuse(sliced_concat([torch.randn(1, 1, 6, 6) for _ in range(3)], sem))
    torch.testing.assert_close(out, sem)


def test_fuse_layer_divisibility():
    with pytest.raises(ValueError):
        FuseLayer(3, 2)(torch.randn(1, 7, 2, 2))


def test_fuse_permutation_equivariance():
    torch.manual_seed(0)
    fuse = FuseLayer(5, 3)
    with torch.no_grad():  # category-independent weights
        fuse.conv.weight.copy_(torch.randn(1, 3, 1, 1).repeat(5, 1, 1, 1))
        fuse.conv.bias.fill_(0.2)
    binary = [torch.randn(1, 1, 4, 4) for _ in range(2)]
    sem = torch.randn(1, 5, 4, 4)
    perm = torch.randperm(5)
    torch.testing.assert_close(fuse(sliced_concat(binary, sem))[:, perm], fuse(sliced_concat(binary, sem[:, perm])))


def test_dff_closed_forms():
    sliced = torch.randn(2, 12, 5, 5)
    w = torch.full_like(sliced, 1 / 4)
    torch.testing.assert_close(dff_fuse(sliced, w, 3), sliced.view(2, 3, 4, 5, 5).mean(2))
    assert torch.equal(dff_fuse(sliced, torch.zeros_like(sliced), 3), torch.zeros(2, 3, 5, 5))
    learner = AdaptiveWeightLearner(3, 4, hidden=8)
    assert learner(sliced).shape == sliced.shape
    with pytest.raises(ValueError):
        dff_fuse(sliced, torch.zeros(2, 11, 5, 5), 3)


def test_dff_permutation_equivariance_with_shared_weights():
    binary = [torch.randn(1, 1, 4, 4) for _ in range(2)]
    sem = torch.randn(1, 5, 4, 4)
    perm = torch.randperm(5)
    w = torch.randn(1, 1, 3, 4, 4).expand(1, 5, 3, 4, 4).reshape(1, 15, 4, 4)
    a = dff_fuse(sliced_concat(binary, sem), w, 5)[:, perm]
    b = dff_fuse(sliced_concat(binary, sem[:, perm]), w, 5)
    torch.testing.assert_close(a, b)


def test_dds_block_identity_and_params():
    blk = DDSSideBlock(8, 1, zero_init_last=True).eval()
    x = torch.rand(1, 8, 6, 6)  # post-ReLU features are non-negative
    assert torch.equal(blk.blocks(x), x)
    resblock = 2 * (2 * 8 * 8 * 9 + 2 * 2 * 8)
    assert param_count(blk) == resblock + side_params(8, 1)


def test_dds_param_growth_over_casenet():
    ch = (8, 16, 32, 64, 64)
    casenet = SBDHead(HeadConfig("casenet", 5, ch))
    dds = SBDHead(HeadConfig("dds", 5, ch))
    extra = sum(2 * (2 * c * c * 9 + 4 * c) for c in ch)
    assert param_count(casenet) == casenet_params(ch, 5)
    assert param_count(dds) == param_count(casenet) + extra


def test_param_accounting_resnet101():
    casenet = SBDHead(HeadConfig("casenet", 19, RESNET101))
    bbcb = SBDHead(HeadConfig("bbcb", 19, RESNET101))
    assert param_count(casenet) == casenet_params(RESNET101, 19) == 40081
    assert 40_000 <= param_count(casenet) <= 60_000
    assert param_count(bbcb) == casenet_params(RESNET101, 1) == 2929
    assert param_count(bbcb) <= 20_000


def _sides(ch, size=32):
    return [torch.randn(2, c, size // 2 ** i, size // 2 ** i) for i, c in enumerate(ch)]


def test_head_forward_casenet():
    ch = (8, 16, 32, 64)
    out = head_forward(_sides(ch), HeadConfig("casenet", 19, ch), size=(32, 32))
    assert len(out.sbd) == 2 and all(m.shape == (2, 19, 32, 32) for m in out.sbd)
    assert out.binary_side_logits == []


def test_head_forward_dds_five_sides():
    ch = (8, 16, 32, 64, 64)
    out = head_forward(_sides(ch), HeadConfig("dds", 5, ch), size=(32, 32))
    assert len(out.binary_side_logits) == 4
    assert all(b.shape == (2, 1, 32, 32) for b in out.binary_side_logits)


def test_head_forward_bbcb_single_channel():
    ch = (8, 16, 32, 64)
    out = head_forward(_sides(ch), HeadConfig("bbcb", 19, ch), size=(32, 32))
    assert out.fuse_logits.shape[1] == 1 and out.semantic_side_logits.shape[1] == 1


@pytest.mark.parametrize("variant", VARIANTS)
def test_all_variants_run(variant):
    ch = (4, 8, 8)
    out = head_forward(_sides(ch, 16), HeadConfig(variant, 3, ch))
    assert out.fuse_logits.shape[-2:] == (16, 16)


def test_head_config_errors():
    with pytest.raises(ValueError):
        HeadConfig("hed", 3)
    with pytest.raises(ValueError):
        HeadConfig("casenet", 0)
    with pytest.raises(ValueError):
        HeadConfig("casenet", 3, (8,))
    with pytest.raises(ValueError):
        head_forward(_sides((4, 8)), HeadConfig("casenet", 3, (4, 8, 8)))


def test_fcn_aux_head_params():
    assert param_count(fcn_aux_head(1024, 19, 256)) == 1024 * 256 * 9 + 2 * 256 + 256 * 19 + 19 == 2_364_691
    head = FCNHead(32, 5, 16)
    assert param_count(head) == 32 * 16 * 9 + 2 * 16 + 16 * 5 + 5
    assert head(torch.randn(1, 32, 4, 4), (16, 16)).shape == (1, 5, 16, 16)
