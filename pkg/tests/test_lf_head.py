import math

import numpy as np
import pytest
import torch

import oracles
from conftest import to_np
from plunext.errors import ConfigError, ContractError
from plunext.lf_head import DynamicLineExtractor, LFHead, dle_forward, lf_head_forward, lf_loss


def _np_state(m):
    return {k: to_np(v) for k, v in m.state_dict().items()}


def _dle(in_ch=3, n=5, seed=0):
    torch.manual_seed(seed)
    return DynamicLineExtractor(in_ch, n).double()


def _head(in_ch=3, lengths=(3, 5, 7), seed=0):
    torch.manual_seed(seed)
    return LFHead(in_ch, lengths).double()


def test_kernel_length_one_preserves_shape():
    m = _dle(4, 1)
    out = dle_forward(torch.randn(2, 4, 5, 6, dtype=torch.float64), m)
    assert out.shape == (2, 4, 5, 6)


def test_even_length_rejected():
    with pytest.raises(ConfigError):
        DynamicLineExtractor(4, 4)
    with pytest.raises(ConfigError):
        LFHead(4, (3, 7))


@pytest.mark.parametrize("training", [True, False])
def test_zero_input_gives_zero_output(training):
    m = _dle(3, 5).train(training)
    out = m(torch.zeros(2, 3, 6, 6, dtype=torch.float64))
    assert torch.all(out == 0)


def test_horizontal_line_branches_match_oracle_and_differ():
    m = _dle(1, 5, seed=1)
    x = np.zeros((1, 1, 9, 9))
    x[0, 0, 4, :] = 1.0
    feat = to_np(m.features(torch.from_numpy(x)))
    p = _np_state(m)
    _, expected = oracles.dle(x, p, 5)
    np.testing.assert_allclose(feat, expected, atol=1e-10)
    h, v = feat[:, :1], feat[:, 1:]
    assert np.abs(h[0, 0, 4] - v[0, 0, 4]).max() > 1e-3


@pytest.mark.parametrize("training", [True, False])
def test_dle_matches_oracle(rng, training):
    m = _dle(3, 5, seed=2)
    with torch.no_grad():
        m.norm.weight.uniform_(0.5, 1.5)
        m.norm.bias.normal_(0, 0.3)
        m.norm.running_mean.normal_(0, 0.3)
        m.norm.running_var.uniform_(0.5, 2.0)
    m.train(training)
    x = rng.normal(size=(2, 3, 6, 6))
    out = to_np(m(torch.from_numpy(x)))
    expected, _ = oracles.dle(x, _np_state(m), 5, train=training)
    np.testing.assert_allclose(out, expected, atol=1e-9)


def test_head_output_shape():
    torch.manual_seed(0)
    head = LFHead(64)
    assert lf_head_forward(torch.randn(2, 64, 16, 16), head).shape == (2, 2, 16, 16)


def test_zeroed_classifier_gives_even_odds():
    head = _head()
    with torch.no_grad():
        head.classifier.weight.zero_()
        head.classifier.bias.zero_()
    logits = head.logits(torch.randn(2, 3, 6, 6, dtype=torch.float64))
    assert torch.all(logits == 0)
    assert torch.all(torch.softmax(logits, 1) == 0.5)


@pytest.mark.parametrize("training", [True, False])
def test_head_matches_composition_oracle(rng, training):
    head = _head(seed=3).train(training)
    x = rng.normal(size=(2, 3, 6, 6))
    out = to_np(head.logits(torch.from_numpy(x)))
    expected = oracles.lf_logits(x, _np_state(head), (3, 5, 7), train=training)
    np.testing.assert_allclose(out, expected, atol=1e-9)


def test_eval_forward_is_bitwise_deterministic():
    torch.manual_seed(0)
    head = LFHead(8).eval()
    x = torch.randn(2, 8, 8, 8)
    assert torch.equal(head.logits(x), head.logits(x))


def test_permuting_extractors_with_fusion_blocks(rng):
    head = _head(seed=4).eval()
    x = torch.from_numpy(rng.normal(size=(2, 3, 6, 6)))
    ref = head.logits(x)
    perm = [2, 0, 1]
    c = 3
    with torch.no_grad():
        w = head.fuse.weight.clone()
        head.fuse.weight.copy_(torch.cat([w[:, i * c:(i + 1) * c] for i in perm], dim=1))
        head.dles = torch.nn.ModuleList([head.dles[i] for i in perm])
    assert float((head.logits(x) - ref).abs().max()) <= 1e-6


def test_transposition_swaps_branches(rng):
    m = _dle(2, 5, seed=5)
    x = torch.from_numpy(rng.normal(size=(2, 2, 7, 9)))
    feat = m.features(x)
    swapped = _dle(2, 5, seed=5)
    with torch.no_grad():
        swapped.dyn_h.experts.copy_(m.dyn_v.experts.transpose(-1, -2))
        swapped.dyn_v.experts.copy_(m.dyn_h.experts.transpose(-1, -2))
        swapped.dyn_h.gate.load_state_dict(m.dyn_v.gate.state_dict())
        swapped.dyn_v.gate.load_state_dict(m.dyn_h.gate.state_dict())
    feat_t = swapped.features(x.transpose(-1, -2))
    mid = feat.shape[1] // 2
    expected = torch.cat([feat[:, mid:], feat[:, :mid]], 1).transpose(-1, -2)
    assert float((feat_t - expected).abs().max()) <= 1e-6


def test_saturated_correct_logits_have_tiny_loss(rng):
    gt = torch.from_numpy((rng.random((2, 8, 8)) < 0.3).astype(np.int64))
    logits = 20.0 * (2 * torch.nn.functional.one_hot(gt, 2).permute(0, 3, 1, 2).double() - 1) / 2
    total, ce, dice = lf_loss(logits, gt)
    assert float(total) <= 1e-6


def test_uniform_logits_give_ln2(rng):
    gt = torch.from_numpy((rng.random((2, 4, 4)) < 0.5).astype(np.int64))
    total, ce, dice = lf_loss(torch.zeros(2, 2, 4, 4, dtype=torch.float64), gt)
    assert abs(float(ce) - math.log(2)) <= 1e-6


def test_lf_loss_fixed_instance_and_downsampling(rng):
    logits = rng.normal(size=(1, 2, 4, 4))
    gt = (rng.random((1, 16, 16)) < 0.05).astype(np.int64)
    total, ce, dice = lf_loss(torch.from_numpy(logits), torch.from_numpy(gt))
    target = oracles.block_max(gt[0], 4)[None]
    e_total, e_ce, e_dice = oracles.seg_loss(logits, target)
    assert abs(float(total) - e_total) <= 1e-10
    assert abs(float(ce) - e_ce) <= 1e-10
    assert abs(float(dice) - e_dice) <= 1e-10


def test_lf_loss_rejects_mismatch():
    with pytest.raises(ContractError):
        lf_loss(torch.zeros(1, 2, 4, 4), torch.zeros(1, 4, 6, dtype=torch.long))


def test_gradient_reaches_stage_features_across_seeds():
    nonzero = 0
    for seed in range(100):
        torch.manual_seed(seed)
        head = LFHead(4, (3, 5, 7))
        feats = torch.randn(2, 4, 8, 8, requires_grad=True)
        gt = (torch.rand(2, 16, 16) < 0.1).long()
        head(feats, gt)[0].backward()
        nonzero += bool(feats.grad.abs().sum() > 0)
    assert nonzero >= 99


def test_head_loss_gradient_matches_finite_differences():
    for seed in range(2):
        head = _head(2, (1, 3, 5), seed=seed)
        feats = torch.randn(1, 2, 4, 4, dtype=torch.float64, requires_grad=True)
        gt = (torch.rand(1, 4, 4) < 0.4).long()

        def f():
            return lf_loss(head.logits(feats), gt)[0]

        f().backward()
        num = oracles.central_fd(f, feats)
        assert oracles.rel_err(feats.grad, num) <= 1e-4
