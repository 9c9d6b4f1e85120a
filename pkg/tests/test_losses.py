import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from stssl.losses import (LossWeights, bce_dice_loss, coherence_loss, coherence_mask, gradient_mask,
                          gradient_smoothness_loss, jsd, jsd_consistency, l2_consistency,
                          margin_loss, normalize_mask, recombine, total_loss, variance_mask)

f64 = torch.float64


def seq(values):
    return torch.tensor(values, dtype=f64)[:, None, None]


def test_margin_loss_examples():
    assert margin_loss(torch.tensor([0.95, 0.05]), [0]).item() == pytest.approx(0.0, abs=1e-12)
    # positive: (0.9-0.5)^2 = 0.16; negative: 0.5 * (0.6-0.1)^2 = 0.125
    got = margin_loss(torch.tensor([[0.5, 0.6]], dtype=f64), torch.tensor([0])).item()
    assert got == pytest.approx(0.285, abs=1e-12)
    with pytest.raises(ValueError, match="out of range"):
        margin_loss(torch.tensor([[0.5, 0.6]]), torch.tensor([2]))


def test_bce_dice_examples():
    gt = torch.zeros(2, 4, 4, dtype=f64)
    gt[:, 1:3, 1:3] = 1.0
    perfect = bce_dice_loss(gt.clone(), gt).item()
    assert perfect == pytest.approx(0.0, abs=1e-6)
    half = torch.full_like(gt, 0.5)
    p = 0.5
    bce = -math.log(p)
    inter, total = 0.5 * 8, 0.5 * 32 + 8
    dice = 1 - (2 * inter + 1e-6) / (total + 1e-6)
    assert bce_dice_loss(half, gt).item() == pytest.approx(bce + dice, rel=1e-12)


def test_bce_dice_empty_ground_truth_is_finite():
    pred = torch.full((2, 3, 3), 0.2, dtype=f64)
    value = bce_dice_loss(pred, torch.zeros_like(pred))
    assert torch.isfinite(value)


def test_jsd_properties():
    p = torch.tensor([0.2, 0.8], dtype=f64)
    q = torch.tensor([0.6, 0.4], dtype=f64)
    assert jsd(p, p).item() == 0.0
    assert jsd(p, q).item() == jsd(q, p).item()
    disjoint = jsd(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0])).item()
    assert disjoint == pytest.approx(math.log(2), abs=1e-7)


def test_jsd_consistency_softmax():
    a = torch.tensor([[1.0, 2.0, 3.0]], dtype=f64)
    assert jsd_consistency(a, a).item() == 0.0
    # softmax is shift invariant, so shifted features agree
    assert jsd_consistency(a, a + 5).item() == pytest.approx(0.0, abs=1e-15)
    b = torch.tensor([[3.0, 2.0, 1.0]], dtype=f64)
    expected = jsd(torch.softmax(a, -1), torch.softmax(b, -1)).item()
    assert jsd_consistency(a, b).item() == pytest.approx(expected, rel=1e-12)
    with pytest.raises(ValueError, match="non-finite"):
        jsd_consistency(a, torch.tensor([[float("nan"), 0.0, 0.0]]))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 12))
def test_jsd_bounded(seed, k):
    g = torch.Generator().manual_seed(seed)
    a, b = torch.randn(4, k, generator=g, dtype=f64) * 5, torch.randn(4, k, generator=g, dtype=f64) * 5
    v = jsd_consistency(a, b).item()
    assert 0.0 <= v <= math.log(2) + 1e-12


def test_l2_consistency_masked_mean():
    a = torch.zeros(1, 2, 2, dtype=f64)
    b = torch.tensor([[[1.0, 2.0], [3.0, 0.0]]], dtype=f64)
    valid = torch.tensor([[[True, True], [False, True]]])
    assert l2_consistency(a, b, valid).item() == pytest.approx(5.0 / 3.0)
    with pytest.raises(ValueError, match="valid pixel"):
        l2_consistency(a, b, torch.zeros_like(valid))
    with pytest.raises(ValueError, match="shape"):
        l2_consistency(a, b[:, :1], valid)


def test_coherence_loss_endpoints_and_monotone():
    g = torch.Generator().manual_seed(0)
    a, b = torch.rand(2, 5, 4, 4, generator=g, dtype=f64), torch.rand(2, 5, 4, 4, generator=g, dtype=f64)
    valid = torch.ones(2, 5, 4, 4, dtype=torch.bool)
    mask = torch.rand(2, 5, 4, 4, generator=g, dtype=f64)
    plain = l2_consistency(a, b, valid).item()
    assert coherence_loss(a, b, valid, mask, 0.0).item() == pytest.approx(plain, abs=1e-12)
    values = [coherence_loss(a, b, valid, mask, w).item() for w in np.linspace(0, 1, 11)]
    diffs = np.diff(values)
    assert (diffs <= 1e-15).all() or (diffs >= -1e-15).all()
    with pytest.raises(ValueError):
        coherence_loss(a, b, valid, mask, 1.5)


def test_variance_mask_worked_example():
    v = variance_mask(seq([0.0, 1.0, 0.0]), 1, 1, cyclic=True, normalize=False)
    assert v[1, 0, 0].item() == pytest.approx(2 / 9, abs=1e-15)


def test_variance_mask_clamps_edges():
    s = seq([0.0, 1.0, 2.0, 3.0, 4.0])
    v = variance_mask(s, 2, 2, cyclic=False, normalize=False)
    window = torch.tensor([0.0, 0.0, 0.0, 1.0, 2.0], dtype=f64)
    assert v[0, 0, 0].item() == pytest.approx(window.var(unbiased=False).item(), abs=1e-15)
    with pytest.raises(ValueError, match="shorter"):
        variance_mask(seq([0.0, 1.0]), 2, 2, cyclic=False)


def test_gradient_mask_worked_example():
    m = gradient_mask(seq([0.0, 0.0, 1.0, 0.0, 0.0]), normalize=False)
    assert m[2, 0, 0].item() == 0.5
    # the two frames at each end copy the nearest interior value
    assert m[:, 0, 0].tolist() == [0.5, 0.5, 0.5, 0.5, 0.5]
    with pytest.raises(ValueError, match="5 frames"):
        gradient_mask(seq([0.0, 1.0, 0.0, 1.0]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3))
def test_masks_shift_invariant(seed, shift):
    g = torch.Generator().manual_seed(seed)
    s = torch.rand(7, 3, 3, generator=g, dtype=f64)
    for fn in (lambda x: variance_mask(x, 2, 2, normalize=False),
               lambda x: gradient_mask(x, normalize=False)):
        torch.testing.assert_close(fn(s + shift), fn(s), rtol=0, atol=1e-12)


def test_masks_zero_on_constant_sequence():
    s = torch.full((6, 2, 2), 0.3, dtype=f64)
    assert variance_mask(s, normalize=False).abs().max() == 0
    assert gradient_mask(s, normalize=False).abs().max() == 0


def test_normalize_mask_range():
    m = torch.rand(3, 4, 5, 5, dtype=f64) * 7
    n = normalize_mask(m)
    for i in range(3):
        assert n[i].min().item() == 0.0 and n[i].max().item() == pytest.approx(1.0, abs=1e-7)


def test_masks_carry_no_gradient():
    loc = torch.rand(2, 6, 4, 4, dtype=f64, requires_grad=True)
    inv = torch.rand(2, 6, 4, 4, dtype=f64, requires_grad=True)
    for m in (coherence_mask(loc, inv), gradient_mask(loc), variance_mask(loc)):
        assert not m.requires_grad


def test_gradient_smoothness_loss_weights_pixels():
    a = torch.zeros(1, 5, 1, 2, dtype=f64)
    b = torch.ones(1, 5, 1, 2, dtype=f64)
    mask = torch.zeros(1, 5, 1, 2, dtype=f64)
    mask[..., 0] = 1.0
    valid = torch.ones(1, 5, 1, 2, dtype=torch.bool)
    assert gradient_smoothness_loss(a, b, valid, mask).item() == pytest.approx(0.5)


def test_total_loss_arithmetic():
    w = LossWeights(0.1, 0.3, 0.7)
    total, parts = total_loss(torch.tensor(2.0, dtype=f64), torch.tensor(3.0, dtype=f64),
                              torch.tensor(1.0, dtype=f64), torch.tensor(2.0, dtype=f64), w, "semi-var")
    assert total.item() == pytest.approx(5.17, abs=1e-12)
    assert recombine(parts, 0.3, 0.7) == pytest.approx(parts["total"], abs=1e-12)
    assert set(parts) == {"L_sup_cls", "L_sup_loc", "L_cc", "L_lc", "w", "lambda", "total"}


def test_total_loss_modes():
    one, two = torch.tensor(1.0, dtype=f64), torch.tensor(2.0, dtype=f64)
    w = LossWeights(1.0, 1.0, 1.0)
    assert total_loss(one, one, one, two, w, "supervised")[0].item() == 2.0
    assert total_loss(one, one, one, two, w, "semi-cc")[0].item() == 3.0
    for mode in ("semi-lc", "semi-var", "semi-grad", "semi-both"):
        assert total_loss(one, one, one, two, w, mode)[0].item() == 5.0
    with pytest.raises(ValueError, match="mode"):
        total_loss(one, one, one, two, w, "semi")


def test_total_loss_lambda_zero_is_supervised():
    sup = torch.tensor(0.123456789, dtype=f64)
    total, _ = total_loss(sup, sup, torch.tensor(9.0, dtype=f64), torch.tensor(7.0, dtype=f64),
                          LossWeights(0.0, 0.3, 0.7), "semi-both")
    assert total.item() == 2 * sup.item()


def test_negative_weights_rejected():
    with pytest.raises(ValueError, match="non-negative"):
        LossWeights(lambda_total=-0.1)
    w = LossWeights()
    w.lambda_cls = -1.0
    one = torch.tensor(1.0)
    with pytest.raises(ValueError, match="non-negative"):
        total_loss(one, one, one, one, w, "semi-lc")


def test_coherence_loss_worked_example():
    a = torch.ones(1, 1, 2, 2, dtype=f64)
    b = torch.zeros(1, 1, 2, 2, dtype=f64)
    mask = torch.tensor([[[[1.0, 0.0], [0.0, 0.0]]]], dtype=f64)
    valid = torch.ones(1, 1, 2, 2, dtype=torch.bool)
    assert coherence_loss(a, b, valid, mask, 0.5).item() == pytest.approx(0.625, abs=1e-15)
    assert coherence_loss(a, b, valid, torch.ones_like(mask), 1.0).item() == \
        l2_consistency(a, b, valid).item()
