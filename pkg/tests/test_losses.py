# test_losses.py
import math

import numpy as np
import pytest
import torch

from app.core.errors import ShapeMismatchError, VesselSegError
from app.core.losses import CE_DELTA, ce_loss, dice_loss, mask_tensors, sup_loss
from app.core.preprocess import SupervisionMask


def _labels(shape=(2, 4, 4, 4), seed=0):
    generator = torch.Generator().manual_seed(seed)
    return torch.randint(0, 5, shape, generator=generator)


def test_dice_examples():
    y = torch.tensor([1.0, 1.0, 0.0, 0.0])
    assert float(dice_loss(y.clone(), y)) == pytest.approx(0.0, abs=1e-12)
    assert float(dice_loss(torch.zeros(4), torch.zeros(4))) == pytest.approx(0.0, abs=1e-12)
    assert float(dice_loss(1.0 - y, y)) == pytest.approx(1.0, abs=1e-5)
    half = torch.tensor([1.0, 0.0, 0.0, 0.0])
    assert float(dice_loss(half, y)) == pytest.approx(1.0 - (2.0 + 1e-5) / (3.0 + 1e-5))


def test_cross_entropy_examples():
    y = torch.tensor([1.0, 0.0, 1.0, 0.0])
    assert float(ce_loss(torch.full((4,), 0.5), y)) == pytest.approx(math.log(2.0))
    clamped = ce_loss(torch.tensor([0.0]), torch.tensor([1.0]))
    assert float(clamped) == pytest.approx(-math.log(CE_DELTA), rel=1e-4)
    assert torch.isfinite(clamped)
    with pytest.raises(ShapeMismatchError):
        ce_loss(torch.zeros(3), torch.zeros(4))


def test_loss_gradients_match_finite_differences():
    p = torch.rand(4, 4, 4, dtype=torch.float64).mul(0.8).add(0.1).requires_grad_(True)
    y = torch.rand(4, 4, 4, dtype=torch.float64) > 0.5
    assert torch.autograd.gradcheck(lambda q: dice_loss(q, y), (p,), eps=1e-6, atol=1e-6, rtol=1e-3)
    assert torch.autograd.gradcheck(lambda q: ce_loss(q, y), (p,), eps=1e-6, atol=1e-6, rtol=1e-3)


def test_unsupervised_classes_do_not_touch_the_loss():
    """Masked classes change neither the value nor receive any gradient"""
    labels = _labels()
    supervised = torch.tensor([[True, True, False, False], [True, True, True, True]])
    base = torch.rand(2, 4, 4, 4, 4)

    p = base.clone().requires_grad_(True)
    report = sup_loss(p, labels, supervised)
    report.total.backward()

    changed = base.clone()
    changed[0, 2:] = torch.rand(2, 4, 4, 4)
    other = sup_loss(changed, labels, supervised)

    assert torch.equal(report.total.detach(), other.total)
    assert torch.count_nonzero(p.grad[0, 2:]) == 0
    assert torch.count_nonzero(p.grad[0, :2]) > 0
    assert report.masked_classes == set()
    assert set(report.per_class) == {1, 2, 3, 4}


def test_spatial_mask_limits_the_loss_domain():
    labels = _labels((1, 4, 4, 4))
    supervised = torch.ones(1, 4, dtype=torch.bool)
    spatial = torch.zeros(1, 4, 4, 4, dtype=torch.bool)
    spatial[:, :2] = True
    base = torch.rand(1, 4, 4, 4, 4)

    p = base.clone().requires_grad_(True)
    report = sup_loss(p, labels, supervised, spatial)
    report.total.backward()

    changed = base.clone()
    changed[:, :, 2:] = torch.rand(1, 4, 2, 4, 4)
    assert torch.equal(report.total.detach(), sup_loss(changed, labels, supervised, spatial).total)
    assert torch.count_nonzero(p.grad[:, :, 2:]) == 0


def test_empty_domains_and_missing_supervision():
    labels = _labels((1, 2, 2, 2))
    p = torch.rand(1, 4, 2, 2, 2, requires_grad=True)
    empty = torch.zeros(1, 2, 2, 2, dtype=torch.bool)
    report = sup_loss(p, labels, torch.ones(1, 4, dtype=torch.bool), empty)
    assert float(report.total) == 0.0
    report.total.backward()
    assert torch.count_nonzero(p.grad) == 0
    assert report.masked_classes == {1, 2, 3, 4}

    with pytest.raises(VesselSegError):
        sup_loss(p, labels, torch.zeros(1, 4, dtype=torch.bool))
    with pytest.raises(ShapeMismatchError):
        sup_loss(p, labels, torch.ones(1, 3, dtype=torch.bool))
    with pytest.raises(ShapeMismatchError):
        sup_loss(p, labels[:, :1], torch.ones(1, 4, dtype=torch.bool))


def test_loss_value_matches_the_formula():
    labels = torch.tensor([[[[1, 2], [0, 1]]]])
    p = torch.tensor([[[[[0.9, 0.2], [0.1, 0.6]]], [[[0.1, 0.7], [0.3, 0.2]]]]])
    report = sup_loss(p, labels, torch.ones(1, 2, dtype=torch.bool))

    expected = []
    for index in range(2):
        y = (labels[0] == index + 1).double().numpy()
        q = p[0, index].double().numpy()
        dice = 1 - (2 * (q * y).sum() + 1e-5) / (q.sum() + y.sum() + 1e-5)
        ce = -(y * np.log(q) + (1 - y) * np.log(1 - q)).mean()
        expected.append(0.5 * (dice + ce))
    assert float(report.total) == pytest.approx(np.mean(expected), rel=1e-5)
    assert report.as_record()['masked_classes'] == []


def test_mask_tensors_stack_supervision_masks():
    spatial = np.zeros((2, 2, 2), dtype=bool)
    spatial[0] = True
    masks = [SupervisionMask(frozenset({1, 2, 3, 4})), SupervisionMask(frozenset({3, 4}), spatial)]
    supervised, dense = mask_tensors(masks, 4, (2, 2, 2))
    assert supervised.tolist() == [[True, True, True, True], [False, False, True, True]]
    assert dense.shape == (2, 2, 2, 2)
    assert dense[0].all() and dense[1].sum() == 4

    supervised, dense = mask_tensors(masks[:1], 4, (2, 2, 2))
    assert dense is None
