import math

import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from lift.errors import NoStampedPosition, NonFinite
from lift.objectives import (Heads, LossWeights, focal_cls, focal_from_logits, focal_lm, hist_cls, hist_pool,
                             inverse_frequency_weights, last_stamped_position, prompt_ce, total_loss)


def zero_head(d, n):
    head = nn.Linear(d, n)
    nn.init.zeros_(head.weight)
    nn.init.zeros_(head.bias)
    return head


def test_uniform_logits_give_log_vocab():
    logits = torch.zeros(5, 8, dtype=torch.float64)
    ids = torch.tensor([1, 2, 3, 4, 5])
    mask = torch.ones(5, dtype=torch.bool)
    assert prompt_ce(logits, ids, mask).item() == pytest.approx(math.log(8), abs=1e-12)
    assert focal_lm(logits, ids, mask, 0.0).item() == pytest.approx(math.log(8), abs=1e-12)


def test_focal_value_at_p_06():
    # -(1 - 0.6)^2 * ln 0.6
    logits = torch.log(torch.tensor([[0.6, 0.4]], dtype=torch.float64))
    got = focal_from_logits(logits, torch.tensor([0]), 2.0).item()
    assert got == pytest.approx(0.0817, abs=1e-4)
    assert got == pytest.approx(0.16 * -math.log(0.6), abs=1e-12)


def test_zero_head_over_twelve_labels_gives_log_twelve():
    h = torch.randn(6, 4)
    mask = torch.tensor([0, 0, 0, 1, 1, 1], dtype=torch.bool)
    loss = focal_cls(h, mask, zero_head(4, 12), gold_label=5, gamma=0.0)
    assert loss.item() == pytest.approx(math.log(12), rel=1e-6)


def test_class_weight_scales_focal_cls():
    torch.manual_seed(0)
    h = torch.randn(4, 8)
    mask = torch.tensor([0, 0, 1, 1], dtype=torch.bool)
    head = nn.Linear(8, 3)
    plain = focal_cls(h, mask, head, 1, 2.0)
    weighted = focal_cls(h, mask, head, 1, 2.0, class_weights=torch.tensor([1.0, 2.0, 1.0]))
    assert weighted.item() == pytest.approx(2 * plain.item(), rel=1e-6)


def test_focal_cls_reads_last_stamped_position():
    h = torch.zeros(5, 2)
    h[3] = torch.tensor([10.0, 0.0])
    head = nn.Linear(2, 2, bias=False)
    with torch.no_grad():
        head.weight.copy_(torch.eye(2))
    mask = torch.tensor([0, 1, 1, 1, 0], dtype=torch.bool)
    assert last_stamped_position(mask) == 3
    assert focal_cls(h, mask, head, 0, 0.0).item() < 1e-3
    with pytest.raises(NoStampedPosition):
        last_stamped_position(torch.zeros(4, dtype=torch.bool))


def test_empty_history_gives_zero_hist_loss():
    h = torch.randn(5, 4, requires_grad=True)
    loss = hist_cls(h, torch.zeros(5, dtype=torch.bool), nn.Linear(4, 3), 1, 2.0)
    assert loss.item() == 0.0
    loss.backward()  # still part of the graph


def test_hist_pool_single_token_and_mean():
    h = torch.arange(12, dtype=torch.float64).view(4, 3)
    one = torch.tensor([0, 0, 1, 0], dtype=torch.bool)
    assert torch.equal(hist_pool(h, one), h[2])
    two = torch.tensor([1, 0, 0, 1], dtype=torch.bool)
    assert torch.allclose(hist_pool(h, two), (h[0] + h[3]) / 2)


def test_prompt_ce_reads_mask_at_target():
    # only target position 2 is supervised, so only logits row 1 matters
    logits = torch.zeros(4, 5)
    logits[1, 3] = 4.0
    ids = torch.tensor([0, 0, 3, 0])
    mask = torch.tensor([0, 0, 1, 0], dtype=torch.bool)
    expected = F.cross_entropy(logits[1:2], ids[2:3])
    assert prompt_ce(logits, ids, mask).item() == pytest.approx(expected.item(), abs=1e-7)


def test_prompt_ce_empty_mask_is_zero():
    assert prompt_ce(torch.randn(3, 4), torch.tensor([0, 1, 2]), torch.zeros(3, dtype=torch.bool)).item() == 0.0


def test_total_loss_rejects_non_finite_and_wrong_arity():
    w = LossWeights()
    with pytest.raises(NonFinite):
        total_loss([torch.tensor(1.0), torch.tensor(float("nan")), torch.tensor(0.0), torch.tensor(0.0)], w)
    with pytest.raises(ValueError):
        total_loss([torch.tensor(1.0)] * 3, w)


def test_loss_weights_validate():
    with pytest.raises(ValueError):
        LossWeights(ce=-1.0)
    assert LossWeights().as_tuple() == (1.0, 1.0, 0.5, 0.25)


def test_shared_heads_share_parameters():
    shared = Heads(8, 5, shared=True)
    assert shared.hist is shared.cls
    assert Heads(8, 5).hist is not Heads(8, 5).cls
    assert Heads(8, 5).n_labels == 5


def test_inverse_frequency_weights():
    w = inverse_frequency_weights([1, 1, 1, 2], 4)
    # N / (C * count): 4 / (2 * 3) and 4 / (2 * 1); absent classes keep 1
    assert w.tolist() == pytest.approx([1.0, 4 / 6, 2.0, 1.0])


finite = st.floats(-20, 20, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(finite, finite, finite, finite), min_size=1, max_size=1),
       st.lists(st.floats(0, 5), min_size=4, max_size=4))
def test_total_loss_is_linear_in_weights(terms, lams):
    vals = [torch.tensor(v, dtype=torch.float64) for v in terms[0]]
    w = LossWeights(*lams)
    expected = sum(l * v for l, v in zip(lams, terms[0]))
    assert total_loss(vals, w).item() == pytest.approx(expected, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 9), st.integers(0, 10_000), st.floats(0.0, 5.0))
def test_focal_bounded_by_ce(n, seed, gamma):
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(3, n, generator=g, dtype=torch.float64) * 3
    tgt = torch.randint(n, (3,), generator=g)
    ce = F.cross_entropy(logits, tgt, reduction="none")
    fl = focal_from_logits(logits, tgt, gamma)
    assert (fl >= 0).all()
    assert (fl <= ce + 1e-12).all()


def test_hist_loss_uses_history_mean():
    torch.manual_seed(1)
    h = torch.randn(6, 4, dtype=torch.float64)
    mask = np.array([0, 1, 1, 0, 0, 0], dtype=bool)
    head = nn.Linear(4, 3).double()
    pooled = h[1:3].mean(0)
    ref = F.cross_entropy(head(pooled).unsqueeze(0), torch.tensor([2]))
    assert hist_cls(h, mask, head, 2, 0.0).item() == pytest.approx(ref.item(), abs=1e-12)
