import numpy as np
import pytest
import torch

from conftest import TINY_LM
from lift.model import build_model, load_checkpoint, save_checkpoint
from lift.objectives import LossWeights
from lift.toylm import ToyLM, ToyLMConfig


def test_wrapped_model_matches_backbone_at_init(tiny_model, lrs_encoded, tokenizer):
    tiny_model.eval()
    ref = ToyLM(ToyLMConfig(vocab_size=tokenizer.vocab_size, seed=3, **TINY_LM)).eval()
    enc = lrs_encoded[4]
    with torch.no_grad():
        got = tiny_model(enc).logits
        plain = ref(torch.as_tensor(enc.input_ids)).logits
    assert (got - plain).abs().max().item() <= 1e-6


def test_conditioning_toggle(tiny_model, lrs_encoded):
    tiny_model.eval()
    enc = lrs_encoded[4]
    with torch.no_grad():
        on = tiny_model(enc).logits
        tiny_model.use_conditioning = False
        off = tiny_model(enc).logits
        tiny_model.use_conditioning = True
        tiny_model.conditioning.out.weight.normal_(std=0.1)
        moved = tiny_model(enc).logits
        with tiny_model.as_base():
            base = tiny_model(enc).logits
    assert torch.equal(on, off)
    assert not torch.allclose(moved, on)
    assert torch.equal(base, off)
    assert tiny_model.use_conditioning


def test_history_mask_cuts_history_reads(tokenizer, labelspace, lrs_encoded):
    enc = next(e for e in lrs_encoded if e.hist_mask.sum() > 10)
    m = build_model(tokenizer.vocab_size, len(labelspace), seed=1, lm_kwargs=TINY_LM, mask_history=True).eval()
    out = m(enc, capture_attention=True)
    hist = torch.as_tensor(enc.hist_mask)
    for a in out.attentions:
        assert (a[:, ~hist][:, :, hist] == 0).all()


def test_loss_breakdown_and_flags(tiny_model, lrs_encoded):
    first = next(e for e in lrs_encoded if not e.hist_mask.any())
    lb = tiny_model.loss(first, LossWeights())
    assert lb.hist_cls.item() == 0.0 and lb.flags["hist_skipped"] == 1
    s = lb.scalars()
    assert s["total"] == pytest.approx(s["ce"] + s["focal_lm"] + 0.5 * s["focal_cls"] + 0.25 * s["hist_cls"], rel=1e-5)


def test_trainable_parameters_exclude_backbone(tiny_model):
    names = [n for n, _ in tiny_model.trainable_named_parameters()]
    assert all(".lora_" in n or not n.startswith("base.") for n in names)
    assert any(n.startswith("conditioning.") for n in names) and any(n.startswith("heads.") for n in names)


def test_checkpoint_round_trip(tmp_path, tiny_model, lrs_encoded):
    tiny_model.eval()
    with torch.no_grad():
        tiny_model.conditioning.out.weight.normal_(std=0.1)
    tiny_model.grow_rank(8)
    digest = save_checkpoint(tiny_model, tmp_path / "c.pt", {"stage": 1})
    back, meta = load_checkpoint(tmp_path / "c.pt")
    back.eval()
    assert meta["state_hash"] == digest and back.rank == 8
    assert back.params_hash() == tiny_model.params_hash()
    with torch.no_grad():
        assert torch.equal(back(lrs_encoded[2]).logits, tiny_model(lrs_encoded[2]).logits)


def test_isolated_gradients(tokenizer, labelspace, lrs_encoded, monkeypatch):
    import lift.model as lift_model
    seen = {}
    real = lift_model.inject

    def spy(x, feats, params):
        seen["x"] = y = real(x, feats, params)
        if y.requires_grad:
            y.retain_grad()
        return y

    monkeypatch.setattr(lift_model, "inject", spy)
    enc = next(e for e in lrs_encoded if e.hist_mask.sum() > 10)
    hist, out = torch.as_tensor(enc.hist_mask), torch.as_tensor(enc.output_mask)

    def grads(model, w):
        model.zero_grad()
        model.loss(enc, w).total.backward()
        return seen["x"].grad.abs().sum(1)

    plain = build_model(tokenizer.vocab_size, len(labelspace), seed=2, lm_kwargs=TINY_LM)
    iso = build_model(tokenizer.vocab_size, len(labelspace), seed=2, lm_kwargs=TINY_LM, isolate_gradients=True)
    ce, lm = LossWeights(1, 0, 0, 0), LossWeights(0, 1, 0, 0)
    # attention carries prompt gradients back into history rows unless they are cut
    assert grads(plain, ce)[hist].sum() > 0 and grads(plain, lm)[~out].sum() > 0
    g = grads(iso, ce)
    assert (g[hist] == 0).all() and g[~hist].sum() > 0
    g = grads(iso, lm)
    assert (g[~out] == 0).all() and g[out].sum() > 0
    full = grads(iso, LossWeights())
    assert full[hist].sum() > 0
    with torch.no_grad():
        a, b = plain.loss(enc, LossWeights()).scalars(), iso.loss(enc, LossWeights()).scalars()
    assert a == b
