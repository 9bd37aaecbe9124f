"""Base LM + conditioning + adapters + label heads, and their checkpoints."""
from __future__ import annotations

import contextlib
import hashlib
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import adapters as ad
from .conditioning import ConditioningConfig, ConditioningModule, TemporalFeatures, inject, temporal_features
from .objectives import (Heads, LossBreakdown, LossWeights, focal_cls, focal_lm, hist_cls, prompt_ce,
                         total_loss)
from .toylm import LMOutput, ToyLM, ToyLMConfig


def tensor_hash(tensors) -> str:
    h = hashlib.sha256()
    for name, t in tensors:
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


class LiftModel(nn.Module):
    """A frozen causal LM wrapped with trainable adapters and heads.

    ``mask_history`` blocks attention from non-history tokens to history
    tokens; it is the history-ablation switch. ``isolate_gradients`` makes each
    loss term reach the injected embeddings only at the positions it
    supervises (see :meth:`routed_forward`).
    """

    def __init__(self, base: ToyLM, n_labels: int, *, rank: int = 4, dropout: float = 0.05,
                 cond: ConditioningConfig | None = None, shared_heads: bool = False, seed: int = 0,
                 use_conditioning: bool = True, mask_history: bool = False, isolate_gradients: bool = False):
        super().__init__()
        self.base = base
        ad.attach(base, ad.AdapterConfig(rank=rank, dropout=dropout, seed=seed + 1))
        self.cond_cfg = cond or ConditioningConfig(d_model=base.d_model, n_labels=n_labels,
                                                   p_max=base.cfg.max_positions)
        self.conditioning = ConditioningModule(self.cond_cfg, seed=seed + 2)
        self.heads = Heads(base.d_model, n_labels, shared=shared_heads, seed=seed + 3)
        self.n_labels = n_labels
        self.shared_heads = shared_heads
        self.use_conditioning = use_conditioning
        self.mask_history = mask_history
        self.isolate_gradients = isolate_gradients
        self.seed = seed

    # -- parameters -------------------------------------------------------
    def trainable_named_parameters(self):
        for n, p in self.named_parameters():
            if n.startswith("base.") and ".lora_" not in n:
                continue
            yield n, p

    def trainable_parameters(self):
        return [p for _, p in self.trainable_named_parameters()]

    def base_hash(self) -> str:
        return tensor_hash((n, p) for n, p in self.base.named_parameters() if ".lora_" not in n)

    def params_hash(self) -> str:
        return tensor_hash(self.named_parameters())

    @property
    def rank(self) -> int:
        return ad.adapter_rank(self.base)

    def grow_rank(self, r_new: int, seed: int | None = None) -> None:
        ad.grow_rank(self.base, self.rank, r_new, seed=self.seed + 100 + r_new if seed is None else seed)

    def after_step(self) -> None:
        ad.restore_frozen(self.base)

    @contextlib.contextmanager
    def as_base(self):
        """Temporarily disable adapters and conditioning (the untuned backbone)."""
        prev = self.use_conditioning
        ad.set_adapters_enabled(self.base, False)
        self.use_conditioning = False
        try:
            yield self
        finally:
            ad.set_adapters_enabled(self.base, True)
            self.use_conditioning = prev

    # -- forward ----------------------------------------------------------
    def features(self, enc) -> TemporalFeatures:
        return temporal_features(enc, self.cond_cfg)

    def run(self, input_ids, feats: TemporalFeatures | None = None, hist_mask=None, *, capture_hidden=False,
            capture_attention=False, patch=None) -> LMOutput:
        ids = torch.as_tensor(input_ids, dtype=torch.long)
        hook = None
        if self.use_conditioning and feats is not None:
            hook = lambda x: inject(x, feats, self.conditioning)  # noqa: E731
        return self.base(ids, inject_hook=hook, capture_hidden=capture_hidden,
                         capture_attention=capture_attention, patch=patch, attn_block=self._history_block(hist_mask))

    def _history_block(self, hist_mask):
        if not self.mask_history or hist_mask is None:
            return None
        hm = torch.as_tensor(np.asarray(hist_mask), dtype=torch.bool)
        return (~hm).unsqueeze(1) & hm.unsqueeze(0)

    def forward(self, enc, **kw) -> LMOutput:
        return self.run(enc.input_ids, self.features(enc), enc.hist_mask, **kw)

    def routed_forward(self, enc) -> LMOutput:
        """Forward three copies of the sequence that differ only in where gradients reach the embeddings.

        Row 0 (prompt CE) detaches history rows, row 1 (output loss) detaches
        every non-output row, row 2 (both classifier terms) detaches nothing.
        Each loss term therefore trains the injected embedding only at
        positions it supervises. Off by default: cut off from prompt positions,
        the output loss rarely learns history-dependent labels on the toy LM.
        """
        feats = self.features(enc)
        hist = torch.as_tensor(np.asarray(enc.hist_mask), dtype=torch.bool).unsqueeze(1)
        outm = torch.as_tensor(np.asarray(enc.output_mask), dtype=torch.bool).unsqueeze(1)

        def hook(x):
            x = inject(x, feats, self.conditioning)
            frozen = x.detach()
            return torch.stack([torch.where(hist, frozen, x), torch.where(outm, x, frozen), x])

        ids = torch.as_tensor(enc.input_ids, dtype=torch.long)
        return self.base(ids, inject_hook=hook, attn_block=self._history_block(enc.hist_mask))

    def loss(self, enc, weights: LossWeights, class_weights: torch.Tensor | None = None,
             out: LMOutput | None = None) -> LossBreakdown:
        if out is None and self.isolate_gradients and self.use_conditioning and torch.is_grad_enabled():
            routed = self.routed_forward(enc)
            lg_ce, lg_out, hidden = routed.logits[0], routed.logits[1], routed.final_hidden[2]
        else:
            out = out if out is not None else self(enc)
            lg_ce = lg_out = out.logits
            hidden = out.final_hidden
        ids = torch.as_tensor(enc.input_ids, dtype=torch.long)
        g = weights.gamma
        l_ce = prompt_ce(lg_ce, ids, enc.prompt_ce_mask)
        l_lm = focal_lm(lg_out, ids, enc.output_mask, g)
        l_cls = focal_cls(hidden, enc.output_mask, self.heads.cls, enc.global_label_id, g, class_weights)
        l_hist = hist_cls(hidden, enc.hist_mask, self.heads.hist, enc.global_label_id, g, class_weights)
        total = total_loss((l_ce, l_lm, l_cls, l_hist), weights)
        flags = {
            "no_prompt_supervision": int(not np.asarray(enc.prompt_ce_mask)[1:].any()),
            "hist_skipped": int(not np.asarray(enc.hist_mask).any()),
        }
        return LossBreakdown(total, l_ce, l_lm, l_cls, l_hist, flags)

    # -- state ------------------------------------------------------------
    def trainable_state(self) -> dict:
        return {
            "adapters": ad.adapter_state(self.base),
            "conditioning": {k: v.detach().clone() for k, v in self.conditioning.state_dict().items()},
            "heads": {k: v.detach().clone() for k, v in self.heads.state_dict().items()},
        }

    def load_trainable_state(self, state: dict) -> None:
        ad.load_adapter_state(self.base, state["adapters"])
        self.conditioning.load_state_dict(state["conditioning"])
        self.heads.load_state_dict(state["heads"])

    def config_dict(self) -> dict:
        return {
            "base": asdict(self.base.cfg),
            "conditioning": asdict(self.cond_cfg),
            "n_labels": self.n_labels,
            "shared_heads": self.shared_heads,
            "use_conditioning": self.use_conditioning,
            "mask_history": self.mask_history,
            "isolate_gradients": self.isolate_gradients,
            "seed": self.seed,
        }

    def base_state(self) -> dict:
        return {n: p.detach().clone() for n, p in self.base.state_dict().items() if ".lora_" not in n}


def build_model(vocab_size: int, n_labels: int, *, seed: int = 0, rank: int = 4, lm_kwargs: dict | None = None,
                **kw) -> LiftModel:
    base = ToyLM(ToyLMConfig(vocab_size=vocab_size, seed=seed, **(lm_kwargs or {})))
    return LiftModel(base, n_labels, rank=rank, seed=seed, **kw)


def state_hash(state: dict) -> str:
    return tensor_hash(sorted(_flatten(state).items()))


def save_checkpoint(model: LiftModel, path, meta: dict | None = None) -> str:
    """Write the full model (frozen base included) and return the trainable-state hash."""
    state = model.trainable_state()
    digest = state_hash(state)
    blob = {
        "config": model.config_dict(),
        "base": model.base_state(),
        "trainable": state,
        "meta": dict(meta or {}, state_hash=digest),
        "rng": torch.get_rng_state(),
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(blob, path)
    return digest


def load_checkpoint(path) -> tuple[LiftModel, dict]:
    blob = torch.load(path, weights_only=False)
    cfg = blob["config"]
    base = ToyLM(ToyLMConfig(**cfg["base"]))
    model = LiftModel(base, cfg["n_labels"], rank=blob["trainable"]["adapters"]["rank"] or 4,
                      cond=ConditioningConfig(**cfg["conditioning"]), shared_heads=cfg["shared_heads"],
                      seed=cfg["seed"], use_conditioning=cfg["use_conditioning"], mask_history=cfg["mask_history"],
                      isolate_gradients=cfg.get("isolate_gradients", False))
    missing = model.base.load_state_dict(blob["base"], strict=False)
    assert not [k for k in missing.missing_keys if ".lora_" not in k], missing
    model.load_trainable_state(blob["trainable"])
    return model, blob["meta"]


def _flatten(state: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in state.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        elif isinstance(v, torch.Tensor):
            out[key] = v
    return out
