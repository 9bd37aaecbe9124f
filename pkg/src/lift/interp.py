"""Mechanistic analyses: region probing, attention routing and history patching.

Every analysis runs on the prompt alone (up to and including the last prompt
token, which is the prediction position) and leaves the model untouched.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import accuracy_score, f1_score
from sklearn.model_selection import StratifiedKFold
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from .builder import HistoryLine, PromptExample, rerender
from .errors import InsufficientClassSupport, LayerOutOfRange, NoAttentionCapture, SpanAlignment
from .evalharness import candidate_scores, candidates_for, macro_f1, pick, prompt_features
from .tokenspace import REGION_ID, encode_with_spans

REP_REGIONS = ("hist_mean", "fewshot_mean", "curr_mean", "last_curr")
ROUTING_REGIONS = ("instruction", "fewshot", "hist", "curr", "other")
RECENCY_BINS = 8  # one bin per item t-1..t-8, then one tail bin


def _check_layers(model, layers: Sequence[int]) -> list[int]:
    n = model.base.n_layers
    bad = [l for l in layers if not 0 <= l <= n]
    if bad:
        raise LayerOutOfRange(f"layers {bad} outside 0..{n}")
    return list(layers)


def _prompt_run(model, enc, **kw):
    P = enc.prompt_len
    feats = prompt_features(model, len(enc.input_ids), P, enc.timestep_id)
    return model.run(enc.input_ids[:P], feats, enc.hist_mask[:P], **kw)


# -- region representations ---------------------------------------------------

@dataclass
class RegionReps:
    """``vectors[i, j, r]`` is region ``REP_REGIONS[r]`` of example ``i`` at ``layers[j]``."""

    layers: list[int]
    vectors: np.ndarray
    present: np.ndarray

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def get(self, layer: int, region: str) -> tuple[np.ndarray, np.ndarray]:
        j = self.layers.index(layer)
        r = REP_REGIONS.index(region)
        return self.vectors[:, j, r], self.present[:, r]


def region_vectors(hidden: torch.Tensor, region_ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Region summaries of one ``(L, d)`` hidden matrix; absent regions give zeros."""
    h = hidden.detach().double().cpu().numpy()
    out = np.zeros((len(REP_REGIONS), h.shape[1]))
    present = np.zeros(len(REP_REGIONS), dtype=bool)
    for r, name in enumerate(("hist", "fewshot", "curr")):
        m = region_ids == REGION_ID[name]
        if m.any():
            out[r] = h[m].mean(axis=0)
            present[r] = True
    curr = np.flatnonzero(region_ids == REGION_ID["curr"])
    if len(curr):
        out[3] = h[curr[-1]]
        present[3] = True
    return out, present


@torch.no_grad()
def extract_region_reps(model, encoded: Sequence, layers: Sequence[int]) -> RegionReps:
    layers = _check_layers(model, layers)
    was = model.training
    model.eval()
    vecs, pres = [], []
    for enc in encoded:
        out = _prompt_run(model, enc, capture_hidden=True)
        regions = enc.region_ids[:enc.prompt_len]
        per_layer = [region_vectors(out.hidden_states[l], regions) for l in layers]
        vecs.append(np.stack([v for v, _ in per_layer]))
        pres.append(per_layer[0][1])
    model.train(was)
    d = model.base.d_model
    return RegionReps(layers, np.asarray(vecs).reshape(len(vecs), len(layers), len(REP_REGIONS), d),
                      np.asarray(pres, dtype=bool).reshape(len(pres), len(REP_REGIONS)))


# -- probing ------------------------------------------------------------------

@dataclass
class ProbeScore:
    accuracy: float
    macro_f1: float
    n: int
    folds: np.ndarray = field(repr=False)
    predictions: np.ndarray = field(repr=False)


def fold_assignment(y: Sequence, folds: int, seed: int) -> np.ndarray:
    y = np.asarray(y)
    out = np.empty(len(y), dtype=np.int64)
    skf = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    for f, (_, test) in enumerate(skf.split(np.zeros(len(y)), y)):
        out[test] = f
    return out


def probe_features(X: np.ndarray, y: Sequence, folds: int = 5, seed: int = 0) -> ProbeScore:
    """Out-of-fold accuracy of a standardized, class-balanced logistic probe."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2 or counts.min() < folds:
        raise InsufficientClassSupport(
            f"need >= {folds} examples in each of >= 2 classes, got {dict(zip(classes.tolist(), counts.tolist()))}")
    fold_ids = fold_assignment(y, folds, seed)
    pred = np.empty_like(y)
    for f in range(folds):
        test = fold_ids == f
        clf = make_pipeline(StandardScaler(),
                            LogisticRegression(class_weight="balanced", max_iter=2000, random_state=seed))
        clf.fit(X[~test], y[~test])
        pred[test] = clf.predict(X[test])
    return ProbeScore(float(accuracy_score(y, pred)), float(f1_score(y, pred, average="macro")), len(y),
                      fold_ids, pred)


def probe(reps: RegionReps, gold_labels: Sequence, folds: int = 5, seed: int = 0) -> dict[tuple[int, str], ProbeScore]:
    """Probe every (layer, region) pair over the examples where that region exists.

    Pairs with too little class support after filtering are left out; the
    call fails only if the full label set is itself too thin.
    """
    gold = np.asarray(gold_labels)
    _, counts = np.unique(gold, return_counts=True)
    if len(counts) < 2 or counts.min() < folds:
        raise InsufficientClassSupport(f"need >= {folds} examples per class and >= 2 classes")
    out = {}
    for layer in reps.layers:
        for region in REP_REGIONS:
            X, m = reps.get(layer, region)
            try:
                out[(layer, region)] = probe_features(X[m], gold[m], folds, seed)
            except InsufficientClassSupport:
                continue
    return out


def probe_deltas(tuned: dict, base: dict) -> dict[tuple[int, str], float]:
    """Accuracy of the tuned model minus the base model per (layer, region)."""
    return {key: tuned[key].accuracy - base[key].accuracy for key in tuned if key in base}


# -- attention routing --------------------------------------------------------

@dataclass
class Routing:
    """Per-layer attention mass of the prediction position over prompt regions."""

    masses: np.ndarray
    recency: np.ndarray
    hist_mass_raw: np.ndarray = field(repr=False)

    @property
    def has_history(self) -> bool:
        return self.recency.size > 0

    def to_dict(self) -> dict:
        return {"regions": list(ROUTING_REGIONS), "masses": self.masses.tolist(), "recency": self.recency.tolist(),
                "recency_bins": recency_bin_names()}


def recency_bin_names() -> list[str]:
    return [f"t-{j}" for j in range(1, RECENCY_BINS + 1)] + [f"t-{RECENCY_BINS + 1}+"]


def recency_bin(rel: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(rel), 1, RECENCY_BINS + 1) - 1


@torch.no_grad()
def attention_routing(model, encoded) -> Routing:
    was = model.training
    model.eval()
    out = _prompt_run(model, encoded, capture_attention=True)
    model.train(was)
    if not out.attentions:
        raise NoAttentionCapture("backbone returned no attention weights")
    P = encoded.prompt_len
    regions = encoded.region_ids[:P]
    hist = regions == REGION_ID["hist"]
    bins = recency_bin(encoded.hist_rel[:P][hist]) if hist.any() else np.zeros(0, dtype=np.int64)
    masses, recency, raw = [], [], []
    for att in out.attentions:
        row = att[:, P - 1, :].double().mean(0).cpu().numpy()
        m = np.array([row[regions == REGION_ID[r]].sum() if r != "other" else 0.0 for r in ROUTING_REGIONS])
        m[-1] = row.sum() - m[:-1].sum()  # control tokens and anything unlabeled
        masses.append(m)
        if hist.any():
            prof = np.bincount(bins, weights=row[hist], minlength=RECENCY_BINS + 1)
            raw.append(prof)
            total = prof.sum()
            recency.append(prof / total if total > 0 else np.zeros_like(prof))
    empty = np.zeros((0, RECENCY_BINS + 1))
    return Routing(np.asarray(masses), np.asarray(recency) if recency else empty, np.asarray(raw) if raw else empty)


def mean_routing(model, encoded: Sequence) -> dict:
    """Routing averaged over examples; recency only over examples with history."""
    rs = [attention_routing(model, enc) for enc in encoded]
    masses = np.mean([r.masses for r in rs], axis=0)
    with_hist = [r.recency for r in rs if r.has_history]
    recency = np.mean(with_hist, axis=0) if with_hist else np.zeros((0, RECENCY_BINS + 1))
    return {"regions": list(ROUTING_REGIONS), "masses": masses.tolist(), "recency": recency.tolist(),
            "recency_bins": recency_bin_names(), "n": len(rs), "n_with_history": len(with_hist)}


# -- activation patching ------------------------------------------------------

def derangement(n: int, rng: np.random.RandomState) -> np.ndarray:
    """A permutation with no fixed points (identity for n < 2)."""
    if n < 2:
        return np.arange(n)
    while True:
        p = rng.permutation(n)
        if not (p == np.arange(n)).any():
            return p


def shuffle_history(example: PromptExample, seed: int) -> PromptExample:
    """Permute history posts (text with its label) while keeping the t-j slots."""
    hist = example.history_lines
    perm = derangement(len(hist), np.random.RandomState(seed))
    shuffled = [HistoryLine(h.rel, hist[p].text, hist[p].label, hist[p].role) for h, p in zip(hist, perm)]
    return rerender(example, history=shuffled)


def stratified_sample(labels: Sequence, n: int, seed: int) -> list[int]:
    """Indices of ``n`` items with per-label counts proportional to the input (largest remainder)."""
    labels = list(labels)
    if n >= len(labels):
        return list(range(len(labels)))
    rng = np.random.RandomState(seed)
    groups: dict = {}
    for i, lab in enumerate(labels):
        groups.setdefault(lab, []).append(i)
    keys = sorted(groups)
    quota = {k: n * len(groups[k]) / len(labels) for k in keys}
    take = {k: int(quota[k]) for k in keys}
    for k in sorted(keys, key=lambda k: (-(quota[k] - take[k]), k))[:n - sum(take.values())]:
        take[k] += 1
    picked = []
    for k in keys:
        idx = groups[k]
        picked += [idx[i] for i in rng.permutation(len(idx))[:take[k]]]
    return sorted(picked)


@dataclass
class LayerPatch:
    layer: int
    delta_macro_f1: float
    delta_gold: float
    delta_margin: float
    flip_rate: float


@dataclass
class PatchReport:
    layers: list[LayerPatch]
    n: int
    seed: int
    clean_macro_f1: float
    corruption: str = "shuffle"
    indices: list[int] = field(default_factory=list, repr=False)

    def by_layer(self) -> dict[int, LayerPatch]:
        return {lp.layer: lp for lp in self.layers}

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["layer", "delta_macro_f1", "delta_gold", "delta_margin", "flip_rate", "n"])
        for lp in self.layers:
            w.writerow([lp.layer, f"{lp.delta_macro_f1:.6f}", f"{lp.delta_gold:.6f}", f"{lp.delta_margin:.6f}",
                        f"{lp.flip_rate:.6f}", self.n])
        return buf.getvalue()


def _gold_and_margin(scores: dict[str, float], gold: str) -> tuple[float, float]:
    others = [s for lab, s in scores.items() if lab != gold]
    g = scores[gold]
    return g, g - max(others) if others else 0.0


@torch.no_grad()
def activation_patch(model, tokenizer, examples: Sequence[PromptExample], labelspace, layers: Sequence[int], *,
                     seed: int = 0, n_examples: int = 150, corruption: str = "shuffle") -> PatchReport:
    """Replace history rows at each layer with those of a corrupted run and measure the damage.

    ``corruption="shuffle"`` permutes history posts; ``"none"`` patches the
    clean run into itself, which must change nothing.  Gold and margin deltas
    use candidate log-likelihoods.
    """
    layers = _check_layers(model, layers)
    if corruption not in ("shuffle", "none"):
        raise ValueError(f"unknown corruption {corruption!r}")
    if not examples:
        raise ValueError("no examples to patch")
    idx = stratified_sample([ex.response_text for ex in examples], n_examples, seed)
    cands = candidates_for(examples[0].dataset_id, labelspace)
    was = model.training
    model.eval()
    gold, clean_pred = [], []
    patched_pred = {l: [] for l in layers}
    d_gold = {l: [] for l in layers}
    d_margin = {l: [] for l in layers}
    for i in idx:
        ex = examples[i]
        enc = encode_with_spans(ex, tokenizer)
        bad = ex if corruption == "none" else shuffle_history(ex, seed * 100003 + i)
        enc_bad = encode_with_spans(bad, tokenizer)
        pos = np.flatnonzero(enc.hist_mask[:enc.prompt_len])
        if not np.array_equal(pos, np.flatnonzero(enc_bad.hist_mask[:enc_bad.prompt_len])):
            raise SpanAlignment("corrupted history does not occupy the clean history positions")
        cache = _prompt_run(model, enc_bad, capture_hidden=True).hidden_states
        clean = candidate_scores(model, tokenizer, enc, cands)
        g0, m0 = _gold_and_margin(clean, ex.response_text)
        gold.append(ex.response_text)
        clean_pred.append(pick(clean))
        for l in layers:
            if len(pos):
                patch = {l: (torch.as_tensor(pos), cache[l][pos])}
                scores = candidate_scores(model, tokenizer, enc, cands, patch=patch)
            else:
                scores = clean
            g1, m1 = _gold_and_margin(scores, ex.response_text)
            patched_pred[l].append(pick(scores))
            d_gold[l].append(g1 - g0)
            d_margin[l].append(m1 - m0)
    model.train(was)
    labels = [c.label for c in cands]
    f_clean, _ = macro_f1(gold, clean_pred, labels)
    rows = []
    for l in layers:
        f_patch, _ = macro_f1(gold, patched_pred[l], labels)
        flips = float(np.mean([a != b for a, b in zip(clean_pred, patched_pred[l])]))
        rows.append(LayerPatch(l, f_patch - f_clean, float(np.mean(d_gold[l])), float(np.mean(d_margin[l])), flips))
    return PatchReport(rows, len(idx), seed, f_clean, corruption, idx)
