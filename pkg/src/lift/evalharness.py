"""In-context evaluation: label decoding, macro-F1 reports, CMV context sources."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import re
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from .builder import (Demo, PromptExample, build_history, current_block, example_seed, fit_demos, header_block,
                      load_instruction, render_prompt, sample_demos, truncate_to_budget)
from .conditioning import TemporalFeatures, rel_bucket
from .corpus import TimelineItem
from .errors import EmptyShard
from .tokenspace import encode_with_spans


# -- metrics ------------------------------------------------------------------

def per_class_prf(gold: Sequence[str], pred: Sequence[str], labels: Sequence[str]) -> dict[str, dict]:
    out = {}
    for lab in labels:
        tp = sum(1 for g, p in zip(gold, pred) if g == lab and p == lab)
        fp = sum(1 for g, p in zip(gold, pred) if g != lab and p == lab)
        fn = sum(1 for g, p in zip(gold, pred) if g == lab and p != lab)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
        out[lab] = {"precision": prec, "recall": rec, "f1": f1, "support": tp + fn, "predicted": tp + fp}
    return out


def macro_f1(gold: Sequence[str], pred: Sequence[str], label_set: Sequence[str] | None = None,
             full_label_set: bool = False) -> tuple[float, dict[str, dict]]:
    """Unweighted mean of per-class F1.

    By default classes are those appearing in gold or predictions; with
    ``full_label_set`` every declared class counts (absent ones as F1 = 0).
    """
    if len(gold) != len(pred):
        raise ValueError("gold and pred differ in length")
    if full_label_set:
        if label_set is None:
            raise ValueError("full_label_set requires label_set")
        labels = list(label_set)
    else:
        seen = set(gold) | set(pred)
        labels = [l for l in label_set if l in seen] if label_set is not None else sorted(seen)
        labels += sorted(seen - set(labels))
    per = per_class_prf(gold, pred, labels)
    return (sum(v["f1"] for v in per.values()) / len(per) if per else 0.0), per


# -- decoding -----------------------------------------------------------------

def parse_generated_label(text: str, candidates: Sequence[str]) -> str | None:
    """Longest candidate that occurs as a whole word in ``text``; ties by position then name."""
    best = None
    for cand in candidates:
        for m in re.finditer(r"(?<![\w-])" + re.escape(cand) + r"(?![\w-])", text):
            key = (-len(cand), m.start(), cand)
            if best is None or key < best[0]:
                best = (key, cand)
            break
    return best[1] if best else None


@dataclass
class Candidate:
    label: str
    global_id: int


def _encode_candidate(tokenizer, ex_enc, cand_ids: list[int], gid: int):
    ids = np.concatenate([ex_enc.input_ids[:ex_enc.prompt_len], np.asarray(cand_ids, dtype=np.int64)])
    stamp = np.zeros(len(ids), dtype=np.int64)
    stamp[ex_enc.prompt_len:] = gid
    hist = np.zeros(len(ids), dtype=bool)
    hist[:ex_enc.prompt_len] = ex_enc.hist_mask[:ex_enc.prompt_len]
    return ids, stamp, hist


def candidate_scores(model, tokenizer, enc, candidates: Sequence[Candidate], patch=None) -> dict[str, float]:
    """Total log-likelihood of each candidate label placed after ``<output>``.

    Single-token candidates are all read from one forward pass over the prompt.
    """
    cand_ids = {c.label: tokenizer.encode(c.label) for c in candidates}
    P = enc.prompt_len
    with torch.no_grad():
        if all(len(v) == 1 for v in cand_ids.values()):
            ids = enc.input_ids[:P]
            feats = prompt_features(model, P + 2, P, enc.timestep_id)
            out = model.run(ids, feats, enc.hist_mask[:P], patch=patch)
            logp = torch.log_softmax(out.logits[P - 1].double(), -1)
            return {lab: float(logp[v[0]]) for lab, v in cand_ids.items()}
        scores = {}
        for c in candidates:
            ids, stamp, hist = _encode_candidate(tokenizer, enc, cand_ids[c.label], c.global_id)
            feats = prompt_features(model, len(ids) + 1, len(ids), enc.timestep_id, stamp)
            out = model.run(ids, feats, hist, patch=patch)
            logp = torch.log_softmax(out.logits.double(), -1)
            tgt = torch.as_tensor(ids[P:])
            scores[c.label] = float(logp[P - 1:len(ids) - 1].gather(-1, tgt.unsqueeze(-1)).sum())
        return scores


def prompt_features(model, total_len: int, n: int, timestep: int, stamp: np.ndarray | None = None) -> TemporalFeatures:
    """Features for the first ``n`` positions of a sequence that will be ``total_len`` long.

    Position-to-end is measured against the completed sequence (response and
    eos included), exactly as in training, even when only a prefix is run.
    """
    cfg = model.cond_cfg
    t = np.arange(n)
    stamp = np.zeros(n, dtype=np.int64) if stamp is None else np.asarray(stamp)[:n]
    return TemporalFeatures(np.minimum(t, cfg.p_max - 1), rel_bucket(total_len - 1 - t, cfg.p_max, cfg.r_buckets),
                            np.clip(stamp, 0, cfg.n_labels - 1),
                            np.full(n, min(max(timestep, 0), cfg.t_max - 1), dtype=np.int64))


def pick(scores: dict[str, float]) -> str:
    """Highest score; exact ties go to the lexicographically smallest label."""
    top = max(scores.values())
    return min(lab for lab, s in scores.items() if s == top)


def generate(model, tokenizer, enc, max_new_tokens: int = 8, response_len: int = 1) -> str:
    """Greedy decoding; ``response_len`` is the response length assumed for position-to-end features."""
    ids = list(enc.input_ids[:enc.prompt_len])
    P = enc.prompt_len
    hist = list(enc.hist_mask[:P])
    with torch.no_grad():
        for _ in range(max_new_tokens):
            L = len(ids)
            feats = prompt_features(model, max(L, P + response_len) + 1, L, enc.timestep_id)
            nxt = int(model.run(np.asarray(ids), feats, np.asarray(hist)).logits[-1].argmax())
            if nxt == tokenizer.eos_id:
                break
            ids.append(nxt)
            hist.append(False)
    return tokenizer.decode(ids[P:])


def decode_label(model, tokenizer, enc, candidates: Sequence[Candidate], mode: str = "rank") -> str:
    if len(candidates) == 1:
        return candidates[0].label
    if mode == "rank":
        return pick(candidate_scores(model, tokenizer, enc, candidates))
    if mode == "generate":
        text = generate(model, tokenizer, enc)
        parsed = parse_generated_label(text, [c.label for c in candidates])
        return parsed if parsed is not None else min(c.label for c in candidates)
    raise ValueError(f"unknown decode mode {mode!r}")


# -- reports ------------------------------------------------------------------

@dataclass
class EvalReport:
    dataset: str
    shots: int
    macro_f1: float
    per_class: dict[str, dict]
    n: int
    decode_mode: str
    seed: int
    prompt_hash: str
    counts: dict[str, int] = field(default_factory=dict)
    predictions: list[str] = field(default_factory=list, repr=False)
    gold: list[str] = field(default_factory=list, repr=False)
    reference_target: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["dataset", "shots", "class", "precision", "recall", "f1", "support"])
        for lab, v in self.per_class.items():
            w.writerow([self.dataset, self.shots, lab, f"{v['precision']:.6f}", f"{v['recall']:.6f}",
                        f"{v['f1']:.6f}", v["support"]])
        w.writerow([self.dataset, self.shots, "macro", "", "", f"{self.macro_f1:.6f}", self.n])
        return buf.getvalue()


def prompts_hash(examples: Sequence[PromptExample]) -> str:
    h = hashlib.sha256()
    for ex in examples:
        h.update(ex.prompt.encode())
        h.update(b"\x00")
    return h.hexdigest()[:16]


def candidates_for(dataset_id: str, labelspace) -> list[Candidate]:
    return [Candidate(lab, labelspace.id_of(dataset_id, lab)) for lab in labelspace.labels_of(dataset_id)]


def evaluate(model, tokenizer, examples: Sequence[PromptExample], labelspace, *, shots: int, seed: int,
             decode_mode: str = "rank", full_label_set: bool = False, encoded: Sequence | None = None) -> EvalReport:
    """Decode every example and score against gold labels."""
    if not examples:
        raise EmptyShard("nothing to evaluate")
    dataset = examples[0].dataset_id
    cands = candidates_for(dataset, labelspace)
    was_training = model.training
    model.eval()
    preds, gold = [], []
    encs = encoded if encoded is not None else [encode_with_spans(ex, tokenizer) for ex in examples]
    for ex, enc in zip(examples, encs):
        preds.append(decode_label(model, tokenizer, enc, cands, decode_mode))
        gold.append(ex.response_text)
    model.train(was_training)
    labels = [c.label for c in cands]
    mf1, per = macro_f1(gold, preds, labels, full_label_set)
    counts = {lab: gold.count(lab) for lab in labels}
    return EvalReport(dataset, shots, mf1, per, len(gold), decode_mode, seed, prompts_hash(examples), counts,
                      preds, gold)


# -- CMV context sources ------------------------------------------------------

CONTEXT_MODES = ("conversation", "author_all", "author_topic")


def context_source_select(cmv_items: Sequence[TimelineItem], query: TimelineItem, mode: str) -> list[TimelineItem]:
    """Candidate demonstration items for a CMV query, all strictly earlier in time.

    ``conversation`` uses prior turns of the query's thread; ``author_all`` the
    query author's earlier items in any thread; ``author_topic`` restricts that
    to the query's topic.
    """
    if mode not in CONTEXT_MODES:
        raise ValueError(f"unknown context mode {mode!r}")
    earlier = [it for it in cmv_items if it.timestamp < query.timestamp and it is not query]
    if mode == "conversation":
        return [it for it in earlier if it.sequence_key == query.sequence_key]
    mine = [it for it in earlier if it.author is not None and it.author == query.author]
    if mode == "author_all":
        return mine
    return [it for it in mine if it.topic == query.topic]


def build_cmv_examples(timelines, mode: str, k: int, seed: int, token_len_fn, *, budget: int = 2048,
                       history_labels: bool = True) -> tuple[list[PromptExample], int]:
    """k-shot CMV prompts whose demos come from the chosen context source.

    Returns the examples and the number of queries whose pool was empty (those
    degrade to 0-shot).
    """
    items = [it for tl in timelines for it in tl.items]
    instruction = load_instruction("cmv")
    out, n_empty = [], 0
    for tl in timelines:
        for i, item in enumerate(tl.items):
            if not item.labeled:
                continue
            pool_items = [x for x in context_source_select(items, item, mode) if x.labeled]
            if not pool_items:
                n_empty += 1
            pool = [Demo("cmv", f"{x.sequence_key}#{x.index_in_timeline}", ((x.text, x.local_label),), x.global_label_id)
                    for x in pool_items]
            reserve = token_len_fn(item.local_label) + 1
            history = build_history(tl, i)
            rendered = [h.render(history_labels) for h in history]
            kept = truncate_to_budget(header_block(instruction), rendered, current_block(item.text),
                                      budget - reserve, token_len_fn)
            history = history[len(history) - len(kept):]
            demos = sample_demos(pool, k, example_seed(seed, tl.sequence_key, i))
            ex = render_prompt(instruction, demos, history, item.text, item.local_label,
                               history_labels=history_labels, dataset_id="cmv", sequence_key=tl.sequence_key,
                               global_label_id=item.global_label_id, timestep_id=item.index_in_timeline, k_requested=k)
            ex, _ = fit_demos(ex, budget - reserve, token_len_fn)
            if ex is not None:
                out.append(ex)
    return out, n_empty
