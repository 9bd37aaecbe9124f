"""End-to-end run: split, tokenize, build the curriculum, train, evaluate."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .builder import (BuildStats, build_curriculum, build_eval_examples, build_timeline_examples, demo_pool,
                      formatting_words, load_instruction)
from .config import LiftConfig
from .corpus import DATASET_LABELS, DATASETS, GlobalLabelSpace, Timeline, split_timelines
from .evalharness import EvalReport, evaluate
from .model import LiftModel, build_model
from .objectives import LossWeights
from .reference import reference_target
from .tokenspace import EncodedExample, WhitespaceTokenizer, encode_with_spans, extend_vocab
from .trainer import StageResult, StageSchedule, default_schedules, run_curriculum, run_stage

log = logging.getLogger(__name__)

TEST_ONLY = ("reddit", "cmv")


def corpus_texts(corpora: Mapping[str, Sequence[Timeline]]) -> list[str]:
    return [it.text for tls in corpora.values() for tl in tls for it in tl.items]


def build_tokenizer(texts: Iterable[str], *, max_vocab: int | None = None, min_freq: int = 1) -> WhitespaceTokenizer:
    """Word vocabulary over ``texts`` plus every instruction, label and template word, then control tokens."""
    texts = list(texts)
    texts += [load_instruction(ds) for ds in DATASETS]
    texts += formatting_words()
    texts += [lab for labs in DATASET_LABELS.values() for lab in labs]
    return extend_vocab(WhitespaceTokenizer.fit(texts, max_vocab=max_vocab, min_freq=min_freq))


def loss_weights(cfg: LiftConfig) -> LossWeights:
    return LossWeights(cfg.lambda_ce, cfg.lambda_out, cfg.lambda_cls, cfg.lambda_hist, cfg.gamma)


def stage_schedules(cfg: LiftConfig) -> dict[int, StageSchedule]:
    over = {"checkpoint_every": cfg.checkpoint_every, "val_split": cfg.val_split}
    if cfg.epochs is not None:
        over["epochs"] = cfg.epochs
    if cfg.grad_accum is not None:
        over["grad_accum"] = cfg.grad_accum
    out = default_schedules(**over)
    if cfg.lr_scale != 1.0:
        out = {s: replace(sch, lr=sch.lr * cfg.lr_scale) for s, sch in out.items()}
    return {s: replace(sch, **cfg.stage_values(s)) for s, sch in out.items()}


def split_corpora(corpora: Mapping[str, Sequence[Timeline]], test_frac: float, seed: int):
    """80/20 timeline splits for curriculum datasets; test-only datasets go entirely to test."""
    train, test = {}, {}
    for ds, tls in corpora.items():
        if ds in TEST_ONLY:
            train[ds], test[ds] = [], list(tls)
        else:
            train[ds], test[ds] = split_timelines(tls, test_frac, seed)
    return train, test


def new_model(cfg: LiftConfig, tokenizer, labelspace: GlobalLabelSpace, rank: int = 4) -> LiftModel:
    lm = {"n_layers": cfg.n_layers, "d_model": cfg.d_model, "n_heads": cfg.n_heads, "d_ff": cfg.d_ff}
    return build_model(tokenizer.vocab_size, len(labelspace), seed=cfg.seed, rank=rank, lm_kwargs=lm,
                       dropout=cfg.adapter_dropout, shared_heads=cfg.shared_heads,
                       use_conditioning=cfg.use_conditioning, mask_history=cfg.mask_history,
                       isolate_gradients=cfg.isolate_gradients)


def encode_shards(shards, tokenizer) -> dict[int, list[EncodedExample]]:
    return {s: [encode_with_spans(ex, tokenizer) for ex in exs] for s, exs in shards.items()}


def eval_examples(dataset: str, train, test, tokenizer, cfg: LiftConfig, shots: int) -> list:
    """k-shot prompts for ``dataset``'s test timelines; demos come from its training split
    (or, for test-only datasets, from other test timelines)."""
    pool = demo_pool(train.get(dataset) or test[dataset], cfg.demo_window)
    return build_eval_examples(test[dataset], pool, shots, cfg.seed, tokenizer.count, budget=cfg.budget,
                               history_labels=cfg.history_labels, stratified=cfg.stratified_demos)


def evaluate_all(model, tokenizer, train, test, labelspace, cfg: LiftConfig, shots: int | None = None,
                 datasets: Sequence[str] = DATASETS) -> dict[str, EvalReport]:
    """One report per dataset with test timelines."""
    shots = cfg.eval_shots if shots is None else shots
    out = {}
    for ds in datasets:
        if not test.get(ds):
            continue
        exs = eval_examples(ds, train, test, tokenizer, cfg, shots)
        if not exs:
            continue
        rep = evaluate(model, tokenizer, exs, labelspace, shots=shots, seed=cfg.seed, decode_mode=cfg.decode_mode,
                       full_label_set=cfg.full_label_set)
        rep.reference_target = reference_target(ds, shots)
        out[ds] = rep
    return out


@dataclass
class PipelineResult:
    config: LiftConfig
    labelspace: GlobalLabelSpace
    tokenizer: WhitespaceTokenizer
    model: LiftModel
    build_stats: BuildStats
    stages: list[StageResult]
    reports: dict[str, EvalReport] = field(default_factory=dict)


def run_pipeline(corpora: Mapping[str, Sequence[Timeline]], cfg: LiftConfig | None = None, *,
                 labelspace: GlobalLabelSpace | None = None, run_dir=None) -> PipelineResult:
    cfg = cfg or LiftConfig()
    labelspace = labelspace or GlobalLabelSpace.default()
    train, test = split_corpora(corpora, cfg.test_frac, cfg.seed)
    tokenizer = build_tokenizer(corpus_texts(corpora), max_vocab=cfg.max_vocab)
    shards, stats = build_curriculum(train, tokenizer.count, budget=cfg.budget, seed=cfg.seed,
                                     history_labels=cfg.history_labels, demo_window=cfg.demo_window,
                                     stratified=cfg.stratified_demos)
    encoded = encode_shards(shards, tokenizer)
    schedules = {s: sch for s, sch in stage_schedules(cfg).items() if encoded.get(s)}
    model = new_model(cfg, tokenizer, labelspace, rank=schedules[min(schedules)].rank)
    metrics = Path(run_dir) / "metrics.jsonl" if run_dir is not None else None
    stages = run_curriculum(model, encoded, schedules, weights=loss_weights(cfg), seed=cfg.seed, run_dir=run_dir,
                            metrics_path=metrics, class_weighting=cfg.class_weighting)
    reports = evaluate_all(model, tokenizer, train, test, labelspace, cfg)
    return PipelineResult(cfg, labelspace, tokenizer, model, stats, stages, reports)


# -- history ablation -----------------------------------------------------------

ABLATION_SCHEDULE = StageSchedule(2, rank=16, lr=3e-3, lr_schedule="constant", k=0, epochs=12, grad_accum=8,
                                  checkpoint_every=10**9)


@dataclass
class AblationResult:
    full: EvalReport
    masked: EvalReport
    models: dict[str, LiftModel]
    tokenizer: WhitespaceTokenizer
    test_examples: list
    stages: dict[str, StageResult]

    @property
    def gap(self) -> float:
        return self.full.macro_f1 - self.masked.macro_f1


def history_ablation(timelines: Sequence[Timeline], *, instruction: str, schedule: StageSchedule = ABLATION_SCHEDULE,
                     seed: int = 17, split_seed: int = 0, test_frac: float = 0.2,
                     labelspace: GlobalLabelSpace | None = None, lm_kwargs: dict | None = None,
                     budget: int = 2048) -> AblationResult:
    """Train the full model and a history-masked twin on identical data and compare macro-F1.

    Both runs share the tokenizer, split, schedule, init seed and example
    order; only the attention mask over history tokens differs.
    """
    labelspace = labelspace or GlobalLabelSpace.default()
    train, test = split_timelines(timelines, test_frac, split_seed)
    texts = [it.text for tl in timelines for it in tl.items] + [instruction] + formatting_words()
    texts += [lab for labs in DATASET_LABELS.values() for lab in labs]
    tok = extend_vocab(WhitespaceTokenizer.fit(texts))

    def examples(tls):
        return [ex for tl in tls for ex in build_timeline_examples(
            tl, stage=schedule.stage, k=0, instruction=instruction, pool=[], seed=seed, budget=budget,
            token_len_fn=tok.count)]

    tr, te = examples(train), examples(test)
    enc = [encode_with_spans(ex, tok) for ex in tr]
    reports, models, stages = {}, {}, {}
    for name, mask in (("full", False), ("masked", True)):
        model = build_model(tok.vocab_size, len(labelspace), seed=seed, rank=schedule.rank, lm_kwargs=lm_kwargs,
                            mask_history=mask)
        stages[name] = run_stage(model, enc, schedule, seed=seed)
        reports[name] = evaluate(model, tok, te, labelspace, shots=0, seed=seed)
        models[name] = model
    return AblationResult(reports["full"], reports["masked"], models, tok, te, stages)
