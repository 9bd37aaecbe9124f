"""End-to-end acceptance checks. Each test records one PASS/FAIL line, printed after the run."""
import math
import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F

import lift.model as lift_model
from conftest import TINY_LM, record_criterion
from lift import adapters as ad
from lift.builder import MAX_TOKENS, build_curriculum, truncate_to_budget
from lift.config import LiftConfig
from lift.corpus import DATASETS, GlobalLabelSpace, load_raw
from lift.errors import BudgetTooSmall
from lift.evalharness import macro_f1
from lift.fixtures import (BUNDLED_SEED, BUNDLED_SIZES, STANCE_TASK_INSTRUCTION, bundled_path,
                           synthetic_timelines)
from lift.interp import activation_patch, fold_assignment, probe_features
from lift.model import build_model
from lift.objectives import LossWeights, focal_cls, focal_lm
from lift.pipeline import (build_tokenizer, corpus_texts, encode_shards, eval_examples, history_ablation,
                           run_pipeline, split_corpora)
from lift.toylm import ToyLM, ToyLMConfig


@pytest.fixture(scope="module")
def fixture_build():
    """Every bundled corpus, split and built into curriculum shards with default settings."""
    ls = GlobalLabelSpace.default()
    corpora = {ds: load_raw(bundled_path(ds), ds, ls) for ds in BUNDLED_SIZES}
    cfg = LiftConfig()
    train, test = split_corpora(corpora, cfg.test_frac, cfg.seed)
    tok = build_tokenizer(corpus_texts(corpora))
    shards, stats = build_curriculum(train, tok.count, budget=cfg.budget, seed=cfg.seed)
    return cfg, ls, train, test, tok, shards


@pytest.fixture(scope="module")
def ablation():
    tls = load_raw(bundled_path("stance_task"), "lrs")
    t0 = time.time()
    res = history_ablation(tls, instruction=STANCE_TASK_INSTRUCTION, seed=17, split_seed=BUNDLED_SEED)
    return res, time.time() - t0


def schedule_corpus():
    # sized so every stage keeps more than 416 training examples after validation hold-out
    return {"annomi": synthetic_timelines("annomi", timelines=40, posts_per_timeline=30, words_per_post=3, seed=11),
            "lrs": synthetic_timelines("lrs", timelines=40, posts_per_timeline=15, words_per_post=3, seed=12),
            "talklife": synthetic_timelines("talklife", timelines=20, posts_per_timeline=30, words_per_post=3,
                                            seed=13)}


SCHEDULE_CFG = LiftConfig(n_layers=1, d_model=16, n_heads=2, d_ff=32)


@pytest.fixture(scope="module")
def two_runs():
    return run_pipeline(schedule_corpus(), SCHEDULE_CFG), run_pipeline(schedule_corpus(), SCHEDULE_CFG)


# 1 --------------------------------------------------------------------------

def injected_grads(model, enc, weights, monkeypatch):
    seen = {}
    real = lift_model.inject

    def spy(x, feats, params):
        y = real(x, feats, params)
        y.retain_grad()
        seen["x"] = y
        return y

    monkeypatch.setattr(lift_model, "inject", spy)
    model.zero_grad()
    model.loss(enc, weights).total.backward()
    return seen["x"].grad.abs().sum(dim=1)


def isolation_gaps(model, picks, monkeypatch):
    """Largest |grad| at history rows under CE alone and at non-output rows under the output loss alone."""
    worst_hist = worst_prompt = 0.0
    for enc in picks:
        hist = torch.as_tensor(enc.hist_mask)
        out = torch.as_tensor(enc.output_mask)
        g_ce = injected_grads(model, enc, LossWeights(1, 0, 0, 0), monkeypatch)
        g_out = injected_grads(model, enc, LossWeights(0, 1, 0, 0), monkeypatch)
        worst_hist = max(worst_hist, float(g_ce[hist].max()) if hist.any() else 0.0)
        worst_prompt = max(worst_prompt, float(g_out[~out].max()))
    return worst_hist, worst_prompt


def test_masking_isolation(fixture_build, monkeypatch):
    cfg, ls, _, _, tok, shards = fixture_build
    encoded = [e for exs in encode_shards(shards, tok).values() for e in exs]
    rng = np.random.RandomState(0)
    picks = [encoded[i] for i in rng.choice(len(encoded), 50, replace=False)]
    with_hist = sum(bool(e.hist_mask.any()) for e in picks)
    t0 = time.time()
    default = build_model(tok.vocab_size, len(ls), seed=1, rank=4, lm_kwargs=TINY_LM)
    hist_gap, prompt_gap = isolation_gaps(default, picks, monkeypatch)
    elapsed = time.time() - t0
    isolated = build_model(tok.vocab_size, len(ls), seed=1, rank=4, lm_kwargs=TINY_LM, isolate_gradients=True)
    iso_hist, iso_prompt = isolation_gaps(isolated, picks, monkeypatch)
    ok = hist_gap == 0.0 and prompt_gap == 0.0 and with_hist >= 25 and elapsed < 60
    record_criterion(1, "masking isolation", ok,
                     f"default model: max |grad| at hist under CE {hist_gap:.3g}, at non-output under L_out "
                     f"{prompt_gap:.3g} ({elapsed:.1f}s); with isolate_gradients: {iso_hist:g} and {iso_prompt:g}; "
                     f"{with_hist}/50 examples have history")
    assert iso_hist == 0.0 and iso_prompt == 0.0
    assert ok


# 2 --------------------------------------------------------------------------

@torch.no_grad()
def test_focal_reduces_to_ce():
    gen = torch.Generator().manual_seed(0)
    worst = 0.0
    for _ in range(1000):
        L = int(torch.randint(2, 20, (1,), generator=gen))
        V = int(torch.randint(2, 40, (1,), generator=gen))
        logits = torch.randn(L, V, generator=gen, dtype=torch.float64) * 3
        ids = torch.randint(0, V, (L,), generator=gen)
        mask = torch.rand(L, generator=gen) < 0.5
        mask[-1] = True
        ce = F.cross_entropy(logits[:-1][mask[1:]], ids[1:][mask[1:]])
        worst = max(worst, abs(float(focal_lm(logits, ids, mask, 0.0)) - float(ce)))

        head = torch.nn.Linear(V, 7).double()
        with torch.no_grad():
            head.weight.copy_(torch.randn(7, V, generator=gen, dtype=torch.float64))
        gold = int(torch.randint(0, 7, (1,), generator=gen))
        last = int(torch.nonzero(mask).max())
        ref = F.cross_entropy(head(logits[last]).unsqueeze(0), torch.tensor([gold]))
        worst = max(worst, abs(float(focal_cls(logits, mask, head, gold, 0.0)) - float(ref)))
    ok = worst <= 1e-9
    record_criterion(2, "focal reduction", ok, f"max abs diff {worst:.2e} over 1000 draws")
    assert ok


# 3 --------------------------------------------------------------------------

def test_function_preservation(lrs_encoded, tokenizer, labelspace):
    probe = lrs_encoded[:6]
    cfg = ToyLMConfig(vocab_size=tokenizer.vocab_size, seed=4, **TINY_LM)
    bare = ToyLM(cfg).eval()
    model = build_model(tokenizer.vocab_size, len(labelspace), seed=4, rank=4, lm_kwargs=TINY_LM).eval()

    def logits(m):
        with torch.no_grad():
            return [m(e).logits for e in probe]

    def gap(a, b):
        return max(float((x - y).abs().max()) for x, y in zip(a, b))

    with torch.no_grad():
        plain = [bare(torch.as_tensor(e.input_ids)).logits for e in probe]
    d_attach = gap(plain, logits(model))

    model.use_conditioning = False
    no_cond = logits(model)
    model.use_conditioning = True
    d_cond = gap(no_cond, logits(model))

    with torch.no_grad():
        for m in ad.adapter_modules(model.base).values():
            m.lora_B.normal_(std=0.05)
    before = logits(model)
    model.grow_rank(8)
    d_grow8 = gap(before, logits(model))
    model.grow_rank(16)
    d_grow16 = gap(before, logits(model))

    mods = ad.adapter_modules(model.base)
    snap = {n: (m.lora_A[:8].clone(), m.lora_B[:, :8].clone()) for n, m in mods.items()}
    model.train()
    opt = torch.optim.AdamW(model.trainable_parameters(), lr=1e-2)
    model.loss(probe[3], LossWeights()).total.backward()
    opt.step()
    model.after_step()
    frozen_ok = all(torch.equal(m.lora_A[:8], snap[n][0]) and torch.equal(m.lora_B[:, :8], snap[n][1])
                    for n, m in mods.items())
    moved = any(not torch.equal(m.lora_A[8:], torch.zeros_like(m.lora_A[8:])) for m in mods.values())

    ok = max(d_attach, d_cond, d_grow8, d_grow16) <= 1e-6 and frozen_ok and moved
    record_criterion(3, "function preservation", ok,
                     f"attach {d_attach:.1e}, conditioning {d_cond:.1e}, grow 4->8 {d_grow8:.1e}, "
                     f"8->16 {d_grow16:.1e}, frozen slice bit-identical {frozen_ok}")
    assert ok


# 4 --------------------------------------------------------------------------

def words(s):
    return len(s.split())


def brute_force_suffix(header, hist, current, budget):
    for drop in range(len(hist) + 1):
        if words("\n".join([header, *hist[drop:], current])) <= budget:
            return hist[drop:]
    return None


def test_budget_oracle(fixture_build):
    rng = np.random.RandomState(7)
    agree = 0
    for _ in range(500):
        hist = [" ".join(["w"] * rng.randint(1, 40)) for _ in range(rng.randint(0, 13))]
        header, current = " ".join(["h"] * rng.randint(1, 20)), " ".join(["c"] * rng.randint(1, 20))
        budget = int(rng.randint(1, 300))
        expected = brute_force_suffix(header, hist, current, budget)
        try:
            got = truncate_to_budget(header, hist, current, budget, words)
        except BudgetTooSmall:
            got = None
        agree += got == expected

    cfg, ls, train, test, tok, shards = fixture_build
    lengths = [tok.count(ex.prompt) for exs in shards.values() for ex in exs]
    for ds in DATASETS:
        for k in (0, 1, 3):
            lengths += [tok.count(ex.prompt) for ex in eval_examples(ds, train, test, tok, cfg, k)]
    over = sum(n > MAX_TOKENS for n in lengths)
    ok = agree == 500 and over == 0
    record_criterion(4, "budget oracle", ok,
                     f"{agree}/500 match brute force; {over} of {len(lengths)} prompts over {MAX_TOKENS}, "
                     f"longest {max(lengths)}")
    assert ok


# 5 --------------------------------------------------------------------------

def test_schedule_echo(two_runs):
    res = two_runs[0]
    stages = res.stages
    problems = []
    if res.build_stats.k != {1: 1, 2: 2, 3: 3}:
        problems.append(f"shots {res.build_stats.to_dict()['k']}")
    expect = {1: (4, 2e-4, "cosine"), 2: (8, 1e-4, "cosine"), 3: (16, 5e-5, "constant")}
    for r in stages:
        sch = r.summary()["schedule"]
        rank, lr, kind = expect[r.stage]
        if (sch["rank"], sch["lr"], sch["lr_schedule"], sch["grad_accum"], sch["grad_clip"],
                sch["checkpoint_every"]) != (rank, lr, kind, 32, 1.0, 25):
            problems.append(f"stage {r.stage} schedule {sch}")
        if r.n_train <= 416:
            problems.append(f"stage {r.stage} has only {r.n_train} training examples")
        steps = r.optimizer_steps
        if steps != sch["epochs"] * math.ceil(r.n_train / 32):
            problems.append(f"stage {r.stage}: {steps} optimizer steps for {r.n_train} examples")
        want = list(range(25, steps + 1, 25)) + ([steps] if steps % 25 else [])
        if [c.step for c in r.checkpoints] != want:
            problems.append(f"stage {r.stage} checkpoints {[c.step for c in r.checkpoints]}")
        if r.best.val_loss != min(c.val_loss for c in r.checkpoints):
            problems.append(f"stage {r.stage} best is not the lowest validation loss")
        lrs = [row["lr"] for row in r.metrics]
        if lrs[0] != pytest.approx(lr, rel=1e-12):
            problems.append(f"stage {r.stage} first lr {lrs[0]}")
        if kind == "constant" and any(x != pytest.approx(lr, rel=1e-12) for x in lrs):
            problems.append(f"stage {r.stage} lr not constant")
        if kind == "cosine":
            curve = [lr * 0.5 * (1 + math.cos(math.pi * i / steps)) for i in range(steps)]
            if lrs != pytest.approx(curve, rel=1e-9, abs=1e-15):
                problems.append(f"stage {r.stage} lr is not cosine")
    ranks = [r.schedule.rank for r in stages]
    if ranks != [4, 8, 16] or res.model.rank != 16:
        problems.append(f"ranks {ranks}")
    ok = not problems
    record_criterion(5, "curriculum schedule echo", ok,
                     "; ".join(problems) or f"steps {[r.optimizer_steps for r in stages]}, ranks {ranks}")
    assert ok, problems


# 6 --------------------------------------------------------------------------

def test_history_efficacy(ablation):
    res, elapsed = ablation
    ok = res.gap >= 0.15 and elapsed < 15 * 60
    record_criterion(6, "history efficacy", ok,
                     f"full {res.full.macro_f1:.3f} vs history-masked {res.masked.macro_f1:.3f}, "
                     f"gap {res.gap:.3f}, {elapsed / 60:.1f} min")
    assert ok


# 7 --------------------------------------------------------------------------

def confusion_macro_f1(gold, pred):
    labels = sorted(set(gold) | set(pred))
    index = {lab: i for i, lab in enumerate(labels)}
    cm = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for g, p in zip(gold, pred):
        cm[index[g], index[p]] += 1
    f1s = []
    for i in range(len(labels)):
        tp = int(cm[i, i])
        fp, fn = int(cm[:, i].sum()) - tp, int(cm[i, :].sum()) - tp
        f1s.append(2 * tp / (2 * tp + fp + fn) if tp else 0.0)
    return sum(f1s) / len(f1s)


def test_macro_f1_oracle():
    rng = np.random.RandomState(3)
    exact = 0
    for _ in range(1000):
        c = rng.randint(1, 6)
        n = rng.randint(1, 51)
        gold = [f"c{v}" for v in rng.randint(0, c, n)]
        pred = [f"c{v}" for v in rng.randint(0, c, n)]
        exact += macro_f1(gold, pred)[0] == confusion_macro_f1(gold, pred)
    ok = exact == 1000
    record_criterion(7, "macro-F1 oracle", ok, f"{exact}/1000 exact")
    assert ok


# 8 --------------------------------------------------------------------------

def test_patching_sanity(ablation, labelspace):
    res, _ = ablation
    model, tok, exs = res.models["full"], res.tokenizer, res.test_examples
    layers = list(range(model.base.n_layers + 1))
    clean = activation_patch(model, tok, exs, labelspace, layers, n_examples=150, corruption="none")
    zero = all((lp.delta_macro_f1, lp.delta_gold, lp.delta_margin, lp.flip_rate) == (0.0, 0.0, 0.0, 0.0)
               for lp in clean.layers)
    shuffled = activation_patch(model, tok, exs, labelspace, layers, n_examples=150, seed=0)
    deltas = {lp.layer: round(lp.delta_macro_f1, 3) for lp in shuffled.layers}
    ok = clean.n == 150 and zero and min(deltas.values()) < 0
    record_criterion(8, "patching sanity", ok,
                     f"clean patch zero on {clean.n} examples: {zero}; shuffled delta macro-F1 by layer {deltas}")
    assert ok


# 9 --------------------------------------------------------------------------

def test_probing_sanity():
    rng = np.random.RandomState(0)
    y = np.repeat(["a", "b"], 150)
    X = rng.randn(300, 8)
    X[y == "b", 0] += 10.0
    separable = probe_features(X, y, folds=5, seed=0).accuracy
    noise = rng.randn(400, 8)
    y_shuf = rng.permutation(np.repeat(["a", "b"], 200))
    shuffled = probe_features(noise, y_shuf, folds=5, seed=0).accuracy
    same = np.array_equal(fold_assignment(y, 5, 11), fold_assignment(y, 5, 11))
    ok = separable >= 0.99 and abs(shuffled - 0.5) <= 0.1 and same
    record_criterion(9, "probing sanity", ok,
                     f"separable {separable:.3f}, shuffled {shuffled:.3f}, folds deterministic {same}")
    assert ok


# 10 -------------------------------------------------------------------------

def test_end_to_end_determinism(two_runs):
    a, b = two_runs
    same = set(a.reports) == set(b.reports) and all(
        a.reports[ds].to_dict() == b.reports[ds].to_dict() for ds in a.reports)
    hashes = a.model.params_hash() == b.model.params_hash()
    ok = same and hashes and len(a.reports) == 3
    record_criterion(10, "end-to-end determinism", ok,
                     f"{len(a.reports)} identical reports: {same}; identical weights: {hashes}")
    assert ok
