"""Curriculum construction: rolling histories, budget fitting, demos, prompt rendering."""
from __future__ import annotations

import hashlib
import random
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import Callable, Iterable, Mapping, Sequence

from .corpus import Timeline, TimelineItem
from .errors import BudgetTooSmall, IndexOutOfRange, NotACurriculumDataset
from .tokenspace import CONTROL_TOKENS, EOS_TOKEN, PAD_TOKEN

MAX_TOKENS = 2048
TEMPLATE_VERSION = "v1"
ARROW = "→"

ITEM_NOUN = {"annomi": "Utterance", "lrs": "Post", "talklife": "Post", "reddit": "Post", "cmv": "Conversation"}


@dataclass(frozen=True)
class CurriculumStage:
    stage: int
    dataset_id: str
    k: int
    rank: int
    lr: float
    lr_schedule: str


DEFAULT_STAGES = (
    CurriculumStage(1, "annomi", 1, 4, 2e-4, "cosine"),
    CurriculumStage(2, "lrs", 2, 8, 1e-4, "cosine"),
    CurriculumStage(3, "talklife", 3, 16, 5e-5, "constant"),
)


def load_instruction(dataset_id: str, version: str = TEMPLATE_VERSION) -> str:
    path = resources.files("lift") / "templates" / version / f"{dataset_id}.txt"
    return path.read_text(encoding="utf-8").strip()


_ESCAPES = [(t, t.replace("<", "‹", 1)) for t in (*CONTROL_TOKENS, EOS_TOKEN, PAD_TOKEN)]


def clean_text(text: str) -> str:
    """Collapse whitespace and defuse control-token look-alikes in user text."""
    text = " ".join(text.split())
    if "<" in text:
        for tok, safe in _ESCAPES:
            text = text.replace(tok, safe)
    return text


@dataclass(frozen=True)
class HistoryLine:
    rel: int
    text: str
    label: str | None = None
    role: str | None = None

    def render(self, with_label: bool = True) -> str:
        body = clean_text(self.text)
        if self.role and self.role != "client":
            body = f"[{self.role}] {body}"
        line = f"t-{self.rel}: {body}"
        if with_label and self.label:
            line += f" {ARROW} {self.label}"
        return line


@dataclass(frozen=True)
class Demo:
    dataset_id: str
    sequence_key: str
    lines: tuple[tuple[str, str], ...]
    global_label_id: int

    def render(self, number: int) -> str:
        noun = ITEM_NOUN.get(self.dataset_id, "Post")
        rows = [f"Example {number}:"]
        rows += [f"{noun} {i}: {clean_text(t)} {ARROW} {lab}" for i, (t, lab) in enumerate(self.lines, 1)]
        return "\n".join(rows)


@dataclass
class PromptExample:
    stage: int
    dataset_id: str
    sequence_key: str
    k_requested: int
    k_actual: int
    instruction_text: str
    demos: list[Demo]
    history_lines: list[HistoryLine]
    current_text: str
    response_text: str
    prompt: str
    spans: dict[str, tuple[int, int]]
    hist_line_spans: list[tuple[int, int, int]]
    global_label_id: int
    timestep_id: int
    history_labels: bool = True

    @property
    def response(self) -> str:
        return self.response_text

    @property
    def demo_texts(self) -> list[str]:
        return [d.render(i) for i, d in enumerate(self.demos, 1)]

    @property
    def full_text(self) -> str:
        return self.prompt + " " + self.response_text

    def to_record(self) -> dict:
        return {
            "stage": self.stage,
            "dataset": self.dataset_id,
            "sequence_key": self.sequence_key,
            "k_requested": self.k_requested,
            "k_actual": self.k_actual,
            "prompt": self.prompt,
            "response": self.response_text,
            "spans": {k: list(v) for k, v in self.spans.items()},
            "hist_line_spans": [list(x) for x in self.hist_line_spans],
            "global_label_id": self.global_label_id,
            "timestep_id": self.timestep_id,
            "history_labels": self.history_labels,
            "instruction": self.instruction_text,
            "demos": [asdict(d) for d in self.demos],
            "history": [asdict(h) for h in self.history_lines],
            "current": self.current_text,
        }

    @classmethod
    def from_record(cls, r: Mapping) -> "PromptExample":
        demos = [Demo(d["dataset_id"], d["sequence_key"], tuple(tuple(x) for x in d["lines"]), d["global_label_id"]) for d in r["demos"]]
        hist = [HistoryLine(**h) for h in r["history"]]
        return cls(
            stage=r["stage"], dataset_id=r["dataset"], sequence_key=r["sequence_key"],
            k_requested=r["k_requested"], k_actual=r["k_actual"], instruction_text=r["instruction"],
            demos=demos, history_lines=hist, current_text=r["current"], response_text=r["response"],
            prompt=r["prompt"], spans={k: tuple(v) for k, v in r["spans"].items()},
            hist_line_spans=[tuple(x) for x in r["hist_line_spans"]], global_label_id=r["global_label_id"],
            timestep_id=r["timestep_id"], history_labels=r.get("history_labels", True),
        )


# -- histories ----------------------------------------------------------------

def build_history(timeline: Timeline | Sequence[TimelineItem], index: int, keep_roles: Iterable[str] | None = None) -> list[HistoryLine]:
    """Items before ``index``, oldest first, tagged ``t-m`` .. ``t-1``.

    ``keep_roles`` optionally filters history items by speaker role (items
    without a role are always kept).
    """
    items = timeline.items if isinstance(timeline, Timeline) else timeline
    if not 0 <= index < len(items):
        raise IndexOutOfRange(f"index {index} outside timeline of length {len(items)}")
    past = list(items[:index])
    if keep_roles is not None:
        keep = set(keep_roles)
        past = [it for it in past if it.speaker_role is None or it.speaker_role in keep]
    m = len(past)
    return [
        HistoryLine(m - j, it.text, it.local_label or None, it.speaker_role)
        for j, it in enumerate(past)
    ]


def _compose(header: str, history: Sequence[str], current: str) -> str:
    return "\n".join([header, *history, current])


def truncate_to_budget(header: str, history: Sequence, current: str, budget: int,
                       token_len_fn: Callable[[str], int]) -> list:
    """Drop history items oldest-first until the composed text fits ``budget``.

    Returns the longest suffix of ``history`` that fits. Items may be strings
    or objects whose ``str()`` is the rendered line. Token length is assumed
    monotone in the number of kept items, which lets the search bisect.
    """
    if budget <= 0:
        raise BudgetTooSmall("budget must be positive")
    lines = [str(h) for h in history]

    def fits(n_drop: int) -> bool:
        return token_len_fn(_compose(header, lines[n_drop:], current)) <= budget

    if not fits(len(lines)):
        raise BudgetTooSmall(f"header and current item alone exceed budget {budget}")
    if fits(0):
        return list(history)
    lo, hi = 0, len(lines)  # fits(hi) is True, fits(lo) is False
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if fits(mid):
            hi = mid
        else:
            lo = mid
    return list(history[hi:])


# -- stages and demos ---------------------------------------------------------

def assign_stage(dataset_id: str, stages: Sequence[CurriculumStage] = DEFAULT_STAGES) -> tuple[int, int]:
    for st in stages:
        if st.dataset_id == dataset_id:
            return st.stage, st.k
    raise NotACurriculumDataset(f"{dataset_id!r} is evaluation-only")


def demo_pool(timelines: Iterable[Timeline], window: int = 3) -> list[Demo]:
    """One compact labeled mini-timeline per labeled item, ending at that item."""
    pool = []
    for tl in timelines:
        for i, it in enumerate(tl.items):
            if not it.labeled:
                continue
            span = [x for x in tl.items[max(0, i - window + 1): i + 1] if x.labeled]
            pool.append(Demo(tl.dataset_id, tl.sequence_key, tuple((x.text, x.local_label) for x in span), it.global_label_id))
    return pool


def sample_demos(pool: Sequence[Demo], k: int, seed: int, exclude_sequence_key: str | None = None,
                 stratified: bool = False) -> list[Demo]:
    """Sample up to ``k`` demos uniformly without replacement.

    Demos from the query's own timeline are never returned. With
    ``stratified`` the draw cycles through gold labels.
    """
    if k <= 0:
        return []
    cands = [d for d in pool if d.sequence_key != exclude_sequence_key]
    rng = random.Random(seed)
    if not stratified:
        if len(cands) <= k:
            out = list(cands)
            rng.shuffle(out)
            return out
        return rng.sample(cands, k)
    by_label: dict[int, list[Demo]] = {}
    for d in cands:
        by_label.setdefault(d.global_label_id, []).append(d)
    for v in by_label.values():
        rng.shuffle(v)
    order = sorted(by_label)
    rng.shuffle(order)
    out: list[Demo] = []
    while len(out) < k and any(by_label.values()):
        for lab in order:
            if by_label[lab] and len(out) < k:
                out.append(by_label[lab].pop())
    return out


def example_seed(seed: int, sequence_key: str, index: int) -> int:
    h = hashlib.sha256(f"{seed}:{sequence_key}:{index}".encode()).digest()
    return int.from_bytes(h[:8], "little")


# -- rendering ----------------------------------------------------------------

class _Writer:
    def __init__(self):
        self.parts: list[str] = []
        self.pos = 0

    def add(self, s: str) -> tuple[int, int]:
        start = self.pos
        self.parts.append(s)
        self.pos += len(s.encode("utf-8"))
        return start, self.pos

    def text(self) -> str:
        return "".join(self.parts)


def render_prompt(instruction: str, demos: Sequence[Demo], history: Sequence[HistoryLine], current: str, gold: str,
                  *, history_labels: bool = True, stage: int = 0, dataset_id: str = "", sequence_key: str = "",
                  global_label_id: int = 0, timestep_id: int = 0, k_requested: int | None = None) -> PromptExample:
    """Render the instruction / few-shot / query / output template with byte spans.

    Spans cover region contents only (tags excluded) and index into
    ``prompt + " " + response``.
    """
    w = _Writer()
    spans: dict[str, tuple[int, int]] = {}
    w.add("<instruction> ")
    spans["instruction"] = w.add(clean_text(instruction))
    w.add(" </instruction>\n<few-shot> ")
    spans["fewshot"] = w.add("\n\n".join(d.render(i) for i, d in enumerate(demos, 1)))
    w.add(" </few-shot>\n<query> <hist> ")
    hist_start = w.pos
    line_spans = []
    for j, h in enumerate(history):
        if j:
            w.add("\n")
        s, e = w.add(h.render(history_labels))
        line_spans.append((h.rel, s, e))
    spans["hist"] = (hist_start, w.pos)
    w.add(" </hist> <curr> ")
    spans["curr"] = w.add(clean_text(current))
    w.add(" </curr> </query>\n<output>")
    prompt = w.text()
    out_start = w.pos + 1
    spans["output"] = (out_start, out_start + len(gold.encode("utf-8")))
    return PromptExample(
        stage=stage, dataset_id=dataset_id, sequence_key=sequence_key,
        k_requested=len(demos) if k_requested is None else k_requested, k_actual=len(demos),
        instruction_text=instruction, demos=list(demos), history_lines=list(history), current_text=current,
        response_text=gold, prompt=prompt, spans=spans, hist_line_spans=line_spans,
        global_label_id=global_label_id, timestep_id=timestep_id, history_labels=history_labels,
    )


def rerender(ex: PromptExample, demos: Sequence[Demo] | None = None, history: Sequence[HistoryLine] | None = None) -> PromptExample:
    return render_prompt(
        ex.instruction_text, ex.demos if demos is None else demos,
        ex.history_lines if history is None else history, ex.current_text, ex.response_text,
        history_labels=ex.history_labels, stage=ex.stage, dataset_id=ex.dataset_id, sequence_key=ex.sequence_key,
        global_label_id=ex.global_label_id, timestep_id=ex.timestep_id, k_requested=ex.k_requested,
    )


def fit_demos(ex: PromptExample, budget: int, token_len_fn: Callable[[str], int]) -> tuple[PromptExample | None, int]:
    """Remove demos (last sampled first) until the prompt fits.

    Returns ``(example, n_removed)``; example is ``None`` when even the
    zero-demo prompt is over budget.
    """
    removed = 0
    demos = list(ex.demos)
    cur = ex
    while token_len_fn(cur.prompt) > budget and demos:
        demos.pop()
        removed += 1
        cur = rerender(ex, demos=demos)
    if token_len_fn(cur.prompt) > budget:
        return None, removed
    return cur, removed


def header_block(instruction: str) -> str:
    return f"<instruction> {clean_text(instruction)} </instruction>\n<few-shot>  </few-shot>\n<query> <hist>"


def current_block(current: str) -> str:
    return f"</hist> <curr> {clean_text(current)} </curr> </query>\n<output>"


# -- whole-build driver -------------------------------------------------------

@dataclass
class BuildStats:
    examples: dict[int, int] = field(default_factory=dict)
    dropped: dict[int, int] = field(default_factory=dict)
    truncated_histories: dict[int, int] = field(default_factory=dict)
    demos_removed: dict[int, int] = field(default_factory=dict)
    mean_prompt_tokens: dict[int, float] = field(default_factory=dict)
    max_prompt_tokens: dict[int, int] = field(default_factory=dict)
    k: dict[int, int] = field(default_factory=dict)
    datasets: dict[int, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {k: {str(s): v for s, v in d.items()} for k, d in asdict(self).items()}


def build_timeline_examples(timeline: Timeline, *, stage: int, k: int, instruction: str, pool: Sequence[Demo],
                            seed: int, budget: int, token_len_fn: Callable[[str], int], history_labels: bool = True,
                            keep_roles: Iterable[str] | None = None, stratified: bool = False,
                            stats: BuildStats | None = None) -> list[PromptExample]:
    """All examples for one timeline (one per labeled item), in temporal order."""
    out = []
    header = header_block(instruction)
    for i, item in enumerate(timeline.items):
        if not item.labeled:
            continue
        reserve = token_len_fn(item.local_label) + 1  # response + eos share the budget
        prompt_budget = budget - reserve
        history = build_history(timeline, i, keep_roles)
        rendered = [h.render(history_labels) for h in history]
        try:
            kept = truncate_to_budget(header, rendered, current_block(item.text), prompt_budget, token_len_fn)
        except BudgetTooSmall:
            if stats is not None:
                stats.dropped[stage] = stats.dropped.get(stage, 0) + 1
            continue
        if len(kept) < len(history) and stats is not None:
            stats.truncated_histories[stage] = stats.truncated_histories.get(stage, 0) + 1
        history = history[len(history) - len(kept):]
        demos = sample_demos(pool, k, example_seed(seed, timeline.sequence_key, i), timeline.sequence_key, stratified)
        ex = render_prompt(instruction, demos, history, item.text, item.local_label, history_labels=history_labels,
                           stage=stage, dataset_id=timeline.dataset_id, sequence_key=timeline.sequence_key,
                           global_label_id=item.global_label_id, timestep_id=item.index_in_timeline, k_requested=k)
        ex, removed = fit_demos(ex, prompt_budget, token_len_fn)
        if stats is not None:
            stats.demos_removed[stage] = stats.demos_removed.get(stage, 0) + removed
        if ex is None:
            if stats is not None:
                stats.dropped[stage] = stats.dropped.get(stage, 0) + 1
            continue
        out.append(ex)
    return out


def build_curriculum(corpora: Mapping[str, Sequence[Timeline]], token_len_fn: Callable[[str], int], *,
                     budget: int = MAX_TOKENS, seed: int = 17, stages: Sequence[CurriculumStage] = DEFAULT_STAGES,
                     history_labels: bool = True, demo_window: int = 3, stratified: bool = False,
                     instructions: Mapping[str, str] | None = None, keep_roles: Iterable[str] | None = None,
                     only_stages: Iterable[int] | None = None) -> tuple[dict[int, list[PromptExample]], BuildStats]:
    """Build per-stage shards from training timelines.

    Demos for a stage come from the same stage's timelines (never the query's
    own timeline).
    """
    stats = BuildStats()
    shards: dict[int, list[PromptExample]] = {}
    wanted = set(only_stages) if only_stages is not None else None
    for st in stages:
        if wanted is not None and st.stage not in wanted:
            continue
        timelines = corpora.get(st.dataset_id, [])
        instruction = (instructions or {}).get(st.dataset_id) or load_instruction(st.dataset_id)
        pool = demo_pool(timelines, demo_window)
        shard: list[PromptExample] = []
        for tl in timelines:
            shard += build_timeline_examples(
                tl, stage=st.stage, k=st.k, instruction=instruction, pool=pool, seed=seed, budget=budget,
                token_len_fn=token_len_fn, history_labels=history_labels, keep_roles=keep_roles,
                stratified=stratified, stats=stats)
        shards[st.stage] = shard
        lens = [token_len_fn(ex.prompt) for ex in shard]
        stats.examples[st.stage] = len(shard)
        stats.k[st.stage] = st.k
        stats.datasets[st.stage] = st.dataset_id
        stats.mean_prompt_tokens[st.stage] = round(sum(lens) / len(lens), 2) if lens else 0.0
        stats.max_prompt_tokens[st.stage] = max(lens) if lens else 0
        for d in (stats.dropped, stats.truncated_histories, stats.demos_removed):
            d.setdefault(st.stage, 0)
    return shards, stats


def build_eval_examples(timelines: Sequence[Timeline], pool: Sequence[Demo], k: int, seed: int,
                        token_len_fn: Callable[[str], int], *, budget: int = MAX_TOKENS, history_labels: bool = True,
                        instruction: str | None = None, stratified: bool = False) -> list[PromptExample]:
    """k-shot prompts for held-out timelines, demos drawn from ``pool``."""
    out = []
    for tl in timelines:
        try:
            stage, _ = assign_stage(tl.dataset_id)
        except NotACurriculumDataset:
            stage = 0
        out += build_timeline_examples(
            tl, stage=stage, k=k, instruction=instruction or load_instruction(tl.dataset_id), pool=pool, seed=seed,
            budget=budget, token_len_fn=token_len_fn, history_labels=history_labels, stratified=stratified)
    return out


def formatting_words(max_rel: int = 256) -> list[str]:
    """Words the renderer itself emits, so tokenizers can keep them atomic."""
    words = [ARROW, "Example", "?"] + [f"t-{j}:" for j in range(1, max_rel + 1)] + [f"{j}:" for j in range(1, 65)]
    words += list(ITEM_NOUN.values()) + ["[therapist]", "[client]"]
    return words
