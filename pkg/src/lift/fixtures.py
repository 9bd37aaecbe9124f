"""Synthetic, schema-compatible corpora.

Real corpora are licensed or large; these generators produce raw records in
each dataset's own field layout so the full pipeline runs offline. Shapes
(timelines, posts, words per post) can follow published dataset statistics,
and one task has a label that is a known function of the history.
"""
from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .corpus import DATASET_LABELS, GlobalLabelSpace, Timeline, group_and_sort, standardize, write_jsonl

_ONSETS = ("b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z")
_VOWELS = ("a", "e", "i", "o", "u")
LEXICON = tuple(o1 + v1 + o2 + v2 for o1 in _ONSETS for v1 in _VOWELS for o2 in _ONSETS[:4] for v2 in _VOWELS[:2])

STANCES = ("support", "deny")
STANCE_TASK_INSTRUCTION = "Does the stance switch? Answer Sw or N-Sw"
EPOCH = 1_577_836_800  # 2020-01-01T00:00:00Z


@dataclass(frozen=True)
class Shape:
    timelines: int
    posts: int
    words_per_post: float
    label_probs: tuple[float, ...]  # aligned with DATASET_LABELS[dataset]


# Dataset statistics (timelines, total posts, mean tokens per post, event rate).
# AnnoMI is grouped into 10-utterance conversations; its label probs cover
# client turns only.
PUBLISHED_SHAPES: dict[str, Shape] = {
    "annomi": Shape(673, 6725, 15.52, (0.2, 0.167, 0.633)),
    "lrs": Shape(274, 4239, 14.0, (0.5, 0.5)),
    "talklife": Shape(500, 18702, 22.2, (0.23, 0.11, 0.66)),
    "reddit": Shape(255, 6195, 106.3, (0.22, 0.11, 0.67)),
    "cmv": Shape(9456, 48570, 153.0, (0.85, 0.15)),
}


def _lengths(rng: np.random.RandomState, n_timelines: int, n_posts: int, min_len: int = 2) -> np.ndarray:
    """Timeline lengths that sum exactly to ``n_posts``."""
    spare = n_posts - n_timelines * min_len
    if spare < 0:
        raise ValueError("too few posts for the requested timelines")
    return rng.multinomial(spare, np.full(n_timelines, 1.0 / n_timelines)) + min_len


def _text(rng: np.random.RandomState, mean_words: float) -> str:
    n = max(1, int(rng.poisson(mean_words)))
    return " ".join(LEXICON[i] for i in rng.randint(len(LEXICON), size=n))


def _iso(t: int) -> str:
    return np.datetime_as_string(np.datetime64(t, "s")) + "Z"


def synthetic_records(dataset_id: str, *, timelines: int | None = None, posts_per_timeline: float | None = None,
                      words_per_post: float | None = None, seed: int = 0) -> list[dict]:
    """Raw records for ``dataset_id`` in that dataset's field layout.

    Unspecified sizes follow :data:`PUBLISHED_SHAPES`; giving only ``timelines``
    keeps the published posts-per-timeline ratio.
    """
    shape = PUBLISHED_SHAPES[dataset_id]
    n_tl = shape.timelines if timelines is None else timelines
    ppt = shape.posts / shape.timelines if posts_per_timeline is None else posts_per_timeline
    n_posts = shape.posts if timelines is None and posts_per_timeline is None else int(round(n_tl * ppt))
    wpp = shape.words_per_post if words_per_post is None else words_per_post
    rng = np.random.RandomState(seed)
    labels = DATASET_LABELS[dataset_id]
    probs = np.asarray(shape.label_probs)
    lengths = _lengths(rng, n_tl, n_posts)
    authors = [f"u{i:04d}" for i in range(max(4, n_tl // 3))]
    topics = [f"topic{i:02d}" for i in range(8)]
    out = []
    for t, m in enumerate(lengths):
        key = f"{dataset_id}-{t:05d}"
        start = EPOCH + int(rng.randint(0, 300 * 86400))
        topic = topics[rng.randint(len(topics))]
        for i in range(m):
            ts = start + i * 3600 + int(rng.randint(0, 3000))
            lab = labels[rng.choice(len(labels), p=probs)]
            text = _text(rng, wpp)
            if dataset_id == "annomi":
                # one topic per conversation, so timelines keep the published posts-per-timeline mean
                role = "therapist" if i % 2 == 0 else "client"
                rec = {"transcript_id": key, "topic": f"{topic}-{t:05d}", "utterance_id": i, "interlocutor": role,
                       "utterance_text": text}
                if role == "client":
                    rec["client_talk_type"] = lab.lower()
            elif dataset_id == "lrs":
                rec = {"timeline_id": key, "tweet": text, "stance_switch": "1" if lab == "Sw" else "0",
                       "timestamp": ts}
            elif dataset_id == "cmv":
                author = authors[rng.randint(len(authors))]
                rec = {"thread_id": key, "body": text, "delta": lab, "created_utc": ts, "author": author,
                       "topic": topic}
            else:
                rec = {"timeline_id": key, "text": text, "label": lab, "timestamp": _iso(ts)}
            out.append(rec)
    return out


def synthetic_timelines(dataset_id: str, labelspace: GlobalLabelSpace | None = None, **kw) -> list[Timeline]:
    items = [standardize(r, dataset_id, labelspace) for r in synthetic_records(dataset_id, **kw)]
    return group_and_sort(items)


def stance_task_records(timelines: int = 200, posts_per_timeline: int = 4, filler_words: int = 1,
                        seed: int = 0) -> list[dict]:
    """LRS-style task whose label is a function of the history.

    Each post opens with a stance word; the label is ``Sw`` exactly when that
    word differs from the previous post's (the first post is ``N-Sw``).
    Stances flip with probability 1/2, so classes are balanced apart from
    first posts.
    """
    rng = np.random.RandomState(seed)
    out = []
    for t in range(timelines):
        key = f"stance-{t:04d}"
        prev = None
        for i in range(posts_per_timeline):
            stance = STANCES[rng.randint(2)]
            words = [stance] + [LEXICON[j] for j in rng.randint(len(LEXICON), size=filler_words)]
            label = "1" if prev is not None and stance != prev else "0"
            out.append({"timeline_id": key, "tweet": " ".join(words), "stance_switch": label,
                        "timestamp": EPOCH + t * 86400 + i * 60})
            prev = stance
    return out


def stance_task_timelines(labelspace: GlobalLabelSpace | None = None, **kw) -> list[Timeline]:
    items = [standardize(r, "lrs", labelspace) for r in stance_task_records(**kw)]
    return group_and_sort(items)


def stance_rule(timeline: Timeline, index: int) -> str:
    """The label the stance task assigns to item ``index`` (an independent oracle)."""
    if index == 0:
        return "N-Sw"
    cur = timeline.items[index].text.split()[0]
    prev = timeline.items[index - 1].text.split()[0]
    return "Sw" if cur != prev else "N-Sw"


# -- bundled package data -----------------------------------------------------

BUNDLED_SIZES = {
    "annomi": dict(timelines=40, posts_per_timeline=10),
    "lrs": dict(timelines=30, posts_per_timeline=15.5),
    "talklife": dict(timelines=16, posts_per_timeline=37.4),
    "reddit": dict(timelines=8, posts_per_timeline=24.3),
    "cmv": dict(timelines=40, posts_per_timeline=5.1),
}
BUNDLED_SEED = 2024


def bundled_records() -> dict[str, list[dict]]:
    out = {ds: synthetic_records(ds, seed=BUNDLED_SEED + i, **BUNDLED_SIZES[ds]) for i, ds in enumerate(BUNDLED_SIZES)}
    out["stance_task"] = stance_task_records(seed=BUNDLED_SEED)
    return out


def write_bundled(directory) -> dict[str, int]:
    """Regenerate the JSONL fixtures shipped in ``lift/data``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    return {name: write_jsonl(directory / f"{name}.jsonl", rows) for name, rows in bundled_records().items()}


def bundled_path(name: str) -> Path:
    path = resources.files("lift") / "data" / f"{name}.jsonl"
    if not path.is_file():
        raise FileNotFoundError(f"no bundled fixture {name!r}")
    return Path(str(path))
