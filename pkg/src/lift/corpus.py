"""Timeline schema, global label space and per-dataset ingestion adapters."""
from __future__ import annotations

import hashlib
import json
import random
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

from .errors import EmptyText, UnknownLabel

DATASETS = ("annomi", "lrs", "talklife", "reddit", "cmv")
NULL_LABEL = "<null>"

# Declared label set per dataset. Global ids are assigned alphabetically within
# each dataset, datasets in the order above, after the reserved NULL id 0.
DATASET_LABELS: dict[str, tuple[str, ...]] = {
    "annomi": ("Change", "Sustain", "Neutral"),
    "lrs": ("Sw", "N-Sw"),
    "talklife": ("IS", "IE", "O"),
    "reddit": ("IS", "IE", "O"),
    "cmv": ("0", "1"),
}

# Surface forms seen in raw files that map onto a declared label.
LABEL_ALIASES: dict[str, dict[str, str]] = {
    "annomi": {"change": "Change", "sustain": "Sustain", "neutral": "Neutral"},
    "lrs": {"1": "Sw", "0": "N-Sw", "switch": "Sw", "no-switch": "N-Sw", "n-sw": "N-Sw", "sw": "Sw"},
    "talklife": {"is": "IS", "ie": "IE", "o": "O"},
    "reddit": {"is": "IS", "ie": "IE", "o": "O", "s": "IS", "e": "IE"},
    "cmv": {"true": "1", "false": "0"},
}


@dataclass(frozen=True)
class TimelineItem:
    dataset_id: str
    sequence_key: str
    timestamp: float | int
    index_in_timeline: int
    text: str
    local_label: str
    global_label_id: int
    speaker_role: str | None = None
    topic: str | None = None
    author: str | None = None

    @property
    def labeled(self) -> bool:
        return self.global_label_id != 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TimelineItem":
        return cls(**{k: d.get(k) for k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class Timeline:
    dataset_id: str
    sequence_key: str
    items: tuple[TimelineItem, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i]

    def __iter__(self) -> Iterator[TimelineItem]:
        return iter(self.items)

    def to_dict(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "sequence_key": self.sequence_key,
            "items": [it.to_dict() for it in self.items],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Timeline":
        return cls(d["dataset_id"], d["sequence_key"], tuple(TimelineItem.from_dict(x) for x in d["items"]))


class GlobalLabelSpace:
    """Bijection between ``(dataset_id, local_label)`` pairs and small integer ids.

    Id 0 is reserved for NULL (unlabeled items, non-output tokens). An optional
    alias table maps a pair onto another pair's id, e.g. to collapse Reddit
    labels onto TalkLife's.
    """

    def __init__(self, entries: Sequence[tuple[str, str]], aliases: Mapping[tuple[str, str], tuple[str, str]] | None = None):
        self.entries: list[tuple[str, str]] = [("", NULL_LABEL)] + [tuple(e) for e in entries]
        if len(set(self.entries)) != len(self.entries):
            raise ValueError("duplicate label entries")
        self._ids = {e: i for i, e in enumerate(self.entries)}
        self.aliases = {tuple(k): tuple(v) for k, v in (aliases or {}).items()}
        for src, dst in self.aliases.items():
            if dst not in self._ids:
                raise ValueError(f"alias target {dst} is not a declared label")

    @classmethod
    def default(cls, collapse_reddit: bool = False) -> "GlobalLabelSpace":
        entries = [(ds, lab) for ds in DATASETS for lab in sorted(DATASET_LABELS[ds])]
        aliases = None
        if collapse_reddit:
            aliases = {("reddit", lab): ("talklife", lab) for lab in DATASET_LABELS["reddit"]}
        return cls(entries, aliases)

    def __len__(self) -> int:
        return len(self.entries)

    def id_of(self, dataset_id: str, label: str) -> int:
        key = (dataset_id, label)
        key = self.aliases.get(key, key)
        try:
            return self._ids[key]
        except KeyError:
            raise UnknownLabel(f"{label!r} is not a declared label of {dataset_id!r}") from None

    def reverse(self, gid: int) -> tuple[str, str]:
        return self.entries[gid]

    def labels_of(self, dataset_id: str) -> list[str]:
        return [lab for ds, lab in self.entries if ds == dataset_id]

    def ids_of(self, dataset_id: str) -> list[int]:
        return [self.id_of(dataset_id, lab) for lab in self.labels_of(dataset_id)]

    def to_dict(self) -> dict:
        return {
            "entries": [list(e) for e in self.entries[1:]],
            "aliases": [[list(k), list(v)] for k, v in self.aliases.items()],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "GlobalLabelSpace":
        return cls([tuple(e) for e in d["entries"]], {tuple(k): tuple(v) for k, v in d.get("aliases", [])})

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "GlobalLabelSpace":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def __eq__(self, other) -> bool:
        return isinstance(other, GlobalLabelSpace) and self.to_dict() == other.to_dict()


@dataclass(frozen=True)
class DatasetAdapter:
    """Field names for one raw dataset format; the first present name wins."""

    dataset_id: str
    text: tuple[str, ...] = ("text",)
    label: tuple[str, ...] = ("label",)
    key: tuple[str, ...] = ("sequence_key", "timeline_id")
    timestamp: tuple[str, ...] = ("timestamp", "time", "date")
    role: tuple[str, ...] = ()
    topic: tuple[str, ...] = ()
    author: tuple[str, ...] = ()
    # Records whose role is in this set carry no label (AnnoMI therapist turns).
    unlabeled_roles: frozenset = frozenset()


ADAPTERS: dict[str, DatasetAdapter] = {
    "annomi": DatasetAdapter(
        "annomi",
        text=("utterance_text", "text"),
        label=("client_talk_type", "label"),
        key=("topic", "transcript_id", "sequence_key"),
        timestamp=("timestamp", "utterance_id"),
        role=("interlocutor", "speaker_role"),
        topic=("topic",),
        unlabeled_roles=frozenset({"therapist"}),
    ),
    "lrs": DatasetAdapter("lrs", text=("text", "tweet"), label=("label", "stance_switch"), key=("timeline_id", "sequence_key")),
    "talklife": DatasetAdapter("talklife", text=("text", "content"), label=("label",), key=("timeline_id", "user_id", "sequence_key")),
    "reddit": DatasetAdapter("reddit", text=("text", "content"), label=("label",), key=("timeline_id", "user_id", "sequence_key")),
    "cmv": DatasetAdapter(
        "cmv",
        text=("text", "body"),
        label=("label", "delta"),
        key=("thread_id", "sequence_key"),
        timestamp=("timestamp", "created_utc"),
        topic=("topic",),
        author=("author",),
    ),
}


def _first(record: Mapping, names: Iterable[str]):
    for name in names:
        if name in record and record[name] is not None and record[name] != "":
            return record[name]
    return None


def parse_timestamp(value) -> float | int | None:
    if value is None:
        return None
    if isinstance(value, bool):
        raise ValueError(f"bad timestamp {value!r}")
    if isinstance(value, (int, float)):
        return value
    s = str(value).strip()
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        pass
    ts = datetime.fromisoformat(s.replace("Z", "+00:00")).timestamp()
    return int(ts) if ts == int(ts) else ts


def resolve_label(dataset_id: str, raw_label) -> str:
    lab = str(raw_label).strip()
    if lab in DATASET_LABELS[dataset_id]:
        return lab
    alias = LABEL_ALIASES.get(dataset_id, {}).get(lab.lower())
    if alias is None:
        raise UnknownLabel(f"{raw_label!r} is not a label of {dataset_id!r}")
    return alias


def standardize(raw_record: Mapping, dataset_id: str, labelspace: GlobalLabelSpace | None = None, ordinal: int = 0) -> TimelineItem:
    """Map one raw record onto a :class:`TimelineItem`.

    ``ordinal`` is the record's position within its sequence in the input file;
    it becomes the timestamp when the record has none.
    """
    if dataset_id not in ADAPTERS:
        raise ValueError(f"unknown dataset {dataset_id!r}")
    adapter = ADAPTERS[dataset_id]
    labelspace = labelspace or GlobalLabelSpace.default()

    text = _first(raw_record, adapter.text)
    if text is None or not str(text).strip():
        raise EmptyText(f"record without text in {dataset_id}")
    role = _first(raw_record, adapter.role)
    role = str(role).lower() if role is not None else None
    raw_label = _first(raw_record, adapter.label)

    if role in adapter.unlabeled_roles and raw_label is None:
        local, gid = "", 0
    else:
        if raw_label is None:
            raise UnknownLabel(f"record without label in {dataset_id}")
        local = resolve_label(dataset_id, raw_label)
        gid = labelspace.id_of(dataset_id, local)

    key = _first(raw_record, adapter.key)
    ts = parse_timestamp(_first(raw_record, adapter.timestamp))
    topic = _first(raw_record, adapter.topic)
    author = _first(raw_record, adapter.author)
    return TimelineItem(
        dataset_id=dataset_id,
        sequence_key=str(key) if key is not None else "default",
        timestamp=ordinal if ts is None else ts,
        index_in_timeline=0,
        text=str(text).strip(),
        local_label=local,
        global_label_id=gid,
        speaker_role=role,
        topic=str(topic) if topic is not None else None,
        author=str(author) if author is not None else None,
    )


def group_and_sort(items: Sequence[TimelineItem]) -> list[Timeline]:
    """Partition by sequence key and stable-sort each group by timestamp.

    Timelines come back in order of first appearance of their key.
    """
    groups: OrderedDict[tuple[str, str], list[TimelineItem]] = OrderedDict()
    for it in items:
        groups.setdefault((it.dataset_id, it.sequence_key), []).append(it)
    out = []
    for (ds, key), members in groups.items():
        ordered = sorted(members, key=lambda it: it.timestamp)  # sorted() is stable
        out.append(Timeline(ds, key, tuple(replace(it, index_in_timeline=i) for i, it in enumerate(ordered))))
    return out


def iter_jsonl(path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


def write_jsonl(path, rows: Iterable[Mapping]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
            n += 1
    return n


def load_raw(path, dataset_id: str, labelspace: GlobalLabelSpace | None = None) -> list[Timeline]:
    """Read a raw JSONL file and return sorted timelines."""
    labelspace = labelspace or GlobalLabelSpace.default()
    adapter = ADAPTERS[dataset_id]
    seen: dict[str, int] = {}
    items = []
    for rec in iter_jsonl(path):
        key = str(_first(rec, adapter.key) or "default")
        items.append(standardize(rec, dataset_id, labelspace, ordinal=seen.get(key, 0)))
        seen[key] = seen.get(key, 0) + 1
    return group_and_sort(items)


def save_timelines(path, timelines: Iterable[Timeline]) -> int:
    return write_jsonl(path, (t.to_dict() for t in timelines))


def load_timelines(path) -> list[Timeline]:
    return [Timeline.from_dict(d) for d in iter_jsonl(path)]


def corpus_stats(timelines: Sequence[Timeline]) -> dict:
    n_items = sum(len(t) for t in timelines)
    n_tokens = sum(len(it.text.split()) for t in timelines for it in t)
    labels: dict[str, int] = {}
    for t in timelines:
        for it in t:
            if it.labeled:
                labels[it.local_label] = labels.get(it.local_label, 0) + 1
    return {
        "timelines": len(timelines),
        "posts": n_items,
        "mean_posts_per_timeline": round(n_items / len(timelines), 2) if timelines else 0.0,
        "mean_tokens_per_post": round(n_tokens / n_items, 2) if n_items else 0.0,
        "label_counts": dict(sorted(labels.items())),
    }


def split_timelines(timelines: Sequence[Timeline], test_frac: float = 0.2, seed: int = 0) -> tuple[list[Timeline], list[Timeline]]:
    """Timeline-level train/test split (whole timelines are held out)."""
    order = sorted(range(len(timelines)), key=lambda i: timelines[i].sequence_key)
    random.Random(seed).shuffle(order)
    n_test = int(round(len(timelines) * test_frac))
    test_idx = set(order[:n_test])
    train = [t for i, t in enumerate(timelines) if i not in test_idx]
    test = [t for i, t in enumerate(timelines) if i in test_idx]
    return train, test
