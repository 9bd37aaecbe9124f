"""Control-token vocabulary, a fallback tokenizer, and span-aware encoding."""
from __future__ import annotations

import copy
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import SpanAlignment

CONTROL_TOKENS = (
    "<instruction>", "</instruction>",
    "<few-shot>", "</few-shot>",
    "<query>", "</query>",
    "<output>", "</output>",
    "<hist>", "</hist>",
    "<curr>", "</curr>",
)
PAD_TOKEN = "<|pad|>"
EOS_TOKEN = "<|eos|>"

REGIONS = ("instruction", "fewshot", "hist", "curr", "output", "other")
REGION_ID = {name: i for i, name in enumerate(REGIONS)}
OTHER = REGION_ID["other"]

_WS = re.compile(r"\S+")


class WhitespaceTokenizer:
    """Word-level tokenizer with byte fallback and atomic special tokens.

    Words found in the vocabulary map to one id. Any other word is spelled out
    as byte tokens: ``<0xNN>`` opens a word, ``<+0xNN>`` continues it, so
    decoding can recover word boundaries. Special tokens are matched before
    whitespace splitting and are always a single id.
    """

    def __init__(self, words: Sequence[str] = (), specials: Sequence[str] = (EOS_TOKEN,), pad_token: str | None = None):
        self.specials: list[str] = []
        self.itos: list[str] = []
        self.stoi: dict[str, int] = {}
        for s in specials:
            self._add(s, special=True)
        for b in range(256):
            self._add(f"<0x{b:02X}>")
        for b in range(256):
            self._add(f"<+0x{b:02X}>")
        self._byte_base = self.stoi["<0x00>"]
        for w in words:
            if w not in self.stoi:
                self._add(w)
        self.pad_token = None
        if pad_token is not None:
            self._add(pad_token, special=True)
            self.pad_token = pad_token
        self._compile()

    # -- vocabulary -------------------------------------------------------
    def _add(self, tok: str, special: bool = False) -> int:
        if tok in self.stoi:
            return self.stoi[tok]
        self.stoi[tok] = len(self.itos)
        self.itos.append(tok)
        if special:
            self.specials.append(tok)
        return self.stoi[tok]

    def _compile(self) -> None:
        alts = sorted(self.specials, key=len, reverse=True)
        self._special_re = re.compile("|".join(re.escape(s) for s in alts)) if alts else None
        self._special_ids = frozenset(self.stoi[s] for s in self.specials)

    def add_special_tokens(self, tokens: Iterable[str]) -> int:
        n = 0
        for t in tokens:
            if t not in self.stoi:
                n += 1
            elif t in self.specials:
                continue
            self._add(t)
            if t not in self.specials:
                self.specials.append(t)
        self._compile()
        return n

    @classmethod
    def fit(cls, texts: Iterable[str], max_vocab: int | None = None, min_freq: int = 1, pad_token: str | None = None) -> "WhitespaceTokenizer":
        counts: Counter[str] = Counter()
        probe = cls()
        for t in texts:
            counts.update(w for w, _, _ in probe._pieces(t) if w not in CONTROL_TOKENS)
        words = sorted((w for w, c in counts.items() if c >= min_freq), key=lambda w: (-counts[w], w))
        if max_vocab is not None:
            words = words[:max_vocab]
        return cls(words=words, pad_token=pad_token)

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def vocab_size(self) -> int:
        return len(self.itos)

    @property
    def eos_id(self) -> int:
        return self.stoi[EOS_TOKEN]

    @property
    def pad_id(self) -> int | None:
        return self.stoi[self.pad_token] if self.pad_token else None

    def is_special(self, tok_id: int) -> bool:
        return tok_id in self._special_ids

    def token_id(self, tok: str) -> int:
        return self.stoi[tok]

    # -- encoding ---------------------------------------------------------
    def _pieces(self, text: str):
        """Yield (piece, char_start, char_end) with specials split out."""
        pos = 0
        matches = self._special_re.finditer(text) if self._special_re is not None else ()
        for m in matches:
            for w in _WS.finditer(text, pos, m.start()):
                yield w.group(), w.start(), w.end()
            yield m.group(), m.start(), m.end()
            pos = m.end()
        for w in _WS.finditer(text, pos):
            yield w.group(), w.start(), w.end()

    def _word_ids(self, piece: str) -> list[int]:
        tid = self.stoi.get(piece)
        if tid is not None:
            return [tid]
        raw = piece.encode("utf-8")
        return [self._byte_base + raw[0]] + [self._byte_base + 256 + b for b in raw[1:]]

    def encode_with_offsets(self, text: str) -> list[tuple[int, int, int]]:
        """Return ``(id, byte_start, byte_end)`` triples."""
        if text.isascii():
            to_byte = None
        else:
            to_byte = np.concatenate([[0], np.cumsum([len(c.encode("utf-8")) for c in text])])
        out = []
        for piece, s, e in self._pieces(text):
            bs, be = (s, e) if to_byte is None else (int(to_byte[s]), int(to_byte[e]))
            ids = self._word_ids(piece)
            if len(ids) == 1:
                out.append((ids[0], bs, be))
            else:
                # byte-fallback tokens each cover one byte of the word
                for j, tid in enumerate(ids):
                    out.append((tid, bs + j, bs + j + 1))
        return out

    def encode(self, text: str) -> list[int]:
        out: list[int] = []
        for piece, _, _ in self._pieces(text):
            out.extend(self._word_ids(piece))
        return out

    def count(self, text: str) -> int:
        return len(self.encode(text))

    def decode(self, ids: Iterable[int]) -> str:
        words: list[str] = []
        buf: bytearray | None = None
        for tid in ids:
            tid = int(tid)
            off = tid - self._byte_base
            if 0 <= off < 256:
                if buf is not None:
                    words.append(buf.decode("utf-8", errors="replace"))
                buf = bytearray([off])
            elif 256 <= off < 512 and buf is not None:
                buf.append(off - 256)
            else:
                if buf is not None:
                    words.append(buf.decode("utf-8", errors="replace"))
                    buf = None
                words.append(self.itos[tid])
        if buf is not None:
            words.append(buf.decode("utf-8", errors="replace"))
        return " ".join(words)

    # -- persistence ------------------------------------------------------
    def to_dict(self) -> dict:
        return {"itos": self.itos, "specials": self.specials, "pad_token": self.pad_token}

    @classmethod
    def from_dict(cls, d: dict) -> "WhitespaceTokenizer":
        tok = cls.__new__(cls)
        tok.itos = list(d["itos"])
        tok.stoi = {t: i for i, t in enumerate(tok.itos)}
        tok.specials = list(d["specials"])
        tok.pad_token = d.get("pad_token")
        tok._byte_base = tok.stoi["<0x00>"]
        tok._compile()
        return tok

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "WhitespaceTokenizer":
        return cls.from_dict(json.loads(Path(path).read_text()))


def extend_vocab(tokenizer):
    """Return a copy of ``tokenizer`` with all control tokens atomic and a pad token."""
    tok = copy.deepcopy(tokenizer)
    tok.add_special_tokens(CONTROL_TOKENS)
    if tok.pad_token is None:
        tok.add_special_tokens([PAD_TOKEN])
        tok.pad_token = PAD_TOKEN
    return tok


def normalize_ws(text: str) -> str:
    return " ".join(text.split())


@dataclass
class EncodedExample:
    input_ids: np.ndarray
    prompt_len: int
    prompt_ce_mask: np.ndarray
    output_mask: np.ndarray
    hist_mask: np.ndarray
    region_ids: np.ndarray
    label_stamp: np.ndarray
    hist_rel: np.ndarray
    timestep_id: int
    global_label_id: int
    dataset: str = ""
    sequence_key: str = ""
    stage: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.input_ids)

    @property
    def prediction_position(self) -> int:
        return self.prompt_len - 1

    def region_mask(self, name: str) -> np.ndarray:
        return self.region_ids == REGION_ID[name]

    def to_dict(self) -> dict:
        return {
            "input_ids": self.input_ids.tolist(),
            "prompt_len": self.prompt_len,
            "region_ids": self.region_ids.tolist(),
            "hist_rel": self.hist_rel.tolist(),
            "timestep_id": self.timestep_id,
            "global_label_id": self.global_label_id,
            "dataset": self.dataset,
            "sequence_key": self.sequence_key,
            "stage": self.stage,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncodedExample":
        ids = np.asarray(d["input_ids"], dtype=np.int64)
        regions = np.asarray(d["region_ids"], dtype=np.int64)
        return _assemble(ids, d["prompt_len"], regions, np.asarray(d["hist_rel"], dtype=np.int64),
                         d["timestep_id"], d["global_label_id"], d.get("dataset", ""), d.get("sequence_key", ""),
                         d.get("stage", 0), d.get("meta", {}))


def _assemble(ids, prompt_len, regions, hist_rel, timestep_id, gid, dataset, key, stage, meta) -> EncodedExample:
    n = len(ids)
    in_prompt = np.arange(n) < prompt_len
    hist = regions == REGION_ID["hist"]
    output = ~in_prompt
    stamp = np.where(output, gid, 0).astype(np.int64)
    return EncodedExample(
        input_ids=ids, prompt_len=int(prompt_len), prompt_ce_mask=in_prompt & ~hist, output_mask=output,
        hist_mask=hist, region_ids=regions, label_stamp=stamp, hist_rel=hist_rel, timestep_id=int(timestep_id),
        global_label_id=int(gid), dataset=dataset, sequence_key=key, stage=int(stage), meta=dict(meta),
    )


def _region_of(start: int, end: int, spans: dict[str, tuple[int, int]]) -> int:
    for name, (s, e) in spans.items():
        if s <= start < e:
            if end > e:
                raise SpanAlignment(f"token [{start},{end}) straddles the end of region {name} [{s},{e})")
            return REGION_ID[name]
        if start < s < end:
            raise SpanAlignment(f"token [{start},{end}) straddles the start of region {name} [{s},{e})")
    return OTHER


def encode_with_spans(example, tokenizer) -> EncodedExample:
    """Tokenize prompt and response separately and derive supervision masks.

    ``example`` is a :class:`lift.builder.PromptExample`; its spans are byte
    offsets into ``prompt + " " + response``.
    """
    prompt_toks = tokenizer.encode_with_offsets(example.prompt)
    resp_offset = len(example.prompt.encode("utf-8")) + 1
    resp_toks = [(t, s + resp_offset, e + resp_offset) for t, s, e in tokenizer.encode_with_offsets(example.response)]

    spans = {k: tuple(v) for k, v in example.spans.items()}
    line_spans = [tuple(x) for x in example.hist_line_spans]
    ids, regions, rel = [], [], []
    for t, s, e in prompt_toks + resp_toks:
        ids.append(t)
        r = _region_of(s, e, spans)
        regions.append(r)
        j = 0
        if r == REGION_ID["hist"]:
            for rel_j, ls, le in line_spans:
                if ls <= s < le:
                    j = rel_j
                    break
        rel.append(j)
    ids.append(tokenizer.eos_id)
    regions.append(REGION_ID["output"])
    rel.append(0)
    return _assemble(
        np.asarray(ids, dtype=np.int64), len(prompt_toks), np.asarray(regions, dtype=np.int64),
        np.asarray(rel, dtype=np.int64), example.timestep_id, example.global_label_id,
        example.dataset_id, example.sequence_key, example.stage,
        {"k_actual": example.k_actual},
    )


def save_encoded(path, examples: Iterable[EncodedExample]) -> int:
    n = 0
    with open(path, "w") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_dict()) + "\n")
            n += 1
    return n


def load_encoded(path) -> list[EncodedExample]:
    with open(path) as fh:
        return [EncodedExample.from_dict(json.loads(line)) for line in fh if line.strip()]
