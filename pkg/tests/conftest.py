from __future__ import annotations

import pytest
import torch

from lift.builder import build_timeline_examples, load_instruction
from lift.corpus import GlobalLabelSpace, load_raw
from lift.fixtures import bundled_path
from lift.model import build_model
from lift.pipeline import build_tokenizer, corpus_texts
from lift.tokenspace import encode_with_spans

TINY_LM = {"n_layers": 2, "d_model": 32, "n_heads": 2, "d_ff": 64}


@pytest.fixture(scope="session")
def labelspace():
    return GlobalLabelSpace.default()


@pytest.fixture(scope="session")
def lrs_timelines(labelspace):
    return load_raw(bundled_path("lrs"), "lrs", labelspace)


@pytest.fixture(scope="session")
def tokenizer(lrs_timelines):
    return build_tokenizer(corpus_texts({"lrs": lrs_timelines}))


@pytest.fixture(scope="session")
def lrs_examples(lrs_timelines, tokenizer):
    out = []
    instruction = load_instruction("lrs")
    for tl in lrs_timelines[:6]:
        out += build_timeline_examples(tl, stage=2, k=0, instruction=instruction, pool=[], seed=17, budget=2048,
                                       token_len_fn=tokenizer.count)
    return out


@pytest.fixture(scope="session")
def lrs_encoded(lrs_examples, tokenizer):
    return [encode_with_spans(ex, tokenizer) for ex in lrs_examples]


@pytest.fixture
def tiny_model(tokenizer, labelspace):
    torch.manual_seed(0)
    return build_model(tokenizer.vocab_size, len(labelspace), seed=3, rank=4, lm_kwargs=TINY_LM)


# one PASS/FAIL line per acceptance criterion, printed after the run
CRITERIA: dict[int, str] = {}


def record_criterion(number: int, name: str, ok: bool, detail: str = "") -> None:
    CRITERIA[number] = f"criterion {number:>2} {name}: {'PASS' if ok else 'FAIL'}" + (f" ({detail})" if detail else "")


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
