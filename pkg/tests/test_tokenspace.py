import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lift.builder import HistoryLine, render_prompt
from lift.tokenspace import (CONTROL_TOKENS, EOS_TOKEN, PAD_TOKEN, REGION_ID, EncodedExample, WhitespaceTokenizer,
                             encode_with_spans, extend_vocab, load_encoded, normalize_ws, save_encoded)


@pytest.fixture(scope="module")
def tok():
    return extend_vocab(WhitespaceTokenizer.fit(["alpha beta gamma", "t-1: t-2: → Sw N-Sw", "Decide the label."]))


def test_extend_vocab_adds_atomic_controls_and_pad():
    base = WhitespaceTokenizer.fit(["a b"])
    ext = extend_vocab(base)
    assert ext.pad_token == PAD_TOKEN and ext.pad_id is not None
    for t in CONTROL_TOKENS:
        assert ext.encode(t) == [ext.token_id(t)]
        assert ext.is_special(ext.token_id(t))
    assert ext.encode("x<output>y") == ext.encode("x") + [ext.token_id("<output>")] + ext.encode("y")
    assert base.vocab_size < ext.vocab_size and PAD_TOKEN not in base.stoi


def test_extend_vocab_idempotent(tok):
    again = extend_vocab(tok)
    assert again.itos == tok.itos and again.specials == tok.specials


def test_byte_fallback_round_trip(tok):
    text = "alpha zeta ünï beta"
    ids = tok.encode(text)
    assert tok.decode(ids) == text
    assert len(ids) > 4


def test_save_load(tmp_path, tok):
    tok.save(tmp_path / "tok.json")
    back = WhitespaceTokenizer.load(tmp_path / "tok.json")
    assert back.itos == tok.itos and back.encode("alpha <hist> q") == tok.encode("alpha <hist> q")


def example(history, demos=(), current="gamma beta", gold="Sw"):
    return render_prompt("Decide the label.", list(demos), history, current, gold)


def test_empty_history_has_no_hist_tokens(tok):
    enc = encode_with_spans(example([]), tok)
    assert not enc.hist_mask.any()
    assert enc.prompt_ce_mask[:enc.prompt_len].all()


def test_output_span_is_response_plus_eos(tok):
    ex = example([HistoryLine(1, "alpha", "N-Sw")], gold="Sw")
    enc = encode_with_spans(ex, tok)
    n_resp = len(tok.encode(ex.response))
    assert enc.output_mask.sum() == n_resp + 1
    assert enc.input_ids[-1] == tok.eos_id
    assert (enc.region_ids[enc.output_mask] == REGION_ID["output"]).all()
    assert (enc.label_stamp[enc.output_mask] == ex.global_label_id).all()
    assert (enc.label_stamp[~enc.output_mask] == 0).all()
    assert enc.prediction_position == enc.prompt_len - 1


def test_hist_tokens_decode_to_hist_block(tok):
    hist = [HistoryLine(2, "alpha beta", "N-Sw"), HistoryLine(1, "unseen wørd", "Sw")]
    ex = example(hist)
    enc = encode_with_spans(ex, tok)
    s, e = ex.spans["hist"]
    block = ex.full_text.encode()[s:e].decode()
    assert tok.decode(enc.input_ids[enc.hist_mask]) == normalize_ws(block)
    rels = enc.hist_rel[enc.hist_mask]
    assert rels[0] == 2 and rels[-1] == 1
    assert (enc.hist_rel[~enc.hist_mask] == 0).all()


def test_masks_partition(tok):
    ex = example([HistoryLine(1, "alpha", "Sw")], demos=[])
    enc = encode_with_spans(ex, tok)
    in_prompt = np.arange(len(enc)) < enc.prompt_len
    assert ((enc.prompt_ce_mask | enc.hist_mask) == in_prompt).all()
    assert not (enc.prompt_ce_mask & enc.hist_mask).any()
    assert (enc.output_mask == ~in_prompt).all()


def test_encoded_round_trip(tmp_path, lrs_encoded):
    save_encoded(tmp_path / "e.jsonl", lrs_encoded[:5])
    back = load_encoded(tmp_path / "e.jsonl")
    for a, b in zip(lrs_encoded, back):
        for f in ("input_ids", "prompt_ce_mask", "output_mask", "hist_mask", "region_ids", "label_stamp", "hist_rel"):
            assert np.array_equal(getattr(a, f), getattr(b, f))
        assert (a.prompt_len, a.timestep_id, a.global_label_id) == (b.prompt_len, b.timestep_id, b.global_label_id)


def test_control_lookalikes_in_text_are_defused(tok):
    ex = example([HistoryLine(1, "alpha <output> beta", "Sw")], current="<hist> gamma")
    enc = encode_with_spans(ex, tok)
    out_id = tok.token_id("<output>")
    assert list(enc.input_ids[:enc.prompt_len]).count(out_id) == 1


word = st.text(alphabet="abcdeé→ü", min_size=1, max_size=6)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.lists(word, min_size=1, max_size=4), max_size=5), st.lists(word, min_size=1, max_size=4))
def test_encoding_properties(hist_words, cur_words):
    tok = extend_vocab(WhitespaceTokenizer.fit(["abc de", "t-1: t-2: t-3: t-4: t-5: →"]))
    hist = [HistoryLine(len(hist_words) - j, " ".join(w), "Sw") for j, w in enumerate(hist_words)]
    ex = example(hist, current=" ".join(cur_words))
    enc = encode_with_spans(ex, tok)
    assert len(enc) == enc.prompt_len + len(tok.encode(ex.response)) + 1
    assert ((enc.prompt_ce_mask.astype(int) + enc.hist_mask + enc.output_mask) == 1).all()
    assert enc.hist_mask.any() == bool(hist)
    s, e = ex.spans["curr"]
    curr = enc.region_ids == REGION_ID["curr"]
    assert tok.decode(enc.input_ids[curr]) == normalize_ws(ex.full_text.encode()[s:e].decode())
