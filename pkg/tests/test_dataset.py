import numpy as np
import pytest

from hivis import dataset as ds
from hivis import vocab


def _mutated(record: ds.QARecord) -> ds.SceneSpec:
    """The record's scene with the queried object's color changed, or an
    object placed where the query found nothing."""
    scene, q = record.scene, ds.query_of(record)
    if record.template == ds.T_CELL:
        idx = q[0] * scene.cols + q[1]
    else:
        hit = scene.find(q[0])
        if hit is None:
            free = next(i for i, c in enumerate(scene.cells) if c is None)
            return scene.replace(free, (q[0], 0))
        idx = hit[0] * scene.cols + hit[1]
    cell = scene.cells[idx]
    if cell is None:
        return scene.replace(idx, (0, 0))
    return scene.replace(idx, (cell[0], (cell[1] + 1) % len(vocab.COLORS)))


def test_gen_multimodal_empty_and_deterministic():
    assert ds.gen_multimodal(0, seed=1) == []
    assert ds.gen_multimodal(30, seed=4) == ds.gen_multimodal(30, seed=4)
    assert ds.gen_multimodal(30, seed=4) != ds.gen_multimodal(30, seed=5)


def test_answers_depend_on_queried_attribute():
    for r in ds.gen_multimodal(100, seed=7):
        other = ds.render_answer(_mutated(r), r.template, ds.query_of(r))
        assert tuple(vocab.encode(other)) != r.answer


def test_textonly_symbol_fraction():
    plain = ds.gen_textonly(200, seed=3, symbol_fraction=0.0)
    assert all(r.symbol_ratio < 0.05 for r in plain)
    mixed = ds.gen_textonly(200, seed=3, symbol_fraction=0.5)
    heavy = sum(r.symbol_ratio > ds.SYMBOL_THRESHOLD for r in mixed)
    code = sum(r.template == ds.PLAIN_TEMPLATES for r in mixed)
    assert code == 100 and heavy == code
    assert ds.gen_textonly(50, seed=9, symbol_fraction=0.2) == ds.gen_textonly(50, seed=9, symbol_fraction=0.2)


def test_filter_answer_length_boundary():
    scene = ds.random_scene(np.random.default_rng(0))
    mk = lambda n: ds.QARecord(scene, (vocab.TOKEN_TO_ID["what"],), tuple([vocab.TOKEN_TO_ID["red"]] * n), ds.T_COLOR)
    kept, report = ds.filter_records([mk(5), mk(6)], "stage1")
    assert [len(r.answer) for r in kept] == [6]
    assert report["short_answer"] == 1


def test_filter_symbol_heavy_only_in_stage2():
    ids = vocab.encode("def x ( y ) return y a b n")  # 4 symbols of 10
    r = ds.TextRecord(tuple(ids[:5]), tuple(ids[5:]), 0)
    assert r.symbol_ratio == pytest.approx(0.4)
    assert ds.filter_records([r], "stage1")[0] == [r]
    kept, report = ds.filter_records([r], "stage2")
    assert kept == [] and report["symbol_heavy"] == 1


def test_stage1_keeps_all_text():
    recs = ds.gen_textonly(100, seed=2, symbol_fraction=0.5)
    kept, report = ds.filter_records(recs, "stage1")
    assert len(kept) == 100 and sum(report.values()) == 0


def test_filter_rejects_unknown_stage():
    with pytest.raises(ValueError):
        ds.filter_records([], "stage3")


def test_corpus_round_trip(tmp_path):
    corpus = ds.build_corpus(40, 40, seed=11)
    path = tmp_path / "c.hvc"
    ds.save_corpus(corpus, path)
    back = ds.load_corpus(path)
    assert back.records == corpus.records and back.seed == 11
    assert back.counts() == {"multimodal": 40, "text": 40}


def test_corpus_corruption_detected(tmp_path):
    data = bytearray(ds.encode_corpus(ds.build_corpus(5, 5, seed=1)))
    data[40] ^= 0xFF
    with pytest.raises(ds.CorpusFormatError, match="checksum"):
        ds.decode_corpus(bytes(data))


def test_empty_corpus_file(tmp_path):
    path = tmp_path / "e.hvc"
    ds.save_corpus(ds.MixedCorpus(), path)
    assert len(ds.load_corpus(path)) == 0


def test_sequence_layout():
    r = ds.gen_textonly(1, seed=0)[0]
    toks, b = ds.sequence(r)
    assert toks[0] == vocab.BOS_ID and toks[b - 1] == vocab.SEP_ID and toks[-1] == vocab.EOS_ID
    assert toks[:b] == ds.prompt_ids(r)


def test_tokenizer_round_trip():
    text = "what color is the circle ?"
    assert vocab.decode(vocab.encode(text)) == text
    with pytest.raises(vocab.UnknownTokenError):
        vocab.encode("zebra")
