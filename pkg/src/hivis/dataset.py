"""Synthetic mixed-modality corpus: scene-grounded QA plus text-only dialogue.

Multimodal answers are pure functions of the scene, so a model can only
answer them by reading the visual prefix. Text-only records mimic a chat
corpus, with a controllable share of code-like "symbol-heavy" entries for
the stage-2 filter to remove.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from . import vocab
from .scene import SceneSpec

TEMPLATE_VERSION = 1
GRID = (3, 3)

MIN_ANSWER_TOKENS = 6
SYMBOL_THRESHOLD = 0.25

# multimodal template ids
T_COLOR, T_WHERE, T_CELL, T_EXISTS, T_SHORT = range(5)
QA_TEMPLATES = (T_COLOR, T_WHERE, T_CELL, T_EXISTS)


@dataclass(frozen=True)
class QARecord:
    scene: SceneSpec
    question: tuple[int, ...]
    answer: tuple[int, ...]
    template: int

    modality = "multimodal"

    @property
    def prompt(self) -> tuple[int, ...]:
        return self.question

    @property
    def response(self) -> tuple[int, ...]:
        return self.answer


@dataclass(frozen=True)
class TextRecord:
    prompt: tuple[int, ...]
    response: tuple[int, ...]
    template: int

    modality = "text"
    scene = None

    @property
    def symbol_ratio(self) -> float:
        return vocab.symbol_ratio(self.prompt + self.response)


Record = Union[QARecord, TextRecord]


@dataclass
class MixedCorpus:
    records: list[Record] = field(default_factory=list)
    seed: int = 0
    version: int = TEMPLATE_VERSION

    def __len__(self) -> int:
        return len(self.records)

    def counts(self) -> dict[str, int]:
        out = {"multimodal": 0, "text": 0}
        for r in self.records:
            out[r.modality] += 1
        return out


def sequence(record: Record) -> tuple[list[int], int]:
    """Token ids ``<bos> prompt <sep> response <eos>`` and the index of the
    first response token."""
    toks = [vocab.BOS_ID, *record.prompt, vocab.SEP_ID]
    boundary = len(toks)
    toks += [*record.response, vocab.EOS_ID]
    return toks, boundary


def prompt_ids(record: Record) -> list[int]:
    return [vocab.BOS_ID, *record.prompt, vocab.SEP_ID]


# ---------------------------------------------------------------------------
# Multimodal generation
# ---------------------------------------------------------------------------


def random_scene(rng: np.random.Generator, min_objects: int = 2, max_objects: int = 5) -> SceneSpec:
    rows, cols = GRID
    n = int(rng.integers(min_objects, max_objects + 1))
    shapes = rng.choice(len(vocab.SHAPES), size=n, replace=False)
    where = rng.choice(rows * cols, size=n, replace=False)
    cells: list = [None] * (rows * cols)
    for s, pos in zip(shapes, where):
        cells[int(pos)] = (int(s), int(rng.integers(len(vocab.COLORS))))
    return SceneSpec(rows, cols, tuple(cells))


def render_answer(scene: SceneSpec, template: int, query: tuple[int, ...]) -> str:
    """Answer text for ``template`` given the scene; ``query`` holds the
    template's slot values (shape id, or (row, col) for the cell template)."""
    S, C, R, K = vocab.SHAPES, vocab.COLORS, vocab.ROWS, vocab.COLS
    if template in (T_COLOR, T_WHERE, T_SHORT):
        shape = query[0]
        r, c, color = scene.find(shape)
        if template == T_COLOR:
            return f"the {S[shape]} is {C[color]} and it sits in the {R[r]} {K[c]} cell ."
        if template == T_WHERE:
            return f"the {C[color]} {S[shape]} is located in the {R[r]} {K[c]} part of the picture ."
        return f"{C[color]} ."
    if template == T_CELL:
        r, c = query
        cell = scene.cell(r, c)
        if cell is None:
            return f"the {R[r]} {K[c]} cell is empty , there is nothing in it ."
        return f"there is a {C[cell[1]]} {S[cell[0]]} in the {R[r]} {K[c]} cell ."
    if template == T_EXISTS:
        shape = query[0]
        found = scene.find(shape)
        if found is None:
            return f"no , there is no {S[shape]} in this picture at all ."
        r, c, color = found
        return f"yes , there is a {C[color]} {S[shape]} in the {R[r]} {K[c]} cell ."
    raise ValueError(f"unknown template {template}")


def render_question(template: int, query: tuple[int, ...]) -> str:
    S, R, K = vocab.SHAPES, vocab.ROWS, vocab.COLS
    if template == T_COLOR:
        return f"what color is the {S[query[0]]} ?"
    if template == T_WHERE:
        return f"where is the {S[query[0]]} ?"
    if template == T_CELL:
        return f"what is in the {R[query[0]]} {K[query[1]]} cell ?"
    if template == T_EXISTS:
        return f"is there a {S[query[0]]} ?"
    if template == T_SHORT:
        return f"what color is the {S[query[0]]} ? answer in one word ."
    raise ValueError(f"unknown template {template}")


def query_of(record: QARecord) -> tuple[int, ...]:
    """Recover the slot values from a record's question tokens."""
    words = [vocab.ID_TO_TOKEN[i] for i in record.question]
    if record.template == T_CELL:
        return (vocab.ROWS.index(words[4]), vocab.COLS.index(words[5]))
    shape = next(w for w in words if w in vocab.SHAPES)
    return (vocab.SHAPES.index(shape),)


def make_qa(scene: SceneSpec, template: int, query: tuple[int, ...]) -> QARecord:
    return QARecord(
        scene=scene,
        question=tuple(vocab.encode(render_question(template, query))),
        answer=tuple(vocab.encode(render_answer(scene, template, query))),
        template=template,
    )


def _sample_qa(rng: np.random.Generator, templates, weights=None) -> QARecord:
    scene = random_scene(rng)
    template = int(rng.choice(templates, p=weights))
    present = [c[0] for c in scene.cells if c is not None]
    if template == T_CELL:
        query = (int(rng.integers(GRID[0])), int(rng.integers(GRID[1])))
    elif template == T_EXISTS:
        query = (int(rng.integers(len(vocab.SHAPES))),)
    else:
        query = (int(rng.choice(present)),)
    return make_qa(scene, template, query)


def gen_multimodal(count: int, seed: int, short_fraction: float = 0.1) -> list[QARecord]:
    """Scene QA records; ``short_fraction`` of them use the one-word answer
    template that the length filter is meant to remove."""
    if count < 0:
        raise ValueError("count must be non-negative")
    rng = np.random.default_rng([seed, 1])
    out = []
    for _ in range(count):
        if rng.random() < short_fraction:
            out.append(_sample_qa(rng, [T_SHORT]))
        else:
            out.append(_sample_qa(rng, list(QA_TEMPLATES)))
    return out


def gen_color_queries(count: int, seed: int, shape: str = "circle") -> list[QARecord]:
    """Held-out "what color is the <shape>" queries on scenes containing it."""
    rng = np.random.default_rng([seed, 3])
    sid = vocab.SHAPES.index(shape)
    out = []
    while len(out) < count:
        scene = random_scene(rng)
        if scene.find(sid) is None:
            continue
        out.append(make_qa(scene, T_COLOR, (sid,)))
    return out


# ---------------------------------------------------------------------------
# Text-only generation
# ---------------------------------------------------------------------------

ANIMALS = {  # animal -> (adjective, place, food)
    "dog": ("happy", "park", "bread"),
    "cat": ("calm", "village", "milk"),
    "bird": ("quick", "forest", "rice"),
    "fish": ("small", "lake", "bread"),
    "horse": ("big", "mountain", "apple"),
    "rabbit": ("gentle", "park", "apple"),
    "fox": ("quick", "forest", "cheese"),
    "owl": ("calm", "forest", "cake"),
}
SEASONS = {"spring": ("park", "mild"), "summer": ("beach", "sunny"), "autumn": ("forest", "windy"), "winter": ("mountain", "snowy")}
FOODS = {"soup": ("boil", "bread"), "cake": ("bake", "honey"), "rice": ("boil", "soup"), "bread": ("bake", "cheese"), "cheese": ("slice", "bread")}
WHEN = {"today": ("sunny", "nice", "beach"), "tonight": ("cloudy", "calm", "city"), "tomorrow": ("rainy", "fine", "river")}
OPS = {"add": "+", "sub": "-", "mul": "*", "div": "/"}
NUMBERS = ["two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"]

PLAIN_TEMPLATES = 4
CODE_TEMPLATES = 2


def _plain_turn(rng: np.random.Generator) -> tuple[str, str]:
    t = int(rng.integers(PLAIN_TEMPLATES))
    if t == 0:
        a = str(rng.choice(list(ANIMALS)))
        adj, place, food = ANIMALS[a]
        return (f"tell me about the {a} .",
                f"the {a} is a {adj} animal that lives in the {place} and loves {food} .")
    if t == 1:
        s = str(rng.choice(list(SEASONS)))
        place, weather = SEASONS[s]
        return (f"where should i go in {s} ?",
                f"you should visit the {place} in {s} because the weather is {weather} there .")
    if t == 2:
        f = str(rng.choice(list(FOODS)))
        verb, side = FOODS[f]
        return (f"how do i make {f} ?",
                f"first {verb} the {f} , then serve it warm with some {side} .")
    w = str(rng.choice(list(WHEN)))
    weather, adj, place = WHEN[w]
    return (f"describe the weather {w} .",
            f"the weather {w} is {weather} , so it is a {adj} day to visit the {place} .")


def _code_turn(rng: np.random.Generator) -> tuple[str, str]:
    if rng.random() < 0.5:
        op = str(rng.choice(list(OPS)))
        return (f"write code to {op} two numbers .",
                f"def {op} ( a , b ) : return a {OPS[op]} b ;")
    n = str(rng.choice(NUMBERS))
    return (f"write a loop that prints {n} values .",
            f"for ( int i = zero ; i < {n} ; i = i + one ) {{ print ( i ) ; }}")


def gen_textonly(count: int, seed: int, symbol_fraction: float = 0.0) -> list[TextRecord]:
    """Templated dialogue snippets; exactly ``round(count * symbol_fraction)``
    of them are code-like and symbol-heavy."""
    if not 0.0 <= symbol_fraction <= 1.0:
        raise ValueError("symbol_fraction must lie in [0, 1]")
    rng = np.random.default_rng([seed, 2])
    n_code = int(round(count * symbol_fraction))
    code_idx = set(rng.choice(count, size=n_code, replace=False).tolist()) if count else set()
    out = []
    for i in range(count):
        if i in code_idx:
            q, a = _code_turn(rng)
            template = PLAIN_TEMPLATES
        else:
            q, a = _plain_turn(rng)
            if rng.random() < 0.3:
                # two-turn snippet: the first exchange becomes context
                q2, a2 = _plain_turn(rng)
                q, a = f"{q} {a} {q2}", a2
            template = 0
        out.append(TextRecord(tuple(vocab.encode(q)), tuple(vocab.encode(a)), template))
    return out


def build_corpus(
    n_multimodal: int,
    n_text: int,
    seed: int,
    symbol_fraction: float = 0.2,
    short_fraction: float = 0.1,
) -> MixedCorpus:
    """Interleave both modalities in a seeded order."""
    mm = gen_multimodal(n_multimodal, seed, short_fraction)
    tx = gen_textonly(n_text, seed, symbol_fraction)
    records: list[Record] = [*mm, *tx]
    order = np.random.default_rng([seed, 4]).permutation(len(records))
    return MixedCorpus([records[i] for i in order], seed, TEMPLATE_VERSION)


# ---------------------------------------------------------------------------
# Filters
# ---------------------------------------------------------------------------


def filter_records(
    records: list[Record],
    stage: str,
    symbol_threshold: float = SYMBOL_THRESHOLD,
    min_answer_tokens: int = MIN_ANSWER_TOKENS,
) -> tuple[list[Record], dict[str, int]]:
    """Drop short multimodal answers (both stages) and symbol-heavy text
    (stage2 only). Returns the kept records and per-rule drop counts."""
    if stage not in ("stage1", "stage2"):
        raise ValueError(f"stage must be 'stage1' or 'stage2', got {stage!r}")
    kept, report = [], {"short_answer": 0, "symbol_heavy": 0}
    for r in records:
        if r.modality == "multimodal":
            if vocab.token_count(r.answer) < min_answer_tokens:
                report["short_answer"] += 1
                continue
        elif stage == "stage2" and r.symbol_ratio > symbol_threshold:
            report["symbol_heavy"] += 1
            continue
        kept.append(r)
    return kept, report


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

CORPUS_MAGIC = b"HVC1"
_EMPTY = 255


class CorpusFormatError(ValueError):
    pass


def _ids(buf: bytearray, ids) -> None:
    buf += struct.pack("<H", len(ids))
    buf += struct.pack(f"<{len(ids)}H", *ids)


def _encode_record(r: Record) -> bytes:
    buf = bytearray()
    if r.modality == "multimodal":
        buf += struct.pack("<BHBB", 0, r.template, r.scene.rows, r.scene.cols)
        for c in r.scene.cells:
            buf += struct.pack("<BB", *((_EMPTY, _EMPTY) if c is None else c))
        _ids(buf, r.question)
        _ids(buf, r.answer)
    else:
        buf += struct.pack("<BH", 1, r.template)
        _ids(buf, r.prompt)
        _ids(buf, r.response)
    return bytes(buf)


def _read_ids(payload: bytes, off: int) -> tuple[tuple[int, ...], int]:
    (n,) = struct.unpack_from("<H", payload, off)
    off += 2
    return struct.unpack_from(f"<{n}H", payload, off), off + 2 * n


def _decode_record(payload: bytes) -> Record:
    tag = payload[0]
    if tag == 0:
        _, template, rows, cols = struct.unpack_from("<BHBB", payload, 0)
        off = 5
        cells = []
        for _ in range(rows * cols):
            s, c = struct.unpack_from("<BB", payload, off)
            off += 2
            cells.append(None if s == _EMPTY else (s, c))
        q, off = _read_ids(payload, off)
        a, off = _read_ids(payload, off)
        return QARecord(SceneSpec(rows, cols, tuple(cells)), q, a, template)
    if tag == 1:
        _, template = struct.unpack_from("<BH", payload, 0)
        p, off = _read_ids(payload, 3)
        resp, off = _read_ids(payload, off)
        return TextRecord(p, resp, template)
    raise CorpusFormatError(f"unknown modality tag {tag}")


def encode_corpus(corpus: MixedCorpus) -> bytes:
    buf = bytearray(CORPUS_MAGIC)
    buf += struct.pack("<IQI", corpus.version, corpus.seed, len(corpus.records))
    for r in corpus.records:
        payload = _encode_record(r)
        buf += struct.pack("<I", len(payload))
        buf += payload
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    return bytes(buf)


def decode_corpus(data: bytes, expect_version: int = TEMPLATE_VERSION) -> MixedCorpus:
    if data[:4] != CORPUS_MAGIC:
        raise CorpusFormatError("bad corpus magic")
    if len(data) < 24:
        raise CorpusFormatError("truncated corpus file")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CorpusFormatError("corpus checksum mismatch")
    version, seed, count = struct.unpack_from("<IQI", data, 4)
    if version != expect_version:
        raise CorpusFormatError(f"corpus version {version} != expected {expect_version}")
    off = 20
    records = []
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        records.append(_decode_record(data[off : off + n]))
        off += n
    if off != len(data) - 4:
        raise CorpusFormatError("trailing bytes after last record")
    return MixedCorpus(records, seed, version)


def save_corpus(corpus: MixedCorpus, path: str | Path) -> None:
    Path(path).write_bytes(encode_corpus(corpus))


def load_corpus(path: str | Path) -> MixedCorpus:
    return decode_corpus(Path(path).read_bytes())
