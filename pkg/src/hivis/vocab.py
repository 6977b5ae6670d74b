"""Closed 256-id vocabulary and whitespace/punctuation tokenizer."""

from __future__ import annotations

import re

VOCAB_SIZE = 256

PAD, EOS, BOS, SEP = "<pad>", "<eos>", "<bos>", "<sep>"
SPECIALS = [PAD, EOS, BOS, SEP]

SHAPES = ["circle", "square", "triangle", "star", "heart", "diamond"]
COLORS = ["red", "green", "blue", "yellow", "purple", "orange"]
ROWS = ["top", "middle", "bottom"]
COLS = ["left", "center", "right"]

# Designated "programming symbol" class used by the stage-2 text filter.
SYMBOLS = [
    "(", ")", "{", "}", "[", "]", ";", "=", "+", "-", "*", "/", "<", ">", ":", "==",
    "def", "return", "if", "else", "for", "while", "import", "print", "int", "var",
    "let", "const", "fn", "null",
]

_WORDS = """
. , ? a the is it in of to and some no yes there what where how many can see sits located part
picture cell empty nothing in this at all answer one word briefly i
tell me about animal that lives loves should go you visit because weather
do make first then serve warm with describe so day
write code two numbers loop prints values range
dog cat bird fish horse rabbit fox owl
small big quick slow happy calm bright gentle
park beach forest mountain river village lake city
apple bread rice soup cake cheese honey milk
cook bake boil fry stir mix slice color
spring summer autumn winter
sunny rainy windy snowy cloudy mild
today tonight tomorrow
nice lovely great fine
add sub mul div
zero two three four five six seven eight nine ten
a b x y n
""".split()

# Stable id assignment: specials, symbols, scene vocabulary, then other words.
_ORDER: list[str] = []
for _w in SPECIALS + SYMBOLS + SHAPES + COLORS + ROWS + COLS + _WORDS:
    if _w not in _ORDER:
        _ORDER.append(_w)
if len(_ORDER) > VOCAB_SIZE:  # pragma: no cover - guarded at import
    raise RuntimeError(f"vocabulary overflow: {len(_ORDER)} words")
_ORDER += [f"<unused{i}>" for i in range(VOCAB_SIZE - len(_ORDER))]

ID_TO_TOKEN: list[str] = _ORDER
TOKEN_TO_ID: dict[str, int] = {w: i for i, w in enumerate(_ORDER)}

PAD_ID = TOKEN_TO_ID[PAD]
EOS_ID = TOKEN_TO_ID[EOS]
BOS_ID = TOKEN_TO_ID[BOS]
SEP_ID = TOKEN_TO_ID[SEP]
SYMBOL_IDS = frozenset(TOKEN_TO_ID[s] for s in SYMBOLS)

_TOKEN_RE = re.compile(r"<[a-z0-9]+>|==|[A-Za-z0-9_\-]+|[^\sA-Za-z0-9_]")


class UnknownTokenError(KeyError):
    pass


def split(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def encode(text: str) -> list[int]:
    out = []
    for w in split(text):
        try:
            out.append(TOKEN_TO_ID[w])
        except KeyError:
            raise UnknownTokenError(w) from None
    return out


def decode(ids) -> str:
    return " ".join(ID_TO_TOKEN[int(i)] for i in ids)


def token_count(text_or_ids) -> int:
    """The single token-count definition used by the dataset length filter."""
    if isinstance(text_or_ids, str):
        return len(encode(text_or_ids))
    return len(text_or_ids)


def symbol_ratio(ids) -> float:
    ids = list(ids)
    if not ids:
        return 0.0
    return sum(1 for i in ids if i in SYMBOL_IDS) / len(ids)
