"""Labeled text corpus handling: records, control codes, tokenization.

Records carry raw text plus categorical attributes. Each record's
attributes render into a control-code prefix ("Type: Cafe | Stars: 3")
that is prepended to the text before character-level tokenization. The
bundled toy grammar generates deterministic corpora whose word choices
depend on the attribute values, so the attributes are statistically
recoverable from the text alone.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError

SCHEMA_FORMAT_VERSION = 1
VOCAB_FORMAT_VERSION = 1

PAD_SYMBOL = "<pad>"
EOS_SYMBOL = "<eos>"
SEP_SYMBOL = "<sep>"

# Closed character set: space, basic punctuation, digits, letters, pipe.
DEFAULT_CHARSET = (
    " !'(),-.:;?"
    + string.digits
    + string.ascii_uppercase
    + string.ascii_lowercase
    + "|"
)


@dataclass(frozen=True)
class AttributeSpec:
    """One categorical attribute: storage name, display name, value alphabet."""

    name: str
    display: str
    values: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.values)) != len(self.values):
            raise ConfigError(f"attribute {self.name!r} has duplicate values")


@dataclass(frozen=True)
class Schema:
    attributes: tuple[AttributeSpec, ...]

    def attribute(self, name: str) -> AttributeSpec:
        for spec in self.attributes:
            if spec.name == name:
                return spec
        raise KeyError(name)

    def to_json(self) -> dict:
        return {
            "version": SCHEMA_FORMAT_VERSION,
            "attributes": [
                {"name": a.name, "display": a.display, "values": list(a.values)}
                for a in self.attributes
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Schema":
        if obj.get("version") != SCHEMA_FORMAT_VERSION:
            raise ConfigError(f"unsupported schema version {obj.get('version')!r}")
        return cls(
            tuple(
                AttributeSpec(a["name"], a["display"], tuple(a["values"]))
                for a in obj["attributes"]
            )
        )


@dataclass(frozen=True)
class Record:
    """One raw example: text plus its categorical attributes."""

    text: str
    attributes: dict[str, str]

    def validate(self, schema: Schema, where: str = "record") -> None:
        if not self.text:
            raise ValueError(f"{where}: text is empty")
        for spec in schema.attributes:
            if spec.name not in self.attributes:
                raise ValueError(f"{where}: missing attribute {spec.name!r}")
            value = self.attributes[spec.name]
            if value not in spec.values:
                raise ValueError(
                    f"{where}: unknown value {value!r} for attribute {spec.name!r}"
                )
        extra = set(self.attributes) - {s.name for s in schema.attributes}
        if extra:
            raise ValueError(f"{where}: undeclared attribute {sorted(extra)[0]!r}")


class Vocabulary:
    """Character vocabulary with reserved pad / end-of-sequence / separator ids."""

    def __init__(self, chars: str = DEFAULT_CHARSET):
        if len(set(chars)) != len(chars):
            raise ConfigError("vocabulary characters must be unique")
        self.symbols: list[str] = [PAD_SYMBOL, EOS_SYMBOL, SEP_SYMBOL] + list(chars)
        self.ids: dict[str, int] = {s: i for i, s in enumerate(self.symbols)}
        self.pad_id = self.ids[PAD_SYMBOL]
        self.eos_id = self.ids[EOS_SYMBOL]
        self.sep_id = self.ids[SEP_SYMBOL]

    @property
    def size(self) -> int:
        return len(self.symbols)

    @property
    def reserved_ids(self) -> tuple[int, int, int]:
        return (self.pad_id, self.eos_id, self.sep_id)

    def encode(self, text: str) -> list[int]:
        try:
            return [self.ids[c] for c in text]
        except KeyError as exc:
            raise ValueError(f"character {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            if i in self.reserved_ids:
                raise ValueError(f"cannot decode reserved token id {i}")
            out.append(self.symbols[i])
        return "".join(out)

    def decode_content(self, ids: Iterable[int]) -> str:
        """Decode, silently dropping reserved ids (for generated sequences)."""
        return "".join(self.symbols[i] for i in ids if i not in self.reserved_ids)

    def to_json(self) -> dict:
        return {
            "version": VOCAB_FORMAT_VERSION,
            "symbols": self.symbols,
            "reserved": {"pad": self.pad_id, "eos": self.eos_id, "sep": self.sep_id},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        if obj.get("version") != VOCAB_FORMAT_VERSION:
            raise ConfigError(f"unsupported vocabulary version {obj.get('version')!r}")
        symbols = obj["symbols"]
        if symbols[:3] != [PAD_SYMBOL, EOS_SYMBOL, SEP_SYMBOL]:
            raise ConfigError("vocabulary reserved symbols out of place")
        return cls("".join(symbols[3:]))


@dataclass(frozen=True)
class ControlCode:
    """Rendered categorical prefix, ending with the separator token."""

    attributes: tuple[tuple[str, str], ...]
    rendered: tuple[int, ...]

    def attribute_dict(self) -> dict[str, str]:
        return dict(self.attributes)


@dataclass(frozen=True)
class PreparedExample:
    """Token sequence with the index of its first content token."""

    tokens: tuple[int, ...]
    boundary: int

    def __post_init__(self):
        if not (0 < self.boundary <= len(self.tokens)):
            raise ValueError(
                f"boundary {self.boundary} out of range for length {len(self.tokens)}"
            )

    @property
    def content_tokens(self) -> tuple[int, ...]:
        return self.tokens[self.boundary :]


def render_control_text(attributes: dict[str, str], schema: Schema) -> str:
    """Render "Name: value | Name: value" in schema order."""
    parts = []
    for spec in schema.attributes:
        if spec.name not in attributes:
            raise ValueError(f"missing attribute {spec.name!r}")
        parts.append(f"{spec.display}: {attributes[spec.name]}")
    return " | ".join(parts)


def render_control_code(record: Record, schema: Schema, vocab: Vocabulary) -> ControlCode:
    text = render_control_text(record.attributes, schema)
    rendered = tuple(vocab.encode(text)) + (vocab.sep_id,)
    ordered = tuple((s.name, record.attributes[s.name]) for s in schema.attributes)
    return ControlCode(attributes=ordered, rendered=rendered)


def control_code_from_attributes(
    attributes: dict[str, str], schema: Schema, vocab: Vocabulary
) -> ControlCode:
    return render_control_code(Record(text="-", attributes=attributes), schema, vocab)


def prepend_and_tokenize(
    records: Sequence[Record],
    schema: Schema,
    vocab: Vocabulary,
    l_max: int,
) -> list[PreparedExample]:
    """Prepend each record's control code, tokenize, and truncate to l_max."""
    out = []
    for idx, record in enumerate(records):
        code = render_control_code(record, schema, vocab)
        boundary = len(code.rendered)
        if boundary > l_max:
            raise ValueError(
                f"record {idx}: control code length {boundary} exceeds l_max {l_max}"
            )
        content = vocab.encode(record.text)
        if content:
            tokens = list(code.rendered) + content + [vocab.eos_id]
        else:
            tokens = list(code.rendered)
        out.append(PreparedExample(tokens=tuple(tokens[:l_max]), boundary=boundary))
    return out


def subsample_control_codes(
    codes: Sequence[ControlCode], n: int, rng: np.random.Generator
) -> list[ControlCode]:
    """Sample n codes uniformly with replacement, preserving their distribution."""
    if not codes:
        raise ValueError("codes is empty")
    if n <= 0:
        raise ValueError("n must be >= 1")
    picks = rng.integers(0, len(codes), size=n)
    return [codes[i] for i in picks]


def split_dataset(
    records: Sequence[Record],
    fractions: Sequence[float],
    seed: int,
) -> tuple[list[Record], ...]:
    """Shuffle and partition records into len(fractions) disjoint splits."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions sum to {sum(fractions)}, expected 1")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(records))
    cuts = [int(round(c * len(records))) for c in np.cumsum(fractions)]
    splits = []
    start = 0
    for cut in cuts:
        part = [records[i] for i in order[start:cut]]
        if not part:
            raise ValueError("a split fraction rounded to zero records")
        splits.append(part)
        start = cut
    return tuple(splits)


# ---------------------------------------------------------------------------
# JSON-lines persistence
# ---------------------------------------------------------------------------

def record_to_json(record: Record, schema: Schema) -> str:
    attrs = {s.name: record.attributes[s.name] for s in schema.attributes}
    return json.dumps({"text": record.text, "attributes": attrs}, ensure_ascii=False)


def save_records(path: str | Path, records: Sequence[Record], schema: Schema) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(record_to_json(record, schema) + "\n")


def load_records(path: str | Path, schema: Schema) -> list[Record]:
    """Load records from JSON-lines, validating each against the schema."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{where}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj.get("text"), str):
                raise ValueError(f"{where}: missing or non-string field 'text'")
            if not isinstance(obj.get("attributes"), dict):
                raise ValueError(f"{where}: missing field 'attributes'")
            record = Record(text=obj["text"], attributes=dict(obj["attributes"]))
            record.validate(schema, where=where)
            records.append(record)
    return records


# ---------------------------------------------------------------------------
# Toy corpus grammar
# ---------------------------------------------------------------------------

TOY_TYPE_NOUNS = {
    "Cafe": ("coffee", "latte", "pastry", "brunch"),
    "Bar": ("drinks", "cocktail", "beer", "bartender"),
    "Deli": ("sandwich", "bagel", "soup", "counter"),
}
TOY_STAR_ADJS = {
    "1": ("terrible", "awful", "rude", "stale"),
    "3": ("okay", "average", "decent", "plain"),
    "5": ("amazing", "excellent", "fresh", "friendly"),
}
TOY_MARGINALS = {
    "type": {"Cafe": 0.5, "Bar": 0.3, "Deli": 0.2},
    "stars": {"1": 0.3, "3": 0.4, "5": 0.3},
}
_TOY_TEMPLATES = (
    "the {noun} was {adj}.",
    "the {noun} was {adj} and {adj2}.",
    "{adj} {noun}, {adj2} service.",
    "very {adj} {noun} here.",
    "we found the {noun} {adj}.",
)


def toy_schema() -> Schema:
    return Schema(
        attributes=(
            AttributeSpec("type", "Type", tuple(TOY_TYPE_NOUNS)),
            AttributeSpec("stars", "Stars", tuple(TOY_STAR_ADJS)),
        )
    )


def toy_keywords() -> dict[str, dict[str, tuple[str, ...]]]:
    """Attribute value -> the content words that mark it in toy text."""
    return {"type": dict(TOY_TYPE_NOUNS), "stars": dict(TOY_STAR_ADJS)}


def generate_toy_corpus(seed: int, n: int, schema: Schema | None = None) -> list[Record]:
    """Deterministic toy corpus; word choices encode the attribute values."""
    if n < 1:
        raise ValueError("n must be >= 1")
    schema = schema or toy_schema()
    for name in ("type", "stars"):
        if {v for v in schema.attribute(name).values} != set(TOY_MARGINALS[name]):
            raise ConfigError(f"schema attribute {name!r} does not match the toy grammar")
    rng = np.random.default_rng(seed)
    type_values = list(TOY_MARGINALS["type"])
    type_probs = [TOY_MARGINALS["type"][v] for v in type_values]
    star_values = list(TOY_MARGINALS["stars"])
    star_probs = [TOY_MARGINALS["stars"][v] for v in star_values]

    records = []
    for _ in range(n):
        btype = type_values[rng.choice(len(type_values), p=type_probs)]
        stars = star_values[rng.choice(len(star_values), p=star_probs)]
        template = _TOY_TEMPLATES[rng.integers(0, len(_TOY_TEMPLATES))]
        nouns = TOY_TYPE_NOUNS[btype]
        adjs = TOY_STAR_ADJS[stars]
        text = template.format(
            noun=nouns[rng.integers(0, len(nouns))],
            adj=adjs[rng.integers(0, len(adjs))],
            adj2=adjs[rng.integers(0, len(adjs))],
        )
        records.append(Record(text=text, attributes={"type": btype, "stars": stars}))
    return records


def keyword_histogram(
    texts: Iterable[str], keywords: Sequence[str]
) -> np.ndarray:
    """Occurrence counts of each keyword across texts (word-boundary free)."""
    counts = np.zeros(len(keywords), dtype=np.int64)
    for text in texts:
        for j, word in enumerate(keywords):
            counts[j] += text.count(word)
    return counts
