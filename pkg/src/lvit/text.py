"""Structured radiology-style reports: grammar, vocabulary, embeddings, retrieval.

Grammar (case-insensitive, whitespace-tolerant)::

    report    := laterality "pulmonary infection" "," count "infected" ("area"|"areas") "," locations "."
    laterality:= "bilateral" | "unilateral"
    count     := "one" | ... | "nine"
    locations := loc (("," | "and") loc)*
    loc       := vertical+ side "lung"       vertical ∈ {upper, middle, lower, all}
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

NUMBER_WORDS = ("one", "two", "three", "four", "five", "six", "seven", "eight", "nine")
VERTICAL = ("upper", "middle", "lower", "all")
SIDES = ("left", "right")

PAD, UNK = "<pad>", "<unk>"
VOCAB: tuple[str, ...] = (
    PAD,
    UNK,
    "bilateral",
    "unilateral",
    "pulmonary",
    "infection",
    *NUMBER_WORDS,
    "infected",
    "area",
    "areas",
    *VERTICAL,
    *SIDES,
    "lung",
    "and",
)
WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}
PAD_ID = WORD_TO_ID[PAD]

# Instrumentation: counts calls into text-dependent code paths so callers can
# assert that a text-free training run never touches them.
USAGE: Counter = Counter()


class ParseError(ValueError):
    """Malformed report; ``position`` is the offending token index."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at token {position})")
        self.position = position


class ReportValidationError(ValueError):
    pass


@dataclass(frozen=True)
class Location:
    vertical: str  # space-joined subset of VERTICAL, e.g. "middle lower"
    side: str

    def render(self) -> str:
        return f"{self.vertical} {self.side} lung"


@dataclass
class StructuredReport:
    raw: str
    laterality: str
    lesion_count: int
    locations: list[Location]
    tokens: list[int] = field(default_factory=list)

    def key(self) -> tuple:
        return (self.laterality, self.lesion_count, tuple(self.locations))

    def __eq__(self, other) -> bool:
        return isinstance(other, StructuredReport) and self.key() == other.key()


_TOKEN_RE = re.compile(r"[a-z]+|[,.]|\S")


def tokenize(raw: str) -> list[str]:
    return _TOKEN_RE.findall(raw.lower())


def parse_report(raw: str, max_tokens: int = 16, validate: bool = True) -> StructuredReport:
    """Parse a report sentence.

    Raises:
        ParseError: the sentence is outside the grammar.
        ReportValidationError: count/location/laterality disagree (when ``validate``).
    """
    USAGE["parse"] += 1
    toks = tokenize(raw)
    pos = 0

    def expect(*options: str) -> str:
        nonlocal pos
        if pos >= len(toks):
            raise ParseError(f"unexpected end of report, expected {'/'.join(options)}", pos)
        if toks[pos] not in options:
            raise ParseError(f"unexpected {toks[pos]!r}, expected {'/'.join(options)}", pos)
        pos += 1
        return toks[pos - 1]

    laterality = expect("bilateral", "unilateral")
    expect("pulmonary")
    expect("infection")
    expect(",")
    count = NUMBER_WORDS.index(expect(*NUMBER_WORDS)) + 1
    expect("infected")
    expect("area", "areas")
    expect(",")
    locations = []
    while True:
        start = pos
        verticals = [expect(*VERTICAL)]
        while pos < len(toks) and toks[pos] in VERTICAL:
            verticals.append(toks[pos])
            pos += 1
        side = expect(*SIDES)
        expect("lung")
        if "all" in verticals and len(verticals) > 1:
            raise ParseError("'all' cannot be combined with other vertical terms", start + 1)
        locations.append(Location(" ".join(verticals), side))
        sep = expect(",", "and", ".")
        if sep == ".":
            break
    if pos != len(toks):
        raise ParseError("trailing tokens after end of report", pos)

    report = StructuredReport(raw=raw, laterality=laterality, lesion_count=count, locations=locations)
    if validate:
        if count != len(locations):
            raise ReportValidationError(f"count {count} disagrees with {len(locations)} location phrases")
        both = {loc.side for loc in locations} == set(SIDES)
        if both != (laterality == "bilateral"):
            raise ReportValidationError(f"laterality {laterality!r} inconsistent with locations")
    report.tokens = encode(report, max_tokens)
    return report


def render_report(report: StructuredReport) -> str:
    locs = [loc.render() for loc in report.locations]
    loc_text = locs[0] if len(locs) == 1 else ", ".join(locs[:-1]) + " and " + locs[-1]
    noun = "area" if report.lesion_count == 1 else "areas"
    return (
        f"{report.laterality.capitalize()} pulmonary infection, "
        f"{NUMBER_WORDS[report.lesion_count - 1]} infected {noun}, {loc_text}."
    )


def encode(report: StructuredReport, max_tokens: int = 16) -> list[int]:
    """Word ids of the rendered report (punctuation dropped), PAD-filled."""
    words = [w for w in tokenize(render_report(report)) if w not in (",", ".")]
    if len(words) > max_tokens:
        raise ValueError(f"report needs {len(words)} tokens, more than max_tokens={max_tokens}")
    ids = [WORD_TO_ID.get(w, WORD_TO_ID[UNK]) for w in words]
    return ids + [PAD_ID] * (max_tokens - len(ids))


def embed_tokens(tokens, table: Tensor) -> Tensor:
    """Look up embedding rows for ``tokens`` (any int array shape); PAD rows are zero."""
    USAGE["embed"] += 1
    ids = np.asarray(tokens, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range for vocabulary of {table.shape[0]}")
    rows = T.take(table, ids, axis=0)
    mask = (ids != PAD_ID).astype(table.dtype)[..., None]
    return rows * Tensor(mask)


def report_vector(tokens, table: np.ndarray) -> np.ndarray:
    """Mean of the non-PAD token embeddings (plain array, no graph)."""
    ids = np.asarray(tokens, dtype=np.intp)
    ids = ids[ids != PAD_ID]
    if ids.size == 0:
        return np.zeros(table.shape[1], dtype=np.float64)
    return np.asarray(table, dtype=np.float64)[ids].mean(axis=0)


def text_sim(a, b) -> float:
    """Cosine similarity; 0 when either vector has norm below 1e-12."""
    USAGE["text_sim"] += 1
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"vector lengths differ: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


@dataclass
class BankEntry:
    vector: np.ndarray
    mask: np.ndarray
    case_id: str


class ContrastiveBank:
    """Labeled-case (report vector, mask) pairs used to pick contrastive labels.

    Vectors are computed once from a snapshot of the embedding table and never
    change afterwards; queries must use :meth:`vector` so both sides share it.
    """

    def __init__(self, table: np.ndarray):
        USAGE["bank"] += 1
        self.table = np.array(table, dtype=np.float64)
        self.entries: list[BankEntry] = []

    def vector(self, tokens) -> np.ndarray:
        return report_vector(tokens, self.table)

    def add(self, case_id: str, tokens, mask: np.ndarray) -> None:
        if self.entries and mask.shape != self.entries[0].mask.shape:
            raise ValueError(f"mask shape {mask.shape} differs from bank shape {self.entries[0].mask.shape}")
        self.entries.append(BankEntry(self.vector(tokens), np.asarray(mask), case_id))

    def __len__(self) -> int:
        return len(self.entries)


def select_contrastive(report_vec, bank: ContrastiveBank) -> tuple[np.ndarray, float]:
    """Mask of the most text-similar bank entry; ties go to the lowest case id."""
    USAGE["select"] += 1
    if not bank.entries:
        raise ValueError("contrastive bank is empty")
    best = None
    for entry in bank.entries:
        s = text_sim(report_vec, entry.vector)
        if best is None or s > best[0] or (s == best[0] and entry.case_id < best[1].case_id):
            best = (s, entry)
    return best[1].mask, best[0]
