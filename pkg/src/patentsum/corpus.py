"""Patent-text corpus tooling.

Covers the full data path in front of the model: markup cleaning, CJK/Latin
tokenization, vocabulary construction with reserved ids, extended-vocabulary
encoding for copy decoding, deterministic dataset splitting, JSONL record
files, and a synthetic-corpus generator for desk-scale experiments.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, START, STOP = "<PAD>", "<UNK>", "<START>", "<STOP>"
RESERVED_TOKENS = (PAD, UNK, START, STOP)
PAD_ID, UNK_ID, START_ID, STOP_ID = 0, 1, 2, 3

MAX_INPUT_LEN = 500
MAX_OUTPUT_LEN = 100


class DataError(ValueError):
    """A record or dataset violates the corpus contract."""


# ---------------------------------------------------------------------------
# Cleaning
# ---------------------------------------------------------------------------

# The nine cleaning patterns, applied in this order. Each entry is
# (name, compiled pattern, replacement); the title pattern carries a None
# replacement because it is an extractor, not a substitution (see
# extract_title), and is skipped by clean_text.
CLEANING_STEPS: list[tuple[str, re.Pattern, str | None]] = [
    ("script", re.compile(r"<script[^>]*?>[\s\S]*?</script>"), ""),
    ("style", re.compile(r"<style[^>]*?>[\s\S]*?</style>"), ""),
    ("tags", re.compile(r"<(?!div|/div|p|/p|br)[^>]*>"), ""),
    ("tr", re.compile(r"<tr>(.*?)</tr>"), r"\1"),
    ("th", re.compile(r"<th>(.*?)</th>"), r"\1"),
    ("td", re.compile(r"<td>(.*?)</td>"), r"\1"),
    ("title", re.compile(r"(?<=<title>).*?(?=</title>)"), None),
    ("anchor", re.compile(r"<a.*?href=.*?</a>"), ""),
    ("whitespace", re.compile(r"\s*|\t|\r|\n"), ""),
]

# Structural tags survive the generic tag pass; they are turned into a
# boundary so adjacent text blocks do not merge into one word.
_BOUNDARY_TAGS = re.compile(r"</?(?:div|p|br)\b[^>]*/?>")
_COLLAPSE_WS = re.compile(r"\s+")


def clean_text(raw: str, collapse_whitespace: bool = False) -> str:
    """Strip markup and normalize whitespace.

    Whitespace is deleted outright by default (the right behaviour for CJK
    text, where spaces carry no meaning); ``collapse_whitespace=True``
    collapses runs to single spaces instead, for Latin-script corpora.
    Idempotent on already-clean text.
    """
    text = raw
    for name, pattern, repl in CLEANING_STEPS:
        if repl is None:
            continue
        if name == "whitespace":
            if collapse_whitespace:
                text = _COLLAPSE_WS.sub(" ", text).strip()
            else:
                text = pattern.sub(repl, text)
        else:
            text = pattern.sub(repl, text)
            if name == "tags":
                text = _BOUNDARY_TAGS.sub("\n" if not collapse_whitespace else " ", text)
    return text


def extract_title(raw: str) -> str | None:
    """Pull the <title> payload out of raw markup, if present."""
    m = CLEANING_STEPS[6][1].search(raw)
    return m.group(0) if m else None


# ---------------------------------------------------------------------------
# Tokenization
# ---------------------------------------------------------------------------

_CJK_MODE = re.compile(r"[A-Za-z0-9]+|[^\sA-Za-z0-9]")

TOKENIZER_MODES = ("char_cjk", "whitespace")


def tokenize(text: str, mode: str = "char_cjk") -> list[str]:
    """Split cleaned text into tokens.

    ``char_cjk``: every non-alphanumeric codepoint (CJK characters,
    punctuation) is its own token; contiguous Latin/digit runs stay whole.
    ``whitespace``: split on blanks.
    """
    if mode == "char_cjk":
        return _CJK_MODE.findall(text)
    if mode == "whitespace":
        return text.split()
    raise ValueError(f"unknown tokenizer mode {mode!r}; expected one of {TOKENIZER_MODES}")


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------

RECORD_FIELDS = ("title", "publication_number", "abstract", "specification", "claims")


@dataclass
class PatentRecord:
    title: str
    publication_number: str
    abstract: str
    specification: str
    claims: str

    def cleaned(self, collapse_whitespace: bool = False) -> "PatentRecord":
        return PatentRecord(
            title=clean_text(self.title, collapse_whitespace),
            publication_number=self.publication_number.strip(),
            abstract=clean_text(self.abstract, collapse_whitespace),
            specification=clean_text(self.specification, collapse_whitespace),
            claims=clean_text(self.claims, collapse_whitespace),
        )

    def validate(self, require_abstract: bool = True) -> None:
        if not self.specification:
            raise DataError(f"{self.publication_number}: empty specification after cleaning")
        if not self.claims:
            raise DataError(f"{self.publication_number}: empty claims after cleaning")
        if require_abstract and not self.abstract:
            raise DataError(f"{self.publication_number}: empty abstract")


def read_records(path: str | Path) -> list[PatentRecord]:
    """Read one-JSON-object-per-line record files (UTF-8)."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            missing = [k for k in RECORD_FIELDS if k not in obj]
            if missing:
                raise DataError(f"{path}:{lineno}: missing fields {missing}")
            records.append(PatentRecord(**{k: obj[k] for k in RECORD_FIELDS}))
    return records


def write_records(path: str | Path, records: Iterable[PatentRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({k: getattr(r, k) for k in RECORD_FIELDS}, ensure_ascii=False))
            fh.write("\n")


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------


class Vocabulary:
    """Dense token<->id bijection with fixed reserved ids.

    Ids 0..3 are PAD, UNK, START and STOP. Construction keeps the most
    frequent tokens up to ``max_size`` total entries; frequency ties break
    by first occurrence in the corpus, which makes builds deterministic.
    """

    def __init__(self, tokens: Sequence[str], frequencies: dict[str, int] | None = None):
        self.tokens = list(RESERVED_TOKENS) + [t for t in tokens if t not in RESERVED_TOKENS]
        self._ids = {t: i for i, t in enumerate(self.tokens)}
        if len(self._ids) != len(self.tokens):
            raise DataError("duplicate tokens in vocabulary")
        self.frequencies = {t: 0 for t in RESERVED_TOKENS} | dict(frequencies or {})

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id_for(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def token_for(self, token_id: int) -> str:
        return self.tokens[token_id]

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, tok in enumerate(self.tokens):
                fh.write(f"{tok}\t{i}\t{self.frequencies.get(tok, 0)}\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        tokens, freqs = [], {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                tok, idx, freq = line.rstrip("\n").split("\t")
                tokens.append(tok)
                freqs[tok] = int(freq)
        if tokens[: len(RESERVED_TOKENS)] != list(RESERVED_TOKENS):
            raise DataError(f"{path}: reserved ids are not the expected header")
        vocab = cls(tokens[len(RESERVED_TOKENS):], freqs)
        return vocab


def build_vocab(corpus: Iterable[Sequence[str]], max_size: int = 100_000) -> Vocabulary:
    """Most-frequent tokens from ``corpus`` plus the reserved ids."""
    if max_size <= len(RESERVED_TOKENS):
        raise DataError(f"max_size must exceed {len(RESERVED_TOKENS)} reserved ids")
    counts: Counter[str] = Counter()
    first_seen: dict[str, int] = {}
    n_seqs = 0
    for seq in corpus:
        n_seqs += 1
        for tok in seq:
            counts[tok] += 1
            if tok not in first_seen:
                first_seen[tok] = len(first_seen)
    if n_seqs == 0 or not counts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts, key=lambda t: (-counts[t], first_seen[t]))
    keep = ranked[: max_size - len(RESERVED_TOKENS)]
    return Vocabulary(keep, {t: counts[t] for t in keep})


# ---------------------------------------------------------------------------
# Encoding with a per-example extended vocabulary
# ---------------------------------------------------------------------------


@dataclass
class EncodedExample:
    publication_number: str
    spec_ids: list[int]
    spec_extended_ids: list[int]
    claims_ids: list[int]
    summary_ids: list[int]
    summary_extended_ids: list[int]
    oov_words: list[str]

    def extended_size(self, vocab_size: int) -> int:
        return vocab_size + len(self.oov_words)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "EncodedExample":
        return cls(**json.loads(line))


def encode_example(
    record: PatentRecord,
    vocab: Vocabulary,
    tokenizer_mode: str = "char_cjk",
    max_input: int = MAX_INPUT_LEN,
    max_output: int = MAX_OUTPUT_LEN,
) -> EncodedExample:
    """Turn a cleaned record into id sequences.

    Specification OOV tokens get extended ids ``vocab_size + k`` in first
    occurrence order; the summary is framed with START/STOP and truncated so
    the whole framed sequence fits ``max_output``.
    """
    spec_tokens = tokenize(record.specification, tokenizer_mode)[:max_input]
    if not spec_tokens:
        raise DataError(f"{record.publication_number}: empty specification after cleaning")
    claims_tokens = tokenize(record.claims, tokenizer_mode)[:max_input]
    summary_tokens = tokenize(record.abstract, tokenizer_mode)[: max(0, max_output - 2)]

    oov_words: list[str] = []
    oov_index: dict[str, int] = {}
    spec_ids, spec_ext = [], []
    for tok in spec_tokens:
        i = vocab.id_for(tok)
        spec_ids.append(i)
        if i == UNK_ID and tok != UNK:
            if tok not in oov_index:
                oov_index[tok] = len(oov_words)
                oov_words.append(tok)
            spec_ext.append(len(vocab) + oov_index[tok])
        else:
            spec_ext.append(i)

    claims_ids = [vocab.id_for(t) for t in claims_tokens]

    summary_ids = [START_ID] + [vocab.id_for(t) for t in summary_tokens] + [STOP_ID]
    summary_ext = [START_ID]
    for tok in summary_tokens:
        i = vocab.id_for(tok)
        if i == UNK_ID and tok in oov_index:
            summary_ext.append(len(vocab) + oov_index[tok])
        else:
            summary_ext.append(i)
    summary_ext.append(STOP_ID)

    return EncodedExample(
        publication_number=record.publication_number,
        spec_ids=spec_ids,
        spec_extended_ids=spec_ext,
        claims_ids=claims_ids,
        summary_ids=summary_ids,
        summary_extended_ids=summary_ext,
        oov_words=oov_words,
    )


def decode_extended(ids: Sequence[int], vocab: Vocabulary, oov_words: Sequence[str]) -> list[str]:
    """Map extended-vocabulary ids back to tokens."""
    out = []
    for i in ids:
        if i < len(vocab):
            out.append(vocab.token_for(i))
        else:
            k = i - len(vocab)
            if k >= len(oov_words):
                raise DataError(f"extended id {i} out of range for {len(oov_words)} OOV words")
            out.append(oov_words[k])
    return out


def read_encoded(path: str | Path) -> list[EncodedExample]:
    with open(path, encoding="utf-8") as fh:
        return [EncodedExample.from_json(line) for line in fh if line.strip()]


def write_encoded(path: str | Path, examples: Iterable[EncodedExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(ex.to_json())
            fh.write("\n")


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------


@dataclass
class DatasetSplit:
    train: list[PatentRecord]
    test: list[PatentRecord]
    validation: list[PatentRecord]
    seed: int


def split_dataset(records: Sequence[PatentRecord], seed: int) -> DatasetSplit:
    """Deterministic 8:1:1 partition, disjoint by publication number."""
    if len(records) < 10:
        raise DataError(f"need at least 10 records to split, got {len(records)}")
    groups: dict[str, list[PatentRecord]] = {}
    order: list[str] = []
    for r in records:
        if r.publication_number not in groups:
            groups[r.publication_number] = []
            order.append(r.publication_number)
        groups[r.publication_number].append(r)
    rng = np.random.default_rng(seed)
    shuffled = list(order)
    rng.shuffle(shuffled)
    n = len(shuffled)
    n_test = max(1, round(n / 10))
    n_val = max(1, round(n / 10))
    test_keys = shuffled[:n_test]
    val_keys = shuffled[n_test : n_test + n_val]
    train_keys = shuffled[n_test + n_val :]

    def collect(keys: list[str]) -> list[PatentRecord]:
        return [r for k in keys for r in groups[k]]

    return DatasetSplit(collect(train_keys), collect(test_keys), collect(val_keys), seed)


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

_NOUNS = (
    "pump valve rotor stator seal gear shaft duct filter nozzle piston flange "
    "bearing manifold housing bracket".split()
)
_VERBS = "drives seals cools guides links holds feeds vents".split()
_ADJECTIVES = "radial axial sealed coated modular rigid".split()
_KEY_TERMS = ("turbine", "clutch", "damper", "solenoid")


@dataclass
class GrammarParams:
    """Knobs for the synthetic patent grammar.

    Key terms live only in claims and abstracts; rare terms are unique
    per record, appear in the first specification sentence and again in
    the abstract, and are meant to fall outside any frequency-capped
    vocabulary. Shrinking the word banks makes distinct records share
    identical specification templates, which removes any specification
    signal about the claims key term (useful for dual-source experiments).
    """

    key_terms: tuple[str, ...] = _KEY_TERMS
    body_sentences: int = 2
    min_rare_terms: int = 1
    max_rare_terms: int = 3
    key_mentions_in_abstract: int = 2
    repetition_prone: bool = False
    noun_bank: int = len(_NOUNS)
    verb_bank: int = len(_VERBS)
    adjective_bank: int = len(_ADJECTIVES)

    def __post_init__(self):
        if not (1 <= self.min_rare_terms <= self.max_rare_terms):
            raise ValueError("rare-term bounds must satisfy 1 <= min <= max")
        if not (1 <= self.noun_bank <= len(_NOUNS)):
            raise ValueError(f"noun_bank must be in [1, {len(_NOUNS)}]")
        if not (1 <= self.verb_bank <= len(_VERBS)):
            raise ValueError(f"verb_bank must be in [1, {len(_VERBS)}]")
        if not (1 <= self.adjective_bank <= len(_ADJECTIVES)):
            raise ValueError(f"adjective_bank must be in [1, {len(_ADJECTIVES)}]")


def _rare_term(index: int, sub: int) -> str:
    return f"zq{index}x{sub}"


def generate_synthetic(
    n: int, seed: int, grammar: GrammarParams | None = None
) -> list[PatentRecord]:
    """Deterministic templated corpus whose abstracts need both sources.

    Each abstract is the first specification sentence (which carries a
    rare, per-record term) followed by a clause built around the claims'
    key term, so a model that ignores the claims has a measurable handicap
    and a model without copying cannot produce the rare term.
    """
    if n <= 0:
        raise DataError(f"n must be positive, got {n}")
    g = grammar or GrammarParams()
    rng = np.random.default_rng(seed)
    nouns = _NOUNS[: g.noun_bank]
    verbs = _VERBS[: g.verb_bank]
    adjectives = _ADJECTIVES[: g.adjective_bank]
    records = []
    for i in range(n):
        n_rare = int(rng.integers(g.min_rare_terms, g.max_rare_terms + 1))
        rare = [_rare_term(i, s) for s in range(n_rare)]
        adj = adjectives[rng.integers(len(adjectives))]
        noun_a = nouns[rng.integers(len(nouns))]
        noun_b = nouns[rng.integers(len(nouns))]
        verb = verbs[rng.integers(len(verbs))]
        first_sentence = ["the", adj, noun_a, verb, "the", rare[0], noun_b]

        body = []
        for b in range(g.body_sentences):
            words = [
                "the",
                nouns[rng.integers(len(nouns))],
                verbs[rng.integers(len(verbs))],
                "the",
                adjectives[rng.integers(len(adjectives))],
                nouns[rng.integers(len(nouns))],
            ]
            if b + 1 < n_rare:
                words.append(rare[b + 1])
            body.append(words)

        key = g.key_terms[int(rng.integers(len(g.key_terms)))]
        claims = [
            "claim",
            "1",
            "an",
            "apparatus",
            "comprising",
            "a",
            key,
            "assembly",
            "coupled",
            "to",
            "the",
            noun_a,
        ]

        abstract = list(first_sentence)
        if g.repetition_prone:
            # long copy-heavy references with recurring sub-phrases: the
            # whole specification body flows into the abstract
            for words in body:
                abstract += words
        key_clause = ["with", key, "unit"]
        if g.key_mentions_in_abstract >= 2:
            key_clause += ["near", "the", key, "mount"]
        abstract += key_clause

        spec_sentences = [first_sentence] + body
        records.append(
            PatentRecord(
                title=f"synthetic apparatus {i}",
                publication_number=f"SYN{i:05d}",
                abstract=" ".join(abstract),
                specification=" . ".join(" ".join(s) for s in spec_sentences),
                claims=" ".join(claims),
            )
        )
    return records


def synthetic_vocab_size(records: Sequence[PatentRecord], min_frequency: int = 4) -> int:
    """Vocabulary cap that excludes the per-record rare terms.

    Rare terms occur at most three times across the whole corpus (first
    sentence, abstract copy, at most one body mention), so keeping only
    tokens at or above ``min_frequency`` leaves them out.
    """
    counts: Counter[str] = Counter()
    for r in records:
        for text in (r.specification, r.claims, r.abstract):
            counts.update(tokenize(text, "whitespace"))
    common = sum(1 for c in counts.values() if c >= min_frequency)
    return len(RESERVED_TOKENS) + common
