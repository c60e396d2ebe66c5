"""Subword tokenizer with an expandable vocabulary.

Base tokens are learned from a corpus by greedy frequency merges. Entity
atoms are whole multi-word surfaces ("United States of America") that get a
single id and are matched leftmost-longest over raw text before the
remaining text is split into base sub-tokens.
"""
from __future__ import annotations

import enum
import os
import re
from collections import Counter
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Iterator, NamedTuple, Sequence

from kbcmlm._io import read_jsonl, write_jsonl

SPECIALS = ("[PAD]", "[UNK]", "[MASK]", "[CLS]", "[SEP]")
PAD_ID, UNK_ID, MASK_ID, CLS_ID, SEP_ID = range(5)
NUM_SPECIALS = len(SPECIALS)

# one word or one punctuation character
_WORD_RE = re.compile(r"\w+|[^\w\s]")
_SPECIAL_PATTERN = "|".join(re.escape(s) for s in SPECIALS)


class Kind(str, enum.Enum):
    BASE = "base"
    ENTITY = "entity"


@dataclass(frozen=True)
class VocabEntry:
    surface: str
    kind: Kind = Kind.BASE
    entity_type: str | None = None
    entity_id: str | None = None


@dataclass(frozen=True)
class TokenSequence:
    """Token ids plus, per token, whether whitespace preceded it in the source text."""

    ids: tuple[int, ...]
    spaces: tuple[bool, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        if self.spaces is not None:
            object.__setattr__(self, "spaces", tuple(bool(s) for s in self.spaces))
            if len(self.spaces) != len(self.ids):
                raise ValueError("spaces and ids differ in length")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def mask_positions(self) -> list[int]:
        return [i for i, t in enumerate(self.ids) if t == MASK_ID]

    def replace(self, position: int, token_id: int) -> "TokenSequence":
        ids = list(self.ids)
        ids[position] = token_id
        return TokenSequence(tuple(ids), self.spaces)

    def with_specials(self) -> "TokenSequence":
        """Wrap in ``[CLS] ... [SEP]``."""
        spaces = None if self.spaces is None else (False, *self.spaces, False)
        return TokenSequence((CLS_ID, *self.ids, SEP_ID), spaces)


class Vocabulary:
    """Dense id map over specials, base sub-tokens and entity atoms.

    Ids ``0..4`` are the specials, then every base token, then the entity
    atoms. Instances are treated as immutable; ``add_entity_atoms`` builds a
    new one.
    """

    def __init__(self, entries: Sequence[VocabEntry]):
        entries = list(entries)
        if tuple(e.surface for e in entries[:NUM_SPECIALS]) != SPECIALS:
            raise ValueError("vocabulary must start with the five special tokens")
        self._entries = tuple(entries)
        self._index: dict[str, int] = {}
        seen_atom = False
        for i, e in enumerate(self._entries):
            if not e.surface:
                raise ValueError(f"empty surface at id {i}")
            if e.surface in self._index:
                raise ValueError(f"duplicate surface {e.surface!r}")
            if e.kind is Kind.ENTITY:
                seen_atom = True
            elif seen_atom:
                raise ValueError(f"base token {e.surface!r} after entity atoms")
            self._index[e.surface] = i
        self.base_size = sum(1 for e in self._entries if e.kind is Kind.BASE)
        self._max_base_len = max(
            (len(e.surface) for e in self._entries[NUM_SPECIALS : self.base_size]), default=1
        )
        self._constituents = {i: self._subtokens(self._entries[i].surface) for i in self.atom_ids}

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, surface: str) -> bool:
        return surface in self._index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._entries == other._entries

    @property
    def entries(self) -> tuple[VocabEntry, ...]:
        return self._entries

    @property
    def atom_ids(self) -> range:
        return range(self.base_size, len(self._entries))

    def id_of(self, surface: str) -> int | None:
        return self._index.get(surface)

    def surface(self, token_id: int) -> str:
        if not 0 <= token_id < len(self._entries):
            raise IndexError("id out of range")
        return self._entries[token_id].surface

    def entry(self, token_id: int) -> VocabEntry:
        if not 0 <= token_id < len(self._entries):
            raise IndexError("id out of range")
        return self._entries[token_id]

    def is_atom(self, token_id: int) -> bool:
        return token_id >= self.base_size

    def constituents(self, atom_id: int) -> tuple[int, ...]:
        return self._constituents[atom_id]

    def base_only(self) -> "Vocabulary":
        return Vocabulary(self._entries[: self.base_size])

    # -- matching ----------------------------------------------------------

    @cached_property
    def _atom_regex(self) -> re.Pattern:
        # longest alternative first: re takes the first alternative that matches
        atoms = sorted(
            (self._entries[i].surface for i in self.atom_ids), key=lambda s: (-len(s), s)
        )
        parts = [_SPECIAL_PATTERN]
        if atoms:
            parts.append(r"(?<!\w)(?:" + "|".join(map(re.escape, atoms)) + r")(?!\w)")
        return re.compile("|".join(parts))

    _special_regex = re.compile(_SPECIAL_PATTERN)

    def _subtokens(self, word: str) -> tuple[int, ...]:
        out = []
        for piece_id, _, _ in self._split_words(word, 0, len(word)):
            out.append(piece_id)
        return tuple(out)

    def _split_word(self, text: str, start: int, end: int) -> Iterator[tuple[int, int, int]]:
        i = start
        while i < end:
            for j in range(min(end, i + self._max_base_len), i, -1):
                tid = self._index.get(text[i:j])
                if tid is not None and NUM_SPECIALS <= tid < self.base_size:
                    yield tid, i, j
                    i = j
                    break
            else:
                yield UNK_ID, i, i + 1
                i += 1

    def _split_words(self, text: str, start: int, end: int) -> Iterator[tuple[int, int, int]]:
        for m in _WORD_RE.finditer(text, start, end):
            yield from self._split_word(text, m.start(), m.end())

    def scan(
        self, text: str, entity_matching: bool = True, start: int = 0, end: int | None = None
    ) -> Iterator[tuple[int, int, int]]:
        """Yield ``(token_id, char_start, char_end)`` over ``text[start:end]``."""
        end = len(text) if end is None else end
        regex = self._atom_regex if entity_matching else self._special_regex
        pos = start
        for m in regex.finditer(text, start, end):
            yield from self._split_words(text, pos, m.start())
            yield self._index[m.group(0)], m.start(), m.end()
            pos = m.end()
        yield from self._split_words(text, pos, end)

    def find_entities(self, text: str) -> list[int]:
        """Atom ids matched in ``text`` (leftmost-longest, whole-word)."""
        return [
            tid for tid, _, _ in self.scan(text, entity_matching=True) if tid >= self.base_size
        ]


def _spaces_for(text: str, spans: Sequence[tuple[int, int, int]]) -> tuple[bool, ...]:
    return tuple(s > 0 and text[s - 1].isspace() for _, s, _ in spans)


def tokenize(text: str, vocab: Vocabulary, entity_matching: bool = True) -> TokenSequence:
    """Tokenize ``text``; with ``entity_matching`` whole entity surfaces become one atom id."""
    spans = list(vocab.scan(text, entity_matching))
    return TokenSequence(tuple(t for t, _, _ in spans), _spaces_for(text, spans))


def tokenize_span(
    text: str, start: int, end: int, vocab: Vocabulary, entity_matching: bool = True
) -> TokenSequence:
    """Tokenize one slice of ``text`` while keeping word boundaries and spacing of the full string."""
    spans = list(vocab.scan(text, entity_matching, start, end))
    return TokenSequence(tuple(t for t, _, _ in spans), _spaces_for(text, spans))


_STRUCTURAL = frozenset((PAD_ID, CLS_ID, SEP_ID))


def detokenize(seq: TokenSequence, vocab: Vocabulary) -> str:
    """Render ids back to text. PAD/CLS/SEP are dropped, MASK and UNK render literally."""
    spaces = seq.spaces if seq.spaces is not None else (True,) * len(seq.ids)
    parts: list[str] = []
    for tid, space in zip(seq.ids, spaces):
        if not 0 <= tid < len(vocab):
            raise ValueError("id out of range")
        if tid in _STRUCTURAL:
            continue
        if parts and space:
            parts.append(" ")
        parts.append(vocab.surface(tid))
    return "".join(parts)


def build_base_vocab(corpus: Iterable[str], target_size: int) -> Vocabulary:
    """Learn base sub-tokens by greedy pair merges.

    Starts from every character seen and repeatedly merges the most frequent
    adjacent pair inside words (ties go to the lexicographically smallest
    pair) until ``target_size`` entries, specials included, exist.
    """
    word_counts: Counter[str] = Counter()
    for line in corpus:
        word_counts.update(_WORD_RE.findall(line))
    if not word_counts:
        raise ValueError("empty corpus")
    chars = sorted({c for w in word_counts for c in w})
    if target_size < NUM_SPECIALS + len(chars):
        raise ValueError(
            f"target_size {target_size} below specials + {len(chars)} distinct characters"
        )
    tokens = list(chars)
    known = set(tokens)
    splits = {w: list(w) for w in word_counts}
    while NUM_SPECIALS + len(tokens) < target_size:
        pairs: Counter[tuple[str, str]] = Counter()
        for w, syms in splits.items():
            n = word_counts[w]
            for a, b in zip(syms, syms[1:]):
                pairs[a, b] += n
        if not pairs:
            break
        (a, b), _ = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))
        merged = a + b
        if merged not in known:
            known.add(merged)
            tokens.append(merged)
        for w, syms in splits.items():
            if len(syms) < 2:
                continue
            out, i = [], 0
            while i < len(syms):
                if i + 1 < len(syms) and syms[i] == a and syms[i + 1] == b:
                    out.append(merged)
                    i += 2
                else:
                    out.append(syms[i])
                    i += 1
            splits[w] = out
    return Vocabulary(
        [VocabEntry(s) for s in SPECIALS] + [VocabEntry(t) for t in tokens]
    )


class AtomAddition(NamedTuple):
    vocab: Vocabulary
    added: int
    rejected: list[str]


def add_entity_atoms(
    vocab: Vocabulary, entities: Iterable[tuple[str, str | None, str | None]]
) -> AtomAddition:
    """Append entity atoms after the existing ids.

    Surfaces already in the vocabulary are skipped. Empty surfaces, and
    surfaces whose sub-tokens are all unknown, go to ``rejected``.
    """
    entries = list(vocab.entries)
    seen = {e.surface for e in entries}
    rejected: list[str] = []
    added = 0
    for surface, etype, eid in entities:
        if surface in seen:
            continue
        if not surface or not surface.strip():
            rejected.append(surface)
            continue
        pieces = vocab._subtokens(surface)
        if not pieces or all(p == UNK_ID for p in pieces):
            rejected.append(surface)
            continue
        entries.append(VocabEntry(surface, Kind.ENTITY, etype, eid))
        seen.add(surface)
        added += 1
    return AtomAddition(Vocabulary(entries), added, rejected)


def save_vocab(vocab: Vocabulary, path: str | os.PathLike) -> None:
    write_jsonl(
        path,
        (
            {
                "surface": e.surface,
                "kind": e.kind.value,
                "type": e.entity_type,
                "entity_id": e.entity_id,
            }
            for e in vocab.entries[NUM_SPECIALS:]
        ),
    )


def load_vocab(path: str | os.PathLike) -> Vocabulary:
    entries = [VocabEntry(s) for s in SPECIALS]
    for lineno, row in read_jsonl(path):
        try:
            entries.append(
                VocabEntry(row["surface"], Kind(row["kind"]), row.get("type"), row.get("entity_id"))
            )
        except (KeyError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: bad vocabulary entry ({exc})") from exc
    return Vocabulary(entries)
