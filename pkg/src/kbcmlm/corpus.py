"""Sentence selection and masked training instances for re-pretraining and fine-tuning."""
from __future__ import annotations

import json
import logging
import math
import os
import random
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple

from kbcmlm._io import read_jsonl, write_jsonl
from kbcmlm.tokenizer import (
    MASK_ID,
    NUM_SPECIALS,
    TokenSequence,
    VocabEntry,
    Vocabulary,
    tokenize,
    tokenize_span,
)
from kbcmlm.vocab_builder import TripleSample, bundled_templates_path

log = logging.getLogger(__name__)

PRETRAIN = "pretrain"


@dataclass(frozen=True)
class PromptTemplate:
    relation: str
    pattern: str

    def __post_init__(self):
        for slot in ("{subject}", "{mask}"):
            if self.pattern.count(slot) != 1:
                raise ValueError(
                    f"template for {self.relation}: {slot} must appear exactly once"
                )

    def split(self, subject: str) -> tuple[str, str]:
        """Text before and after the mask slot, subject filled in."""
        prefix, suffix = self.pattern.split("{mask}")
        return prefix.replace("{subject}", subject), suffix.replace("{subject}", subject)

    def fill(self, subject: str, obj: str) -> str:
        prefix, suffix = self.split(subject)
        return prefix + obj + suffix


def load_templates(path=None) -> dict[str, PromptTemplate]:
    path = bundled_templates_path() if path is None else path
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    return {rel: PromptTemplate(rel, pat) for rel, pat in raw.items()}


def template_for(templates: Mapping[str, PromptTemplate], relation: str) -> PromptTemplate:
    try:
        return templates[relation]
    except KeyError:
        raise KeyError(f"missing template for relation {relation!r}") from None


@dataclass(frozen=True)
class MaskedInstance:
    """An encoder input with ``(position, original id)`` prediction targets.

    For fine-tune instances every target position holds MASK. Pretraining
    instances also carry targets at positions left unchanged or replaced by
    a random token (the 10%/10% branches).
    """

    input: TokenSequence
    targets: tuple[tuple[int, int], ...]
    origin: str = PRETRAIN

    @property
    def positions(self) -> list[int]:
        return [p for p, _ in self.targets]

    @property
    def target_ids(self) -> list[int]:
        return [t for _, t in self.targets]

    def restored(self) -> TokenSequence:
        ids = list(self.input.ids)
        for p, t in self.targets:
            ids[p] = t
        return TokenSequence(tuple(ids), self.input.spaces)

    def to_json(self) -> dict:
        return {
            "ids": list(self.input.ids),
            "spaces": list(self.input.spaces) if self.input.spaces is not None else None,
            "targets": [list(t) for t in self.targets],
            "origin": self.origin,
        }

    @classmethod
    def from_json(cls, row: dict) -> "MaskedInstance":
        spaces = tuple(row["spaces"]) if row.get("spaces") is not None else None
        return cls(
            TokenSequence(tuple(row["ids"]), spaces),
            tuple((int(p), int(t)) for p, t in row["targets"]),
            row.get("origin", PRETRAIN),
        )


def save_instances(path: str | os.PathLike, instances: Iterable[MaskedInstance]) -> None:
    write_jsonl(path, (i.to_json() for i in instances))


def load_instances(path: str | os.PathLike) -> list[MaskedInstance]:
    return [MaskedInstance.from_json(row) for _, row in read_jsonl(path)]


class FilterResult(NamedTuple):
    kept: list[tuple[str, list[VocabEntry]]]
    type_counts: Counter
    total: int


def filter_sentences(
    corpus: Iterable[str], vocab: Vocabulary, min_entity_count: int = 1
) -> FilterResult:
    """Keep sentences mentioning at least ``min_entity_count`` distinct entity atoms.

    A kept sentence counts once toward every entity type it mentions, so the
    per-type counts can sum to more than ``total``.
    """
    if not len(vocab.atom_ids):
        raise ValueError("vocabulary has no entity atoms")
    kept = []
    counts: Counter[str] = Counter()
    for sentence in corpus:
        atoms = list(dict.fromkeys(vocab.find_entities(sentence)))
        if len(atoms) < min_entity_count:
            continue
        entries = [vocab.entry(a) for a in atoms]
        kept.append((sentence, entries))
        counts.update({e.entity_type for e in entries})
    if not kept:
        log.warning("no sentence mentions a vocabulary entity")
    return FilterResult(kept, counts, len(kept))


def _ceil(x: float) -> int:
    # guard 0.15 * 20 == 3.0000000000000004
    return math.ceil(round(x, 9))


def make_pretrain_instances(
    sentences: Iterable[str],
    vocab: Vocabulary,
    mask_rate: float = 0.15,
    seed: int = 0,
    *,
    max_len: int = 64,
    entity_matching: bool = True,
    dupe_factor: int = 1,
    entity_mask_boost: float = 0.0,
) -> list[MaskedInstance]:
    """Standard MLM masking: pick ``ceil(mask_rate * n)`` positions, then 80% MASK / 10% random / 10% kept.

    ``dupe_factor`` repeats the corpus with fresh masks. ``entity_mask_boost``
    multiplies the selection weight of entity-atom positions by ``1 + boost``.
    """
    if not 0.0 < mask_rate < 1.0:
        raise ValueError("mask_rate must be in (0, 1)")
    sentences = list(sentences)
    rng = random.Random(seed)
    top = len(vocab) if entity_matching else vocab.base_size
    out = []
    for _ in range(dupe_factor):
        for sentence in sentences:
            seq = tokenize(sentence, vocab, entity_matching)
            if len(seq) > max_len - 2:
                seq = TokenSequence(seq.ids[: max_len - 2], seq.spaces[: max_len - 2])
            seq = seq.with_specials()
            maskable = [i for i, t in enumerate(seq.ids) if t >= NUM_SPECIALS]
            if not maskable:
                continue
            k = _ceil(mask_rate * len(maskable))
            if entity_mask_boost > 0:
                weights = [
                    1.0 + entity_mask_boost if vocab.is_atom(seq.ids[i]) else 1.0 for i in maskable
                ]
                chosen = _weighted_sample(rng, maskable, weights, k)
            else:
                chosen = rng.sample(maskable, k)
            ids = list(seq.ids)
            targets = []
            for pos in sorted(chosen):
                targets.append((pos, ids[pos]))
                r = rng.random()
                if r < 0.8:
                    ids[pos] = MASK_ID
                elif r < 0.9:
                    ids[pos] = rng.randrange(NUM_SPECIALS, top)
            out.append(MaskedInstance(TokenSequence(tuple(ids), seq.spaces), tuple(targets)))
    return out


def _weighted_sample(rng: random.Random, items: list[int], weights: list[float], k: int) -> list[int]:
    items, weights = list(items), list(weights)
    chosen = []
    for _ in range(k):
        (idx,) = rng.choices(range(len(items)), weights=weights)
        chosen.append(items.pop(idx))
        weights.pop(idx)
    return chosen


def _object_tokens(text: str, start: int, end: int, vocab: Vocabulary, entity_matching: bool) -> TokenSequence:
    obj = text[start:end]
    tid = vocab.id_of(obj)
    if tid is not None and (entity_matching or not vocab.is_atom(tid)) and tid >= NUM_SPECIALS:
        space = start > 0 and text[start - 1].isspace()
        return TokenSequence((tid,), (space,))
    return tokenize_span(text, start, end, vocab, entity_matching=False)


def make_finetune_instances(
    samples: Iterable[TripleSample],
    templates: Mapping[str, PromptTemplate],
    vocab: Vocabulary,
    *,
    max_len: int = 64,
    entity_matching: bool = True,
) -> list[MaskedInstance]:
    """One instance per (subject, relation, gold object).

    The object becomes a single MASK when its surface is one token (an entity
    atom, or a single base token), otherwise one MASK per base sub-token.
    """
    out = []
    for s in samples:
        template = template_for(templates, s.relation)
        prefix, _ = template.split(s.subject)
        for obj in s.objects:
            text = template.fill(s.subject, obj)
            a, b = len(prefix), len(prefix) + len(obj)
            head = tokenize_span(text, 0, a, vocab, entity_matching)
            mid = _object_tokens(text, a, b, vocab, entity_matching)
            tail = tokenize_span(text, b, len(text), vocab, entity_matching)
            if not mid.ids:
                log.warning("object %r of %s has no tokens; skipped", obj, s.relation)
                continue
            seq = TokenSequence(head.ids + mid.ids + tail.ids, head.spaces + mid.spaces + tail.spaces)
            if len(seq) > max_len - 2:
                log.warning("instance for %r / %s too long; skipped", s.subject, s.relation)
                continue
            seq = seq.with_specials()
            first = 1 + len(head)
            positions = range(first, first + len(mid))
            ids = list(seq.ids)
            targets = tuple((p, ids[p]) for p in positions)
            for p in positions:
                ids[p] = MASK_ID
            out.append(
                MaskedInstance(TokenSequence(tuple(ids), seq.spaces), targets, f"finetune:{s.relation}")
            )
    return out


def make_query(
    subject: str,
    template: PromptTemplate,
    vocab: Vocabulary,
    *,
    entity_matching: bool = True,
) -> TokenSequence:
    """Prompt with a single MASK in the object slot, wrapped in CLS/SEP."""
    prefix, suffix = template.split(subject)
    text = prefix + "[MASK]" + suffix
    return tokenize(text, vocab, entity_matching).with_specials()
