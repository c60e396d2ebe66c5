"""Fill-mask object prediction with per-relation thresholds."""
from __future__ import annotations

import math
import os
import re
import statistics
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

from kbcmlm._io import read_json, write_json
from kbcmlm.corpus import PromptTemplate, make_query, template_for
from kbcmlm.evaluation import score_sample
from kbcmlm.model import MlmModel, forward_logits
from kbcmlm.tokenizer import NUM_SPECIALS, Vocabulary
from kbcmlm.vocab_builder import RelationSchema, TripleSample

DEFAULT_GRID = tuple(round(0.01 * i, 2) for i in range(1, 100))
DEFAULT_KEY = "__default__"
_DIGITS = re.compile(r"[0-9]+")


@dataclass(frozen=True)
class Candidate:
    surface: str
    token_id: int
    score: float
    entity_id: str | None = None


@dataclass
class RelationThresholds:
    per_relation: dict[str, float]
    default: float = 0.5

    def __post_init__(self):
        for rel, t in [*self.per_relation.items(), (DEFAULT_KEY, self.default)]:
            if not 0.0 <= t <= 1.0:
                raise ValueError(f"threshold for {rel} outside [0, 1]: {t}")

    def get(self, relation: str) -> float:
        return self.per_relation.get(relation, self.default)

    def save(self, path: str | os.PathLike) -> None:
        write_json(path, {**self.per_relation, DEFAULT_KEY: self.default})

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RelationThresholds":
        raw = dict(read_json(path))
        default = float(raw.pop(DEFAULT_KEY, 0.5))
        return cls({k: float(v) for k, v in raw.items()}, default)


def _candidate_pool(vocab: Vocabulary, relation: str, schema: RelationSchema | None, type_filter: bool) -> np.ndarray:
    if not type_filter:
        return np.arange(NUM_SPECIALS, len(vocab))
    if schema is None:
        raise ValueError("type_filter needs a schema")
    rel = schema.relation(relation)
    if rel.numeric:
        ids = [
            i for i in range(NUM_SPECIALS, vocab.base_size) if _DIGITS.fullmatch(vocab.surface(i))
        ]
    else:
        ids = [i for i in vocab.atom_ids if vocab.entry(i).entity_type == rel.object_type]
    return np.asarray(ids, dtype=np.int64)


def predict_candidates(
    model: MlmModel,
    vocab: Vocabulary,
    subject: str,
    relation: str,
    templates: Mapping[str, PromptTemplate],
    top_k: int = 20,
    *,
    type_filter: bool = False,
    raw_logits: bool = False,
    schema: RelationSchema | None = None,
    entity_matching: bool = True,
) -> list[Candidate]:
    """Top-``top_k`` tokens at the single MASK of the relation's prompt.

    Scores are softmax probabilities over the whole vocabulary, or the
    sigmoid of the raw logit with ``raw_logits``. Special tokens are never
    candidates. Order: score descending, then token id ascending.
    """
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    template = template_for(templates, relation)
    query = make_query(subject, template, vocab, entity_matching=entity_matching)
    (pos,) = query.mask_positions
    logits = forward_logits(model, query)[pos].double()
    scores = torch.sigmoid(logits) if raw_logits else torch.softmax(logits, dim=-1)
    scores = scores.numpy()
    pool = _candidate_pool(vocab, relation, schema, type_filter)
    pool = pool[pool < len(scores)]
    order = np.lexsort((pool, -scores[pool]))[:top_k]
    return [
        Candidate(vocab.surface(int(i)), int(i), float(scores[i]), vocab.entry(int(i)).entity_id)
        for i in pool[order]
    ]


def apply_threshold(cands: Iterable[Candidate], relation: str, thresholds: RelationThresholds | float) -> list[Candidate]:
    t = thresholds if isinstance(thresholds, (int, float)) else thresholds.get(relation)
    return [c for c in cands if c.score >= t]


def validate_numeric(cands: Iterable[Candidate], relation: str, schema: RelationSchema) -> list[Candidate]:
    """For numeric relations keep only canonical non-negative integers ("007" -> "7")."""
    cands = list(cands)
    if not schema.relation(relation).numeric:
        return cands
    out, seen = [], set()
    for c in cands:
        if not _DIGITS.fullmatch(c.surface):
            continue
        canon = str(int(c.surface))
        if canon in seen:
            continue
        seen.add(canon)
        out.append(replace(c, surface=canon, entity_id=None))
    return out


Resolver = Callable[[str], "str | None"]


def disambiguate(
    cands: Iterable[Candidate], resolver: Resolver | Mapping[str, str], numeric: bool = False
) -> list[Candidate]:
    """Fill ``entity_id`` from ``resolver``; unresolved candidates stay with ``None``.

    Transport failures raised by the resolver propagate unchanged.
    """
    cands = list(cands)
    if numeric:
        return cands
    lookup = resolver.get if isinstance(resolver, Mapping) else resolver
    return [c if c.entity_id is not None else replace(c, entity_id=lookup(c.surface)) for c in cands]


def _relation_f1(rows: Sequence[tuple[list[Candidate], Sequence[str]]], t: float) -> float:
    return sum(score_sample([c.surface for c in cands if c.score >= t], gold).f1 for cands, gold in rows) / len(rows)


def select_thresholds(
    scored: Iterable[tuple[str, list[Candidate], Sequence[str]]], grid: Sequence[float] = DEFAULT_GRID
) -> RelationThresholds:
    """Pick per relation the grid value with the best mean F1, smallest on ties.

    ``scored`` holds ``(relation, candidates, gold objects)`` per validation
    sample. The default for unseen relations is the median of the picks.
    """
    grid = sorted(set(grid))
    if not grid or any(not 0.0 <= t <= 1.0 for t in grid):
        raise ValueError("grid must be non-empty with values in [0, 1]")
    by_rel: dict[str, list] = {}
    for relation, cands, gold in scored:
        by_rel.setdefault(relation, []).append((cands, gold))
    if not by_rel:
        raise ValueError("empty validation set")
    chosen = {}
    for relation, rows in sorted(by_rel.items()):
        best_t, best_f1 = grid[0], -math.inf
        for t in grid:
            f1 = _relation_f1(rows, t)
            if f1 > best_f1:
                best_t, best_f1 = t, f1
        chosen[relation] = best_t
    return RelationThresholds(chosen, float(statistics.median(chosen.values())))


@dataclass(frozen=True)
class InferenceOptions:
    top_k: int = 20
    type_filter: bool = False
    raw_logits: bool = False
    entity_matching: bool = True


def scored_candidates(
    model: MlmModel,
    vocab: Vocabulary,
    sample: TripleSample,
    templates: Mapping[str, PromptTemplate],
    schema: RelationSchema,
    options: InferenceOptions = InferenceOptions(),
) -> list[Candidate]:
    cands = predict_candidates(
        model,
        vocab,
        sample.subject,
        sample.relation,
        templates,
        options.top_k,
        type_filter=options.type_filter,
        raw_logits=options.raw_logits,
        schema=schema,
        entity_matching=options.entity_matching,
    )
    return validate_numeric(cands, sample.relation, schema)


def sweep_thresholds(
    model: MlmModel,
    vocab: Vocabulary,
    validation: Sequence[TripleSample],
    templates: Mapping[str, PromptTemplate],
    grid: Sequence[float] = DEFAULT_GRID,
    *,
    schema: RelationSchema,
    options: InferenceOptions = InferenceOptions(),
) -> RelationThresholds:
    if not validation:
        raise ValueError("empty validation set")
    return select_thresholds(
        (
            (s.relation, scored_candidates(model, vocab, s, templates, schema, options), s.objects)
            for s in validation
        ),
        grid,
    )


def predict_objects(
    model: MlmModel,
    vocab: Vocabulary,
    queries: Iterable[TripleSample],
    templates: Mapping[str, PromptTemplate],
    thresholds: RelationThresholds,
    *,
    schema: RelationSchema,
    options: InferenceOptions = InferenceOptions(),
    resolver: Resolver | Mapping[str, str] | None = None,
) -> list[dict]:
    """Prediction rows in the challenge JSONL layout."""
    rows = []
    for q in queries:
        cands = scored_candidates(model, vocab, q, templates, schema, options)
        cands = apply_threshold(cands, q.relation, thresholds)
        if resolver is not None:
            cands = disambiguate(cands, resolver, numeric=schema.relation(q.relation).numeric)
        rows.append(
            {
                "SubjectEntity": q.subject,
                "Relation": q.relation,
                "ObjectEntities": [c.surface for c in cands],
                "ObjectEntitiesID": [c.entity_id for c in cands],
                "Scores": [round(c.score, 6) for c in cands],
            }
        )
    return rows
