"""Typed entity vocabulary from the relation schema, dataset splits and a KG dump."""
from __future__ import annotations

import json
import logging
import os
from collections import Counter
from dataclasses import dataclass
from importlib import resources
from typing import Iterable, NamedTuple, Sequence

from kbcmlm._io import read_jsonl, write_jsonl
from kbcmlm.tokenizer import AtomAddition, Vocabulary, add_entity_atoms

log = logging.getLogger(__name__)

SOURCE_DATASET = "dataset"
SOURCE_KG = "kg_dump"


@dataclass(frozen=True)
class Relation:
    subject_type: str
    object_type: str
    numeric: bool = False


class RelationSchema(dict):
    """``relation name -> Relation``."""

    @property
    def types(self) -> set[str]:
        return {t for r in self.values() for t in (r.subject_type, r.object_type)}

    @property
    def numeric_types(self) -> set[str]:
        return {r.object_type for r in self.values() if r.numeric}

    def relation(self, name: str) -> Relation:
        try:
            return self[name]
        except KeyError:
            raise KeyError(f"unknown relation {name!r}") from None


@dataclass(frozen=True, order=True)
class EntityRecord:
    surface: str
    entity_type: str
    entity_id: str | None = None
    source: str = SOURCE_DATASET


def bundled_schema_path():
    return resources.files("kbcmlm") / "data" / "schema.json"


def bundled_templates_path():
    return resources.files("kbcmlm") / "data" / "templates.json"


def _key_line(text: str, key: str) -> int:
    needle = json.dumps(key)
    for lineno, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return lineno
    return 0


def load_schema(path=None, known: Iterable[str] | None = None) -> RelationSchema:
    """Load ``{relation: {subject_type, object_type, numeric}}``.

    Duplicate relations, malformed rows, and relations outside ``known``
    (when given) raise ``ValueError`` naming the offending line.
    """
    path = bundled_schema_path() if path is None else path
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    pairs = json.loads(text, object_pairs_hook=lambda kv: kv)
    schema = RelationSchema()
    known = set(known) if known is not None else None
    for name, row in pairs:
        lineno = _key_line(text, name)
        if name in schema:
            raise ValueError(f"{path}:{lineno}: duplicate relation {name!r}")
        if known is not None and name not in known:
            raise ValueError(f"{path}:{lineno}: unknown relation {name!r}")
        try:
            row = dict(row)
            schema[name] = Relation(
                str(row["subject_type"]), str(row["object_type"]), bool(row.get("numeric", False))
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: malformed relation {name!r} ({exc})") from exc
    return schema


@dataclass(frozen=True)
class TripleSample:
    subject: str
    relation: str
    objects: tuple[str, ...] = ()

    @property
    def key(self) -> tuple[str, str]:
        return self.subject, self.relation

    def to_json(self) -> dict:
        return {"SubjectEntity": self.subject, "Relation": self.relation, "ObjectEntities": list(self.objects)}


def load_samples(path: str | os.PathLike) -> list[TripleSample]:
    out = []
    for lineno, row in read_jsonl(path):
        try:
            out.append(
                TripleSample(row["SubjectEntity"], row["Relation"], tuple(row.get("ObjectEntities") or ()))
            )
        except KeyError as exc:
            raise ValueError(f"{path}:{lineno}: missing field {exc}") from exc
    return out


def save_samples(path: str | os.PathLike, samples: Iterable[TripleSample]) -> None:
    write_jsonl(path, (s.to_json() for s in samples))


def harvest_entities(
    splits: Sequence[str | os.PathLike | Sequence[TripleSample]], schema: RelationSchema
) -> list[EntityRecord]:
    """Type every subject and gold object by its relation role.

    Objects of numeric relations are left out: numbers stay base-tokenized.
    """
    seen: set[tuple[str, str]] = set()
    for split in splits:
        samples = load_samples(split) if isinstance(split, (str, os.PathLike)) else split
        for s in samples:
            rel = schema.relation(s.relation)
            seen.add((s.subject, rel.subject_type))
            if not rel.numeric:
                seen.update((o, rel.object_type) for o in s.objects)
    return [EntityRecord(surface, etype) for surface, etype in sorted(seen) if surface]


class MergeResult(NamedTuple):
    records: list[EntityRecord]
    type_counts: Counter
    skipped: int


def merge_kg_dump(
    records: Iterable[EntityRecord],
    dump: str | os.PathLike | None,
    schema: RelationSchema | None = None,
) -> MergeResult:
    """Union ``records`` with a JSONL entity dump, deduplicating on (surface, type)."""
    merged: dict[tuple[str, str], EntityRecord] = {}
    for r in records:
        merged.setdefault((r.surface, r.entity_type), r)
    allowed = schema.types - schema.numeric_types if schema is not None else None
    skipped = 0
    if dump is not None:
        for lineno, row in read_jsonl(dump):
            surface, etype = row.get("surface"), row.get("type")
            if not isinstance(surface, str) or not surface or not isinstance(etype, str) or (
                allowed is not None and etype not in allowed
            ):
                log.warning("%s:%d: skipping malformed entity row", dump, lineno)
                skipped += 1
                continue
            key = (surface, etype)
            prev = merged.get(key)
            if prev is None:
                merged[key] = EntityRecord(surface, etype, row.get("entity_id"), SOURCE_KG)
            elif prev.entity_id is None and row.get("entity_id"):
                merged[key] = EntityRecord(surface, etype, row["entity_id"], prev.source)
    out = sorted(merged.values(), key=lambda r: (r.surface, r.entity_type))
    counts = Counter(r.entity_type for r in out)
    for etype, n in sorted(counts.items()):
        log.info("entity type %s: %d", etype, n)
    return MergeResult(out, counts, skipped)


def write_entity_dump(path: str | os.PathLike, records: Iterable[EntityRecord]) -> None:
    write_jsonl(
        path,
        (
            {"surface": r.surface, "kind": "entity", "type": r.entity_type, "entity_id": r.entity_id}
            for r in sorted(records, key=lambda r: (r.surface, r.entity_type))
        ),
    )


def expand_vocabulary(base: Vocabulary, records: Iterable[EntityRecord]) -> AtomAddition:
    """Append one atom per distinct surface; the first (surface, type) record wins."""
    ordered = sorted(records, key=lambda r: (r.surface, r.entity_type))
    return add_entity_atoms(base, ((r.surface, r.entity_type, r.entity_id) for r in ordered))
