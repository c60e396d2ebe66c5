"""Per-sample precision/recall/F1 over object sets, macro-averaged per relation."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping

from kbcmlm._io import read_jsonl

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    f1: float
    support: int = 1


def score_sample(pred: Iterable[str], gold: Iterable[str]) -> Metrics:
    """Score one predicted object set against the gold set.

    An empty prediction has precision 1 only when gold is empty too; an empty
    gold set gives recall 1.
    """
    p = {s.strip() for s in pred}
    g = {s.strip() for s in gold}
    hits = len(p & g)
    if p:
        precision = hits / len(p)
    else:
        precision = 1.0 if not g else 0.0
    recall = hits / len(g) if g else 1.0
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return Metrics(precision, recall, f1)


def macro(rows: Iterable[Metrics]) -> Metrics:
    rows = list(rows)
    if not rows:
        return Metrics(0.0, 0.0, 0.0, 0)
    n = len(rows)
    return Metrics(
        sum(r.precision for r in rows) / n,
        sum(r.recall for r in rows) / n,
        sum(r.f1 for r in rows) / n,
        sum(r.support for r in rows),
    )


@dataclass
class RunReport:
    per_relation: dict[str, Metrics]
    overall: Metrics
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "per_relation": {k: asdict(v) for k, v in self.per_relation.items()},
            "overall": asdict(self.overall),
            "warnings": list(self.warnings),
        }


def _index(path, field_name: str) -> dict[tuple[str, str], list]:
    out: dict[tuple[str, str], list] = {}
    for lineno, row in read_jsonl(path):
        key = (row["SubjectEntity"], row["Relation"])
        if key in out:
            raise ValueError(f"{path}:{lineno}: duplicate key {key}")
        out[key] = [x for x in (row.get(field_name) or []) if x is not None]
    return out


def score_records(
    predictions: Mapping[tuple[str, str], Iterable[str]],
    gold: Mapping[tuple[str, str], Iterable[str]],
) -> RunReport:
    warnings = []
    by_rel: dict[str, list[Metrics]] = {}
    for key in sorted(gold):
        if key not in predictions:
            msg = f"no prediction for {key}; scored as empty"
            log.warning(msg)
            warnings.append(msg)
        by_rel.setdefault(key[1], []).append(score_sample(predictions.get(key, ()), gold[key]))
    per_relation = {rel: macro(rows) for rel, rows in sorted(by_rel.items())}
    return RunReport(per_relation, macro(per_relation.values()), warnings)


def score_run(
    predictions_path: str | os.PathLike, gold_path: str | os.PathLike, match_on_id: bool = False
) -> RunReport:
    """Score a predictions JSONL against a gold JSONL keyed on (SubjectEntity, Relation).

    With ``match_on_id`` the ``ObjectEntitiesID`` lists are compared instead
    of surfaces.
    """
    field_name = "ObjectEntitiesID" if match_on_id else "ObjectEntities"
    return score_records(_index(predictions_path, field_name), _index(gold_path, field_name))


def render_text(report: RunReport, footer: str | None = None) -> str:
    width = max([len("Relation"), len("Average"), *(len(r) for r in report.per_relation)])
    lines = [f"{'Relation':<{width}}  Precision  Recall     F1  Support"]
    lines.append("-" * len(lines[0]))

    def row(name: str, m: Metrics) -> str:
        return f"{name:<{width}}  {m.precision:9.3f}  {m.recall:6.3f}  {m.f1:5.3f}  {m.support:7d}"

    for rel, m in report.per_relation.items():
        lines.append(row(rel, m))
    lines.append("-" * len(lines[0]))
    lines.append(row("Average", report.overall))
    if footer:
        lines.append(footer)
    return "\n".join(lines) + "\n"


def render_csv(report: RunReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["relation", "precision", "recall", "f1", "support"])
    for rel, m in [*report.per_relation.items(), ("Average", report.overall)]:
        w.writerow([rel, f"{m.precision:.6f}", f"{m.recall:.6f}", f"{m.f1:.6f}", m.support])
    return buf.getvalue()


def render_json(report: RunReport) -> str:
    return json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n"
