"""
Scoring predictions
===================

Object sets are compared per sample, averaged within each relation, then
averaged across relations. An empty prediction for a subject with no objects
counts as a perfect answer.
"""

from pathlib import Path

from kbcmlm.evaluation import render_csv, render_text, score_records, score_run, score_sample

for pred, gold in [({"a", "b"}, {"a", "b"}), (set(), set()), ({"a", "b", "c"}, {"a", "d"}), ({"a"}, set())]:
    m = score_sample(pred, gold)
    print(sorted(pred), sorted(gold), f"P={m.precision:.3f} R={m.recall:.3f} F1={m.f1:.3f}")

###############################################################################
# Whole runs are keyed by (subject, relation).
report = score_records(
    {("Canada", "CountryBordersCountry"): ["Greenland"], ("Spain", "CountryBordersCountry"): ["France", "Italy"]},
    {("Canada", "CountryBordersCountry"): ["Greenland", "United States of America"], ("Spain", "CountryBordersCountry"): ["France", "Portugal"]},
)
print(render_text(report))
print(render_csv(report))

###############################################################################
# Files in the challenge JSONL format; the bundled test fixture covers all
# 21 relations.
fixtures = Path(__file__).resolve().parent.parent / "tests" / "fixtures"
if (fixtures / "challenge_valid.jsonl").exists():
    print(render_text(score_run(fixtures / "challenge_pred.jsonl", fixtures / "challenge_valid.jsonl")))
