import json
from pathlib import Path

import pytest
from hypothesis import given, strategies as st

from kbcmlm.evaluation import render_csv, render_json, render_text, score_records, score_run, score_sample
from oracles import macro_from_rows, set_prf

FIXTURES = Path(__file__).parent / "fixtures"
VALID = FIXTURES / "challenge_valid.jsonl"
PRED = FIXTURES / "challenge_pred.jsonl"


def write_rows(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


class TestScoreSample:
    def test_identity(self):
        m = score_sample({"a", "b"}, {"a", "b"})
        assert (m.precision, m.recall, m.f1) == (1, 1, 1)

    def test_empty_empty(self):
        m = score_sample(set(), set())
        assert (m.precision, m.recall, m.f1) == (1, 1, 1)

    def test_hand_computed(self):
        m = score_sample({"a", "b", "c"}, {"a", "d"})
        assert m.precision == pytest.approx(1 / 3)
        assert m.recall == pytest.approx(1 / 2)
        assert m.f1 == pytest.approx(0.4)

    def test_empty_pred_nonempty_gold(self):
        m = score_sample(set(), {"a"})
        assert (m.precision, m.recall, m.f1) == (0, 0, 0)

    def test_nonempty_pred_empty_gold(self):
        m = score_sample({"a"}, set())
        assert (m.precision, m.recall) == (0, 1)
        assert m.f1 == 0

    def test_trim_and_case(self):
        assert score_sample([" Paris "], ["Paris"]).f1 == 1
        assert score_sample(["paris"], ["Paris"]).f1 == 0


words = st.sets(st.sampled_from("abcdef"), max_size=5)


@given(words, words)
def test_matches_exact_oracle(pred, gold):
    m = score_sample(pred, gold)
    p, r, f = set_prf(pred, gold)
    assert (m.precision, m.recall, m.f1) == pytest.approx((float(p), float(r), float(f)), abs=1e-12)
    for x in (m.precision, m.recall, m.f1):
        assert 0 <= x <= 1
    assert m.f1 <= max(m.precision, m.recall) + 1e-9
    if not (pred & gold) and (pred or gold):
        assert m.f1 == 0


@given(st.lists(st.sampled_from("abcdef"), max_size=5), st.lists(st.sampled_from("abcdef"), max_size=5), st.randoms())
def test_permutation_symmetric(pred, gold, rnd):
    shuffled_p, shuffled_g = pred[:], gold[:]
    rnd.shuffle(shuffled_p)
    rnd.shuffle(shuffled_g)
    assert score_sample(pred, gold) == score_sample(shuffled_p, shuffled_g)


class TestScoreRun:
    def test_two_relation_hand_fixture(self, tmp_path):
        gold = write_rows(
            tmp_path / "gold.jsonl",
            [
                {"SubjectEntity": "s1", "Relation": "A", "ObjectEntities": ["x", "y"]},
                {"SubjectEntity": "s2", "Relation": "A", "ObjectEntities": []},
                {"SubjectEntity": "s3", "Relation": "B", "ObjectEntities": ["z"]},
            ],
        )
        pred = write_rows(
            tmp_path / "pred.jsonl",
            [
                {"SubjectEntity": "s1", "Relation": "A", "ObjectEntities": ["x"]},
                {"SubjectEntity": "s2", "Relation": "A", "ObjectEntities": []},
                {"SubjectEntity": "s3", "Relation": "B", "ObjectEntities": ["w"]},
            ],
        )
        report = score_run(pred, gold)
        # A: s1 P=1 R=1/2 F1=2/3; s2 all 1. B: all 0.
        a = report.per_relation["A"]
        assert (a.precision, a.recall, a.f1) == pytest.approx((1.0, 0.75, 5 / 6))
        assert report.per_relation["B"].f1 == 0
        assert report.overall.f1 == pytest.approx(5 / 12)

    def test_identity_all_ones(self):
        report = score_run(VALID, VALID)
        assert all(m.f1 == 1 for m in report.per_relation.values())
        assert report.overall.f1 == 1

    def test_challenge_layout(self):
        report = score_run(PRED, VALID)
        text = render_text(report)
        lines = text.splitlines()
        rows = [l for l in lines[2:] if not l.startswith("-")]
        assert len(rows) == 22
        assert rows[-1].startswith("Average")
        assert len(report.per_relation) == 21

    def test_macro_matches_oracle(self):
        gold = {(r["SubjectEntity"], r["Relation"]): r["ObjectEntities"] for r in map(json.loads, VALID.read_text().splitlines())}
        pred = {(r["SubjectEntity"], r["Relation"]): r["ObjectEntities"] for r in map(json.loads, PRED.read_text().splitlines())}
        per, overall = macro_from_rows([(k[1], pred[k], gold[k]) for k in gold])
        report = score_run(PRED, VALID)
        for rel, (p, r, f) in per.items():
            m = report.per_relation[rel]
            assert (m.precision, m.recall, m.f1) == pytest.approx((float(p), float(r), float(f)), abs=1e-12)
        o = report.overall
        assert (o.precision, o.recall, o.f1) == pytest.approx(tuple(map(float, overall)), abs=1e-12)

    def test_missing_prediction_warns(self, tmp_path, caplog):
        gold = write_rows(tmp_path / "g.jsonl", [{"SubjectEntity": "s", "Relation": "A", "ObjectEntities": ["x"]}])
        pred = write_rows(tmp_path / "p.jsonl", [])
        report = score_run(pred, gold)
        assert report.overall.f1 == 0
        assert report.warnings and "scored as empty" in caplog.text

    def test_duplicate_key(self, tmp_path):
        row = {"SubjectEntity": "s", "Relation": "A", "ObjectEntities": ["x"]}
        path = write_rows(tmp_path / "p.jsonl", [row, row])
        with pytest.raises(ValueError, match=":2: duplicate key"):
            score_run(path, VALID)

    def test_match_on_id(self, tmp_path):
        gold = write_rows(tmp_path / "g.jsonl", [{"SubjectEntity": "s", "Relation": "A", "ObjectEntities": ["NYC"], "ObjectEntitiesID": ["Q60"]}])
        pred = write_rows(tmp_path / "p.jsonl", [{"SubjectEntity": "s", "Relation": "A", "ObjectEntities": ["New York City"], "ObjectEntitiesID": ["Q60"]}])
        assert score_run(pred, gold).overall.f1 == 0
        assert score_run(pred, gold, match_on_id=True).overall.f1 == 1

    def test_csv_and_json(self):
        report = score_run(PRED, VALID)
        csv_lines = render_csv(report).splitlines()
        assert csv_lines[0] == "relation,precision,recall,f1,support"
        assert len(csv_lines) == 23
        data = json.loads(render_json(report))
        assert data["overall"]["f1"] == pytest.approx(report.overall.f1)
        assert len(data["per_relation"]) == 21


def test_score_records_sorted_relations():
    report = score_records({("s", "B"): ["x"], ("s", "A"): ["x"]}, {("s", "B"): ["x"], ("s", "A"): []})
    assert list(report.per_relation) == ["A", "B"]
