import csv
import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import brute_bleu, brute_entity_f1, brute_match_entities

from qtod.backends import RuleBackend
from qtod.errors import ContractViolation
from qtod.evaluation import (
    EntityScores,
    EvalReport,
    ScalingCurve,
    ScalingPoint,
    TurnRow,
    bleu,
    entity_counts,
    entity_f1,
    evaluate_rows,
    extract_entities,
    recall_at_n,
    run_split_eval,
    write_report_csv,
    write_report_json,
    write_scaling_csv,
)
from qtod.synthetic import build_corpus

TOY_PREDS = [
    "there are two cheap places in the north .",
    "the golden fork serves italian food",
    "sorry , no matching options were found",
]
TOY_REFS = [
    "there are two cheap restaurants in the north .",
    "the golden fork serves great italian food",
    "sorry , there are no matching options",
]

# small word pool; short words collide into multi-word entities often
WORDS = ["ash", "bay", "cod", "dew", "elm", "fir", "gum", "hop"]
lexicon_strategy = st.lists(
    st.lists(st.sampled_from(WORDS), min_size=1, max_size=3).map(" ".join),
    min_size=1,
    max_size=6,
    unique=True,
)
text_strategy = st.lists(st.sampled_from(WORDS), min_size=0, max_size=12).map(" ".join)
corpus_strategy = st.lists(
    st.tuples(text_strategy, text_strategy), min_size=1, max_size=12
)


class TestExtractEntities:
    def test_simple_match(self):
        assert extract_entities(
            "try the peking house tonight", ["peking house", "golden fork"]
        ) == {"peking house"}

    def test_canonicalization_applies_to_both_sides(self):
        assert extract_entities("Try PEKING-HOUSE!", ["Peking House"]) == {"peking house"}

    def test_longer_entries_claim_words_first(self):
        lexicon = ["peking house", "house"]
        assert extract_entities("the peking house", lexicon) == {"peking house"}
        assert extract_entities("the peking house house", lexicon) == {
            "peking house",
            "house",
        }

    def test_entry_major_scan_order(self):
        # both entries are two words; "a b" sorts first and consumes the
        # middle word, blocking "c a" even though it starts earlier
        assert extract_entities("c a b", ["c a", "a b"]) == {"a b"}

    def test_no_partial_word_matches(self):
        assert extract_entities("northern lights", ["north"]) == set()

    @given(text_strategy, lexicon_strategy)
    def test_matches_oracle(self, text, lexicon):
        assert extract_entities(text, lexicon) == brute_match_entities(text, lexicon)

    @given(text_strategy, lexicon_strategy)
    def test_found_entities_are_lexicon_members(self, text, lexicon):
        assert extract_entities(text, lexicon) <= set(lexicon)


class TestEntityScores:
    def test_f1_is_single_division(self):
        s = EntityScores(tp=3, fp=1, fn=2)
        assert s.f1 == 6 / 9
        assert s.precision == 3 / 4
        assert s.recall == 3 / 5

    def test_zero_counts(self):
        s = EntityScores(0, 0, 0)
        assert s.precision == s.recall == s.f1 == 0.0

    def test_addition(self):
        assert EntityScores(1, 2, 3) + EntityScores(4, 5, 6) == EntityScores(5, 7, 9)


class TestEntityF1:
    def test_perfect_prediction(self):
        golds = ["the peking house is in the north", "try golden fork"]
        scores = entity_f1(golds, golds, ["peking house", "golden fork", "north"])
        assert scores.f1 == 1.0 and scores.fp == 0 and scores.fn == 0

    def test_empty_gold_turns_excluded(self):
        preds = ["peking house", "peking house"]
        golds = ["peking house", "no options at all"]
        scores = entity_counts(preds, golds, ["peking house"])
        # second turn has no gold entities: its spurious pred must not count
        assert (scores.tp, scores.fp, scores.fn) == (1, 0, 0)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ContractViolation):
            entity_counts(["a"], ["a", "b"], ["a"])

    @given(corpus_strategy, lexicon_strategy)
    def test_matches_oracle_exactly(self, corpus, lexicon):
        preds = [p for p, _ in corpus]
        golds = [g for _, g in corpus]
        scores = entity_counts(preds, golds, lexicon)
        p, r, f1, counts = brute_entity_f1(preds, golds, lexicon)
        assert (scores.tp, scores.fp, scores.fn) == counts
        assert scores.precision == p
        assert scores.recall == r
        assert scores.f1 == f1

    @given(corpus_strategy, lexicon_strategy)
    def test_bounds(self, corpus, lexicon):
        scores = entity_counts([p for p, _ in corpus], [g for _, g in corpus], lexicon)
        assert 0.0 <= scores.precision <= 1.0
        assert 0.0 <= scores.recall <= 1.0
        assert 0.0 <= scores.f1 <= 1.0

    @given(
        st.lists(
            st.tuples(
                st.lists(st.sampled_from(WORDS), min_size=1, max_size=8).map(" ".join),
                st.lists(st.sampled_from(WORDS), min_size=1, max_size=8).map(" ".join),
            ),
            min_size=1,
            max_size=10,
        )
    )
    def test_swap_symmetry_when_no_turn_is_entity_free(self, corpus):
        # single-word lexicon covering the whole vocabulary: every turn
        # has entities on both sides, so no exclusion asymmetry
        lexicon = WORDS
        preds = [p for p, _ in corpus]
        golds = [g for _, g in corpus]
        fwd = entity_counts(preds, golds, lexicon)
        rev = entity_counts(golds, preds, lexicon)
        assert fwd.precision == rev.recall
        assert fwd.recall == rev.precision
        assert fwd.f1 == rev.f1

    @given(corpus_strategy, corpus_strategy, lexicon_strategy)
    def test_micro_additivity(self, shard_a, shard_b, lexicon):
        counts_a = entity_counts([p for p, _ in shard_a], [g for _, g in shard_a], lexicon)
        counts_b = entity_counts([p for p, _ in shard_b], [g for _, g in shard_b], lexicon)
        merged = shard_a + shard_b
        combined = entity_counts(
            [p for p, _ in merged], [g for _, g in merged], lexicon
        )
        assert combined == counts_a + counts_b


class TestBleu:
    def test_frozen_toy_value(self):
        assert bleu(TOY_PREDS, TOY_REFS) == pytest.approx(0.472257103957788, abs=1e-9)

    def test_equals_oracle_bit_for_bit_on_toy(self):
        assert bleu(TOY_PREDS, TOY_REFS) == brute_bleu(TOY_PREDS, TOY_REFS)

    def test_identity_scores_one(self):
        assert bleu(TOY_REFS, TOY_REFS) == 1.0

    def test_disjoint_unigrams_score_zero(self):
        assert bleu(["aa bb cc dd"], ["ee ff gg hh"]) == 0.0

    def test_empty_corpus_scores_zero(self):
        assert bleu([], []) == 0.0
        assert bleu([""], ["some reference"]) == 0.0

    def test_case_insensitive(self):
        upper = [t.upper() for t in TOY_PREDS]
        assert bleu(upper, TOY_REFS) == bleu(TOY_PREDS, TOY_REFS)

    def test_punctuation_splits_to_own_tokens(self):
        # "north." must match "north ." after tokenization
        assert bleu(["in the north."], ["in the north ."]) == 1.0

    def test_length_mismatch_rejected(self):
        with pytest.raises(ContractViolation):
            bleu(["a"], [])

    def test_short_candidates_skip_missing_orders(self):
        # 2-token corpus has no 3/4-grams; those orders are neutral
        assert bleu(["cheap hotel"], ["cheap hotel"]) == 1.0

    @given(
        st.lists(
            st.tuples(
                st.lists(st.sampled_from(WORDS + [",", "."]), min_size=1, max_size=10).map(" ".join),
                st.lists(st.sampled_from(WORDS + [",", "."]), min_size=1, max_size=10).map(" ".join),
            ),
            min_size=1,
            max_size=8,
        )
    )
    @settings(max_examples=120)
    def test_matches_oracle(self, corpus):
        preds = [p for p, _ in corpus]
        refs = [r for _, r in corpus]
        assert bleu(preds, refs) == brute_bleu(preds, refs)

    @given(
        st.lists(
            st.tuples(
                st.lists(st.sampled_from(WORDS), min_size=1, max_size=10).map(" ".join),
                st.lists(st.sampled_from(WORDS), min_size=1, max_size=10).map(" ".join),
            ),
            min_size=1,
            max_size=8,
        )
    )
    def test_bounds(self, corpus):
        score = bleu([p for p, _ in corpus], [r for _, r in corpus])
        assert 0.0 <= score <= 1.0


class TestRecallAtN:
    def test_all_gold_at_rank_one(self):
        assert recall_at_n([["g1"], ["g2"]], [["g1"], ["g2"]], n=1) == 1.0

    def test_gold_never_retrieved(self):
        assert recall_at_n([["x"], ["y"]], [["g1"], ["g2"]], n=3) == 0.0

    def test_all_golds_must_be_present(self):
        # one of two golds retrieved is a miss under the all-in semantics
        assert recall_at_n([["g1", "x"]], [["g1", "g2"]], n=2) == 0.0
        assert recall_at_n([["g1", "g2"]], [["g1", "g2"]], n=2) == 1.0

    def test_empty_gold_turns_excluded(self):
        assert recall_at_n([["x"], ["g"]], [[], ["g"]], n=1) == 1.0

    def test_no_eligible_turns_scores_zero(self):
        assert recall_at_n([["x"]], [[]], n=1) == 0.0

    def test_hand_counted_mixed_fixture(self):
        retrievals = [
            ["a", "b", "c"],  # both golds inside top-2
            ["a", "x", "b"],  # needs n=3 to cover both golds
            ["x", "y", "z"],  # never hits
            ["g", "h", "i"],  # gold at rank 1
            ["x", "g", "y"],  # gold at rank 2
        ]
        golds = [["a", "b"], ["a", "b"], ["a"], ["g"], ["g"]]
        assert recall_at_n(retrievals, golds, n=3) == 4 / 5
        assert recall_at_n(retrievals, golds, n=2) == 3 / 5
        assert recall_at_n(retrievals, golds, n=1) == 1 / 5

    @given(
        st.lists(
            st.tuples(
                st.lists(st.sampled_from("abcdefgh"), max_size=6, unique=True),
                st.lists(st.sampled_from("abcdefgh"), max_size=3, unique=True),
            ),
            min_size=1,
            max_size=10,
        ),
        st.integers(min_value=1, max_value=5),
    )
    def test_monotone_in_n(self, turns, n):
        retrievals = [r for r, _ in turns]
        golds = [g for _, g in turns]
        assert recall_at_n(retrievals, golds, n) <= recall_at_n(retrievals, golds, n + 1)


class TestEvaluateRows:
    def rows(self):
        return [
            TurnRow("s1", 0, "restaurant", "peking house is nice", "peking house is nice",
                    ("r1",), ("r1",), 0.5),
            TurnRow("s1", 1, "restaurant", "no options", "golden fork works",
                    ("r2",), ("r2",), 0.7),
            TurnRow("s2", 0, "hotel", "ashley hotel fits", "ashley hotel fits",
                    ("h1",), ("h1",), 0.6),
        ]

    LEXICON = ["peking house", "golden fork", "ashley hotel"]

    def test_report_shape(self):
        report = evaluate_rows(self.rows(), self.LEXICON, n=3)
        assert report.turns == 3
        assert report.entity == EntityScores(tp=2, fp=0, fn=1)
        assert report.recall == 1.0
        assert set(report.per_domain) == {"restaurant", "hotel"}
        assert report.per_domain["hotel"] == 1.0
        assert report.mean_retrieve_latency_ms == pytest.approx(0.6)

    def test_domain_counts_sum_to_global(self):
        rows = self.rows()
        report = evaluate_rows(rows, self.LEXICON, n=3)
        by_domain = {}
        for row in rows:
            preds, golds = [row.pred_response], [row.gold_response]
            by_domain.setdefault(row.domain, EntityScores(0, 0, 0))
            by_domain[row.domain] += entity_counts(preds, golds, self.LEXICON)
        total = sum(by_domain.values(), EntityScores(0, 0, 0))
        assert total == report.entity

    def test_missing_domain_groups_under_other(self):
        rows = [
            TurnRow("s1", 0, "", "peking house", "peking house", ("r1",), ("r1",), None)
        ]
        report = evaluate_rows(rows, self.LEXICON, n=3)
        assert report.per_domain == {"other": 1.0}

    def test_to_dict_carries_n_specific_key(self):
        report = evaluate_rows(self.rows(), self.LEXICON, n=5)
        data = report.to_dict()
        assert "recall_at_5" in data
        assert data["counts"] == {"tp": 2, "fp": 0, "fn": 1}


class TestRunSplitEval:
    def test_gold_as_prediction_is_perfect(self, rule_backend):
        corpus = build_corpus(6, seed=0)
        report, rows = run_split_eval(corpus.train, rule_backend, mode="qtod", n=3)
        assert report.entity_f1 == 1.0
        assert report.bleu == 1.0
        assert report.recall == 1.0
        assert report.turns == sum(d.user_turn_count for d in corpus.train)

    def test_rows_align_with_dialogues(self, rule_backend):
        corpus = build_corpus(4, seed=1)
        report, rows = run_split_eval(corpus.train, rule_backend, mode="qtod", n=3)
        keys = [(r.session_id, r.turn) for r in rows]
        assert len(keys) == len(set(keys)) == report.turns

    def test_null_query_turns_have_no_retrieve_latency(self, rule_backend):
        corpus = build_corpus(3, seed=0)
        _, rows = run_split_eval(corpus.train, rule_backend, mode="qtod", n=3)
        last_rows = [r for r in rows if r.turn == 2]
        assert last_rows and all(r.retrieve_ms is None for r in last_rows)


class TestScalingCurve:
    def test_sizes_must_strictly_increase(self):
        p = ScalingPoint(8, 1.0, 1.0, 0.1)
        with pytest.raises(ContractViolation):
            ScalingCurve(points=(p, p), n=3, seed=0)

    def test_csv_format(self, tmp_path):
        curve = ScalingCurve(
            points=(
                ScalingPoint(8, 1.0, 1.0, 0.25),
                ScalingPoint(16, 0.5, 0.75, 0.5),
            ),
            n=3,
            seed=0,
        )
        path = tmp_path / "scaling.csv"
        write_scaling_csv(curve, path, metric="entity_f1")
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "kb_size,metric,latency_ms"
        assert lines[1].startswith("8,1.0,")
        write_scaling_csv(curve, path, metric="recall")
        assert path.read_text().strip().splitlines()[2].startswith("16,0.75,")

    def test_unknown_metric_rejected(self, tmp_path):
        curve = ScalingCurve(points=(ScalingPoint(8, 1.0, 1.0, 0.1),), n=3, seed=0)
        with pytest.raises(ContractViolation):
            write_scaling_csv(curve, tmp_path / "x.csv", metric="latency")


class TestReportFiles:
    def test_json_roundtrip(self, tmp_path):
        report = EvalReport(
            entity=EntityScores(2, 1, 1), bleu=0.5, recall=0.75, n=3, turns=4,
            per_domain={"hotel": 0.8}, mean_retrieve_latency_ms=1.5,
        )
        path = tmp_path / "report.json"
        write_report_json(report, path)
        data = json.loads(path.read_text())
        assert data["entity_f1"] == report.entity.f1
        assert data["per_domain"] == {"hotel": 0.8}

    def test_csv_has_metric_columns(self, tmp_path):
        report = EvalReport(
            entity=EntityScores(2, 1, 1), bleu=0.5, recall=0.75, n=3, turns=4,
        )
        path = tmp_path / "report.csv"
        write_report_csv(report, path)
        with open(path) as fh:
            row = next(csv.DictReader(fh))
        assert float(row["entity_f1"]) == report.entity.f1
        assert float(row["bleu"]) == 0.5
        assert row["count_tp"] == "2"
