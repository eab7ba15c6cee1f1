import json

import numpy as np
import pytest

from aecner.core import EntitySpan, LabelScheme
from aecner.evaluation import (
    EvalError,
    emit_report,
    load_predictions,
    macro_f1,
    partial_match,
    save_predictions,
    strict_match,
)

from oracles import brute_best_matching

SCHEME = LabelScheme(["a", "b"])


def spans(*triples):
    return [EntitySpan(s, e, t) for s, e, t in triples]


# ---------------------------------------------------------------- strict


def test_strict_perfect_prediction():
    gold = {"s0": spans((0, 2, "a"), (3, 4, "b"))}
    report = strict_match(gold, {"s0": list(gold["s0"])}, SCHEME)
    assert report.macro_f1 == 1.0
    assert all(s.f1 == 1.0 for s in report.per_type)


def test_strict_empty_predictions():
    gold = {"s0": spans((0, 2, "a"))}
    report = strict_match(gold, {"s0": []}, SCHEME)
    s = report.score("a")
    assert (s.precision, s.recall, s.f1) == (0.0, 0.0, 0.0)


def test_strict_boundary_mismatch_counts_fp_and_fn():
    report = strict_match(
        {"s0": spans((0, 2, "a"))}, {"s0": spans((0, 3, "a"))}, SCHEME
    )
    s = report.score("a")
    assert (s.tp, s.fp, s.fn) == (0, 1, 1)


def test_strict_each_gold_matches_once():
    gold = {"s0": spans((0, 2, "a"))}
    pred = {"s0": spans((0, 2, "a"), (0, 2, "a"))}
    s = strict_match(gold, pred, SCHEME).score("a")
    assert (s.tp, s.fp, s.fn) == (1, 1, 0)


def test_sentence_id_mismatch_rejected():
    with pytest.raises(EvalError, match="sentence ids"):
        strict_match({"s0": []}, {"s1": []}, SCHEME)


# ---------------------------------------------------------------- partial


def test_partial_overlap_counts_where_strict_does_not():
    gold = {"s0": spans((0, 2, "a"))}
    pred = {"s0": spans((0, 3, "a"))}
    assert strict_match(gold, pred, SCHEME).score("a").tp == 0
    assert partial_match(gold, pred, SCHEME).score("a").tp == 1


def test_partial_type_gate():
    gold = {"s0": spans((0, 2, "a"))}
    pred = {"s0": spans((0, 2, "b"))}
    report = partial_match(gold, pred, SCHEME)
    assert report.score("a").tp == 0
    assert report.score("b").fp == 1


def test_partial_one_to_one_larger_overlap_wins():
    gold = {"s0": spans((0, 4, "a"))}
    pred = {"s0": spans((0, 1, "a"), (2, 4, "a"))}
    s = partial_match(gold, pred, SCHEME).score("a")
    assert (s.tp, s.fp, s.fn) == (1, 1, 0)


def test_partial_no_overlap_is_miss():
    gold = {"s0": spans((0, 2, "a"))}
    pred = {"s0": spans((2, 4, "a"))}  # half-open ranges: no shared token
    s = partial_match(gold, pred, SCHEME).score("a")
    assert (s.tp, s.fp, s.fn) == (0, 1, 1)


# ---------------------------------------------------------------- macro


def test_macro_mean_of_two_types():
    gold = {"s0": spans((0, 1, "a"), (1, 2, "a"), (3, 4, "a"), (5, 6, "a"),
                        (7, 8, "b"))}
    pred = {"s0": spans((0, 1, "a"), (1, 2, "a"), (3, 4, "a"), (4, 5, "a"),
                        (6, 7, "b"), (7, 8, "b"), (8, 9, "b"))}
    report = strict_match(gold, pred, SCHEME)
    # a: tp=3 fp=1 fn=1 -> f1=0.75; b: tp=1 fp=2 fn=0 -> p=1/3, r=1 -> f1=0.5
    assert report.score("a").f1 == pytest.approx(0.75)
    assert report.score("b").f1 == pytest.approx(0.5)
    assert macro_f1(report) == pytest.approx(0.625)


def test_macro_singleton():
    report = strict_match({"s0": spans((0, 1, "a"))}, {"s0": spans((0, 1, "a"))}, SCHEME)
    assert macro_f1(report) == pytest.approx(1.0)


def test_macro_includes_hallucinated_types_at_zero():
    gold = {"s0": spans((0, 1, "a"))}
    pred = {"s0": spans((0, 1, "a"), (2, 3, "b"))}
    report = strict_match(gold, pred, SCHEME)
    assert {s.etype for s in report.per_type} == {"a", "b"}
    assert macro_f1(report) == pytest.approx(0.5)


def test_macro_errors_with_no_types():
    report = strict_match({"s0": []}, {"s0": []}, SCHEME)
    with pytest.raises(EvalError, match="no entity types"):
        macro_f1(report)


# --------------------------------------------------------------- properties


def random_case(rng, max_spans=6, length=12):
    def draw_side():
        out = []
        pos = 0
        while pos < length and len(out) < max_spans:
            if rng.random() < 0.55:
                end = int(rng.integers(pos + 1, min(pos + 4, length) + 1))
                etype = "a" if rng.random() < 0.6 else "b"
                out.append(EntitySpan(pos, end, etype))
                pos = end + int(rng.integers(0, 2))
            else:
                pos += 1
        return out

    return {"s0": draw_side()}, {"s0": draw_side()}


def test_conservation_and_strict_le_partial_random():
    rng = np.random.default_rng(77)
    for _ in range(1000):
        gold, pred = random_case(rng)
        strict = strict_match(gold, pred, SCHEME)
        partial = partial_match(gold, pred, SCHEME)
        for report in (strict, partial):
            for s in report.per_type:
                assert s.tp + s.fn == sum(
                    1 for x in gold["s0"] if x.etype == s.etype
                )
                assert s.tp + s.fp == sum(
                    1 for x in pred["s0"] if x.etype == s.etype
                )
        strict_by = {s.etype: s for s in strict.per_type}
        for s in partial.per_type:
            if s.etype in strict_by:
                assert strict_by[s.etype].tp <= s.tp
                assert strict_by[s.etype].f1 <= s.f1 + 1e-12


def test_perfect_prediction_property():
    rng = np.random.default_rng(78)
    for _ in range(200):
        gold, _ = random_case(rng)
        if not gold["s0"]:
            continue
        assert strict_match(gold, {"s0": list(gold["s0"])}, SCHEME).macro_f1 == 1.0


def test_permutation_invariance():
    rng = np.random.default_rng(79)
    gold, pred = random_case(rng)
    gold2 = {"s0": list(reversed(gold["s0"]))}
    pred2 = {"s0": list(reversed(pred["s0"]))}
    a = partial_match(gold, pred, SCHEME)
    b = partial_match(gold2, pred2, SCHEME)
    assert a.to_dict() == b.to_dict()


def test_greedy_matches_optimal_almost_always():
    rng = np.random.default_rng(80)
    disagreements = []
    total = 1000
    for case in range(total):
        gold, pred = random_case(rng)
        report = partial_match(gold, pred, SCHEME)
        greedy_tp = sum(s.tp for s in report.per_type)
        optimal_tp = brute_best_matching(gold["s0"], pred["s0"])
        assert greedy_tp <= optimal_tp
        if greedy_tp != optimal_tp:
            disagreements.append((case, greedy_tp, optimal_tp))
    for case, g, o in disagreements:
        print(f"greedy/optimal disagreement in case {case}: {g} < {o}")
    assert len(disagreements) <= total // 100


# ---------------------------------------------------------------- report


def test_emit_report_formats_percent_two_decimals():
    # per-type counts giving precision 0.7751, recall 0.7730 are unwieldy;
    # check the formatting contract on a synthetic fraction instead
    gold = {"s0": spans(*[(i * 2, i * 2 + 1, "a") for i in range(250)])}
    hits = [(i * 2, i * 2 + 1, "a") for i in range(193)]
    extra = [(1001 + 2 * i, 1002 + 2 * i, "a") for i in range(57)]
    pred = {"s0": spans(*(hits + extra))}
    report = strict_match(gold, pred, SCHEME)
    assert report.macro_f1 == pytest.approx(0.772)
    text, payload = emit_report([("model", {"strict": report, "partial": None})])
    assert "77.20" in text
    assert payload["models"][0]["strict"]["macro_f1"] == pytest.approx(0.772)


def test_emit_report_zero_scores_render_zero():
    report = strict_match({"s0": spans((0, 1, "a"))}, {"s0": []}, SCHEME)
    text, _ = emit_report([("empty", {"strict": report, "partial": report})])
    assert "0.00" in text
    assert "" != text


def test_emit_report_column_structure_and_missing_blocks():
    report = strict_match({"s0": spans((0, 1, "a"))}, {"s0": spans((0, 1, "a"))}, SCHEME)
    text, payload = emit_report([
        ("first", {"strict": report, "partial": report}),
        ("second", {"strict": report, "partial": None}),
    ])
    head = text.splitlines()[0]
    for col in ("Model", "Strict P", "Strict R", "Strict Macro-F1",
                "Partial P", "Partial R", "Partial Macro-F1"):
        assert col in head
    second = text.splitlines()[3]
    assert second.count("/") == 3
    assert payload["models"][1]["partial"] is None


def test_report_json_round_trips():
    report = partial_match(
        {"s0": spans((0, 3, "a"))}, {"s0": spans((1, 2, "a"))}, SCHEME
    )
    _, payload = emit_report([("m", {"strict": None, "partial": report})])
    again = json.loads(json.dumps(payload))
    assert again == payload


# ---------------------------------------------------------------- pred files


def test_prediction_file_round_trip(tmp_path):
    path = tmp_path / "preds.jsonl"
    data = {
        "s00000": spans((0, 2, "a")),
        "s00001": [],
        "s00002": spans((1, 2, "b"), (3, 5, "a")),
    }
    save_predictions(path, data)
    loaded = load_predictions(path)
    assert loaded == data


def test_prediction_file_bad_row_names_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"sentence_id": "s0"}\n')
    with pytest.raises(EvalError, match="bad.jsonl:1"):
        load_predictions(path)
