from __future__ import annotations

import random
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from dpinstruct.core import Label, TaskKind
from dpinstruct.evaluation import (
    Confusion,
    DatasetScore,
    EmptySet,
    IdMismatch,
    KeyMismatch,
    MetricReport,
    accuracy,
    compare_report,
    micro_f1,
    micro_prf1,
    prf1,
    score_ave,
    score_binary,
    score_dataset,
)

Y, N = Label.yes(), Label.no()


def _ids(labels):
    return {f"i{k}": v for k, v in enumerate(labels)}


def test_all_correct_confusion():
    gold = _ids([Y] * 4 + [N] * 6)
    c = score_binary(gold, gold)
    assert (c.tp, c.tn, c.fp, c.fn) == (4, 6, 0, 0)


def test_three_pair_confusion():
    # oracle: count the three pairs by hand
    c = score_binary(_ids([Y, Y, N]), _ids([Y, N, Y]))
    assert (c.tp, c.fp, c.fn, c.tn) == (1, 1, 1, 0)


def test_misaligned_ids():
    with pytest.raises(IdMismatch):
        score_binary({"a": Y}, {"b": Y})
    with pytest.raises(IdMismatch):
        score_binary([("a", Y), ("a", N)], [("a", Y)])


def test_unparseable_counts_as_wrong_class():
    c = score_binary({"a": None, "b": None}, {"a": Y, "b": N})
    assert (c.tp, c.fp, c.fn, c.tn, c.unparseable) == (0, 1, 1, 0, 2)


def test_prf1_examples():
    p, r, f = prf1(Confusion(2, 1, 1))
    assert (round(p, 2), round(r, 2), round(f, 2)) == (66.67, 66.67, 66.67)
    assert prf1(Confusion(5, 0, 0))[2] == 100.0
    assert prf1(Confusion()) == (0.0, 0.0, 0.0)


def test_accuracy_examples():
    gold = _ids([Label.of_value(f"v{k}") for k in range(65)])
    assert accuracy(gold, gold) == 100.0
    assert accuracy(_ids([Label.of_value("x")] * 3), _ids([Label.of_value("y")] * 3)) == 0.0
    assert accuracy({"a": Label.of_value("New  York")}, {"a": Label.of_value("new york")}) == 100.0
    with pytest.raises(EmptySet):
        accuracy({}, {})


def test_micro_f1_examples():
    gold = ["a"] * 10
    assert micro_f1(gold, gold) == 100.0
    assert round(micro_f1(["a"] * 8 + ["b"] * 2, gold), 2) == 80.00
    p, r, f = micro_prf1(["a"] * 8 + [None] * 2, gold)
    assert (round(p, 2), round(r, 2), round(f, 2)) == (100.0, 80.0, 88.89)


def _brute_micro(preds, gold):
    classes = set(gold) | {p for p in preds if p is not None}
    tp = fp = fn = 0
    for c in classes:
        tp += sum(1 for p, g in zip(preds, gold) if p == c and g == c)
        fp += sum(1 for p, g in zip(preds, gold) if p == c and g != c)
        fn += sum(1 for p, g in zip(preds, gold) if g == c and p != c)
    if tp == 0:
        return Fraction(0)
    return Fraction(200 * tp, 2 * tp + fp + fn)


@given(st.lists(st.tuples(st.sampled_from("abc"), st.sampled_from(["a", "b", "c", None])), min_size=1, max_size=30))
def test_micro_f1_matches_per_class_oracle(pairs):
    gold = [g for g, _ in pairs]
    preds = [p for _, p in pairs]
    assert micro_f1(preds, gold) == pytest.approx(float(_brute_micro(preds, gold)))


@given(st.lists(st.tuples(st.sampled_from("abcd"), st.sampled_from("abcd")), min_size=1, max_size=40))
def test_micro_f1_equals_accuracy_without_abstentions(pairs):
    gold = [g for g, _ in pairs]
    preds = [p for _, p in pairs]
    acc = accuracy(dict(enumerate(preds)), dict(enumerate(gold)))
    assert micro_f1(preds, gold) == pytest.approx(acc)


@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=30), st.randoms())
def test_metrics_permutation_invariant(pairs, rnd):
    preds = {f"i{k}": Label.binary(p) for k, (p, _) in enumerate(pairs)}
    gold = {f"i{k}": Label.binary(g) for k, (_, g) in enumerate(pairs)}
    keys = list(gold)
    rnd.shuffle(keys)
    shuffled_p = [(k, preds[k]) for k in keys]
    rnd.shuffle(keys)
    shuffled_g = [(k, gold[k]) for k in keys]
    assert score_binary(shuffled_p, shuffled_g) == score_binary(preds, gold)
    assert accuracy(shuffled_p, shuffled_g) == accuracy(preds, gold)


def test_ave_scoring():
    gold = {"a": "4 GB", "b": "N/A", "c": "red", "d": "steel"}
    preds = {"a": "4 gb", "b": "N/A", "c": "blue", "d": "N/A"}
    p, r, f = score_ave(preds, gold)
    # tp=1 (a); c is fp+fn; d is fn; b is a true negative
    assert (round(p, 2), round(r, 2)) == (50.0, 33.33)


def test_score_dataset_picks_task_metric():
    gold = {"a": Label.of_value("x")}
    assert score_dataset("buy", TaskKind.DI, gold, gold).headline == 100.0
    cta = score_dataset("t", TaskKind.CTA, {"c": Label.category("Person")}, {"c": Label.category("Person")})
    assert cta.headline == 100.0 and "micro_f1" in cta.metrics


def _report(values: dict[str, float]) -> MetricReport:
    rep = MetricReport()
    for name, v in values.items():
        rep.add(DatasetScore(name, TaskKind.EM, {"precision": v, "recall": v, "f1": v}, 1))
    return rep


# per-dataset headline numbers of the 13B model in the seen-task comparison
REFERENCE_13B = {
    "adult": 99.33, "hospital": 95.59, "flights": 82.52, "rayyan": 90.65, "buy": 100, "restaurant": 89.53,
    "flipkart": 81.68, "phone": 87.21, "mimic-iii": 40.00, "synthea": 56.00, "cms": 59.29, "amazon-google": 81.34,
    "beer": 96.77, "dblp-acm": 98.98, "dblp-googlescholar": 98.51, "fodors-zagats": 100, "itunes-amazon": 98.11,
    "abt-buy": 89.58, "walmart-amazon": 89.42,
}


def test_compare_report_average_matches_reference():
    table = compare_report([("13B", _report(REFERENCE_13B))])
    assert len(table.rows) == 19
    assert table.average.values[0] == pytest.approx(86.02, abs=0.05)
    assert "Average" in table.render()


def test_compare_report_winner_and_mismatch():
    table = compare_report([("a", _report({"beer": 90.0})), ("b", _report({"beer": 95.0}))])
    assert table.rows[0].winners == (1,)
    tie = compare_report([("a", _report({"beer": 90.0})), ("b", _report({"beer": 90.001}))])
    assert tie.rows[0].winners == (0, 1)
    with pytest.raises(KeyMismatch):
        compare_report([("a", _report({"beer": 1.0})), ("b", _report({"adult": 1.0}))])


def test_report_render_and_records():
    rep = _report({"beer": 96.774})
    text = rep.render()
    assert "96.77" in text and "unparseable predictions: 0" in text
    assert rep.to_records() == ['{"count": 1, "dataset": "beer", "f1": 96.77, "precision": 96.77, '
                                '"recall": 96.77, "task": "EM", "unparseable": 0}']


def test_random_prf1_against_fraction_oracle():
    rng = random.Random(3)
    for _ in range(200):
        tp, fp, fn = (rng.randint(0, 30) for _ in range(3))
        p, r, f = prf1(Confusion(tp, fp, fn))
        exp = Fraction(200 * tp, 2 * tp + fp + fn) if tp else Fraction(0)
        assert f == pytest.approx(float(exp))
