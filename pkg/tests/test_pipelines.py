from __future__ import annotations

import json

import pytest

from conftest import FIXTURES
from dpinstruct.core import Label, RecordInstance, Role, TaskKind
from dpinstruct.inference import MockConfig, MockState, RuleOracle, in_process_client
from dpinstruct.ingest import load_dataset
from dpinstruct.parser import parse_binary
from dpinstruct.pipelines import (
    CtaSpec,
    JudgeCase,
    MissingFewShot,
    RunSpec,
    StageFailure,
    UnparseableVerdict,
    a_position_for,
    aggregate_judgments,
    ave_prompt,
    build_run_prompts,
    cta_column_prompt,
    cta_domain_prompt,
    gold_records,
    judge_many,
    judge_pair,
    read_jsonl,
    rule_oracle,
    run_ave,
    run_cta,
    run_task,
    winning_rate,
)
from dpinstruct.serializer import Mode


def _perfect_client(spec, state=None):
    return in_process_client(MockConfig(mode="rule", oracle=rule_oracle(build_run_prompts(spec))), state=state)


def test_run_task_perfect_model(beer_manifest, tmp_path):
    spec = RunSpec(load_dataset(beer_manifest), output=tmp_path / "p.jsonl")
    preds = run_task(spec, _perfect_client(spec))
    gold = {g["instance_id"]: g["gold"] for g in gold_records(build_run_prompts(spec), "beer")}
    assert len(preds) == 12
    assert all(p.error is None for p in preds)
    assert {p.instance_id: p.label.value for p in preds} == gold
    rows = read_jsonl(tmp_path / "p.jsonl")
    assert [r["instance_id"] for r in rows] == [p.instance_id for p in preds]


def test_run_task_replay_is_deterministic(beer_manifest, tmp_path):
    spec = RunSpec(load_dataset(beer_manifest))
    pairs = build_run_prompts(spec)
    replay = {h: a for h, a in rule_oracle(pairs).by_hash.items()}
    outs = []
    for name in ("a", "b"):
        s = RunSpec(load_dataset(beer_manifest), output=tmp_path / f"{name}.jsonl")
        run_task(s, in_process_client(MockConfig(mode="replay", replay=replay)))
        outs.append((tmp_path / f"{name}.jsonl").read_bytes())
    assert outs[0] == outs[1]


def test_reasoning_run_parses_final_line(beer_manifest):
    spec = RunSpec(load_dataset(beer_manifest), mode=Mode.REASONING)
    preds = run_task(spec, _perfect_client(spec))
    assert all(p.parsed.confidence_source == "final-line" for p in preds)
    assert all(p.raw_text.rstrip().splitlines()[-1].startswith("Final answer:") for p in preds)


def test_three_shot_prompts(beer_manifest):
    spec = RunSpec(load_dataset(beer_manifest), shots=3)
    state = MockState()
    run_task(spec, _perfect_client(spec, state))
    assert state.requests == 12
    for prompt in state.prompts:
        # three example blocks; the live instance follows with an open response tag
        assert prompt.count("### Instruction:") == 3
        assert prompt.count("### Response:") == 4
        assert prompt.endswith("### Response:")


def test_missing_fewshot_fails_before_sending(beer_manifest, tmp_path):
    with pytest.raises(MissingFewShot) as err:
        RunSpec(load_dataset(beer_manifest), shots=3, fewshot_dir=tmp_path)
    assert "beer.json" in str(err.value)


def test_unreachable_endpoint_recorded_per_prediction(beer_manifest):
    spec = RunSpec(load_dataset(beer_manifest))
    preds = run_task(spec, in_process_client(MockConfig(mode="replay")))
    assert all(p.raw_text is None and p.error for p in preds)


def test_run_task_rejects_unseen_tasks(beer_manifest):
    from dataclasses import replace

    ds = load_dataset(beer_manifest)
    ds = type(ds)(replace(ds.descriptor, task=TaskKind.CTA), ds.instances, ds.splits)
    with pytest.raises(ValueError):
        build_run_prompts(RunSpec(ds))


# -- CTA ----------------------------------------------------------------------


def _cta():
    table = json.loads((FIXTURES / "cta_table.json").read_text(encoding="utf-8"))
    cols = tuple(RecordInstance(tuple((f"v{i}", v) for i, v in enumerate(c["values"])), Role.COLUMN)
                 for c in table["columns"])
    return table, CtaSpec(cols, tuple(table["candidate_domains"]), table["candidate_types"])


def _cta_oracle(table, spec):
    oracle = RuleOracle(by_text=[("classify the domain of a table", table["domain"])])
    for i, c in enumerate(table["columns"]):
        oracle.by_text.append((f"Column values: {', '.join(spec.column_values(i))}", c["type"]))
    return oracle


def test_cta_cot_phrasing():
    _, spec = _cta()
    _, user = cta_domain_prompt(spec, cot=True)
    assert "3. Decide if the table describes Movie, Book or Restaurant." in user
    _, plain = cta_domain_prompt(spec, cot=False)
    assert "step by step" not in plain
    _, col = cta_column_prompt(spec, 0, "Movie", cot=True)
    assert "from a table about Movie." in col
    assert "Candidate types: Movie, Person, Duration, Date." in col
    assert "Heat, Alien, Fargo, Vertigo, Jaws" in col and "Rocky" not in col  # five samples


def test_cta_two_stage_annotates_every_column():
    table, spec = _cta()
    res = run_cta(spec, in_process_client(MockConfig(mode="rule", oracle=_cta_oracle(table, spec))))
    assert res.domain == "Movie"
    assert [c.value for c in res.columns] == [c["type"] for c in table["columns"]]
    assert res.requests == 1 + len(table["columns"])


def test_cta_abstains_when_no_candidate_named():
    _, spec = _cta()
    res = run_cta(spec, in_process_client(MockConfig(mode="replay", replay_fallback="not sure")), two_stage=False)
    assert res.columns == [None] * 4


def test_cta_domain_stage_failure():
    _, spec = _cta()
    with pytest.raises(StageFailure):
        run_cta(spec, in_process_client(MockConfig(mode="replay", replay_fallback="no idea")))


def test_cta_spec_validation():
    with pytest.raises(ValueError):
        CtaSpec((), (), ("a",))


# -- AVE ----------------------------------------------------------------------


def _ave_rows():
    return [json.loads(line) for line in (FIXTURES / "ave.jsonl").read_text(encoding="utf-8").splitlines()]


def test_ave_extracts_values_and_na():
    for row in _ave_rows():
        desc = RecordInstance((("description", row["description"]),))
        oracle = RuleOracle(by_text=[(f"Attribute: {a}\n", v) for a, v in row["attributes"].items()])
        out = run_ave(desc, list(row["attributes"]), in_process_client(MockConfig(mode="rule", oracle=oracle)))
        assert {a: lbl.value for a, lbl in out.items()} == row["attributes"]


def test_ave_empty_attribute_list_sends_nothing():
    state = MockState()
    desc = RecordInstance((("description", "text"),))
    assert run_ave(desc, [], in_process_client(MockConfig(mode="echo"), state=state)) == {}
    assert state.requests == 0


def test_ave_prompt_mentions_na():
    _, user = ave_prompt(RecordInstance((("description", "a red cup"),)), "color")
    assert 'answer "N/A"' in user and "Attribute: color" in user


# -- judging ------------------------------------------------------------------


def _cases(n, dataset="beer"):
    return [JudgeCase(f"c{i}", f"question {i}", f"alpha {i}", f"beta {i}", dataset) for i in range(n)]


# the judge always prefers the "alpha" answer, wherever it is shown
_PREFERS_A = RuleOracle(by_text=[("### Model 1:\nalpha", "Winner: Model 1"), ("### Model 1:\nbeta", "Winner: Model 2")])


def test_judge_undoes_position_randomization():
    client = in_process_client(MockConfig(mode="rule", oracle=_PREFERS_A))
    verdicts = judge_many(_cases(40), client, seed=7)
    assert {v.winner for v in verdicts} == {"A"}
    assert {v.a_position for v in verdicts} == {1, 2}


def test_position_bias_washes_out():
    # a judge that always picks the first slot wins for A about half the time
    client = in_process_client(MockConfig(mode="rule", rule_fallback="Winner: Model 1"))
    verdicts = judge_many(_cases(1000), client, seed=1)
    a_share = sum(v.winner == "A" for v in verdicts) / len(verdicts)
    assert 0.45 <= a_share <= 0.55
    assert all((v.winner == "A") == (v.a_position == 1) for v in verdicts)


def test_a_position_is_seeded():
    assert a_position_for("c1", 3) == a_position_for("c1", 3)
    assert {a_position_for(f"c{i}", 3) for i in range(50)} == {1, 2}


def test_unparseable_verdict():
    client = in_process_client(MockConfig(mode="replay", replay_fallback="Both are fine."))
    with pytest.raises(UnparseableVerdict):
        judge_pair(_cases(1)[0], client)
    assert isinstance(judge_many(_cases(2), client)[0], UnparseableVerdict)


def test_empty_answer_rejected():
    client = in_process_client(MockConfig(mode="echo"))
    with pytest.raises(ValueError):
        judge_pair(JudgeCase("x", "q", "", "b"), client)


def test_report_aggregation():
    client = in_process_client(MockConfig(mode="rule", oracle=_PREFERS_A))
    verdicts = judge_many(_cases(3, "adult") + _cases(2, "beer"), client)
    report = aggregate_judgments(verdicts)
    assert report.per_dataset == {"adult": (3, 0), "beer": (2, 0)}
    assert report.rates == (100.0, 0.0)
    text = report.render("13B", "other")
    assert "Winning Rate" in text and "100.00%*" in text


def test_empty_report():
    report = aggregate_judgments([])
    assert report.totals == (0, 0) and report.rates is None
    assert "Winning Rate" not in report.render()


def test_winning_rate_truncates():
    assert winning_rate(161, 220) == 73.18
    assert winning_rate(2, 3) == 66.66
    assert winning_rate(0, 5) == 0.0


def test_binary_parse_of_rule_answers():
    assert parse_binary(Label.yes().render()).label.is_yes
