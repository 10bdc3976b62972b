from __future__ import annotations

import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from dpinstruct.composer import (
    CorpusEntry,
    CorpusPlan,
    DatasetQuota,
    ED_DUPLICATION,
    PoolExceeded,
    PoolStats,
    QuotaConfig,
    QuotaUnmet,
    TeacherUnavailable,
    apportion,
    build_reasoning_corpus,
    build_task_corpus,
    duplicate_ed,
    emit_tuning_config,
    export_corpus,
    filter_low_quality,
    load_corpus,
    novelty,
    plan_quotas,
    plan_reasoning,
    select_instances,
)
from dpinstruct.core import Label, LabeledInstance, Missing, RecordInstance, TaskKind
from dpinstruct.inference import MockConfig, MockState, in_process_client
from dpinstruct.knowledge import MissingPolicy
from dpinstruct.synthetic import synthetic_dataset


def _pool(n=10, pos=4, task=TaskKind.EM, name="toy"):
    return synthetic_dataset(name, task, n, positives=pos, seed=1)


def test_tiny_pool_keeps_all_positives():
    items = _pool(10, 4)
    quota = DatasetQuota("toy", TaskKind.EM, 6, sampling_seed=5)
    chosen = select_instances(items, quota)
    assert len(chosen) == 6
    pos_ids = {it.uid for it in items if it.gold.is_yes}
    assert pos_ids <= {it.uid for it in chosen}
    assert sum(not it.gold.is_yes for it in chosen) == 2


def test_selection_is_seeded():
    items = _pool(200, 20)
    q = DatasetQuota("toy", TaskKind.EM, 50, sampling_seed=9)
    assert select_instances(items, q) == select_instances(items, q)
    other = select_instances(items, DatasetQuota("toy", TaskKind.EM, 50, sampling_seed=10))
    assert [i.uid for i in other] != [i.uid for i in select_instances(items, q)]


def test_plan_rules():
    pool = [PoolStats("e", TaskKind.ED, 30, 3), PoolStats("d", TaskKind.DI, 20),
            PoolStats("m", TaskKind.EM, 100, 12)]
    plan = plan_quotas(pool, QuotaConfig(targets={"m": 40}))
    assert plan.quota("e").target_count == 30 and plan.quota("e").duplication == ED_DUPLICATION
    assert plan.quota("e").entry_count == 60
    assert plan.quota("d").target_count == 20
    assert plan.quota("m").target_count == 40
    assert plan.total_entries == 120


def test_pool_cap():
    with pytest.raises(PoolExceeded):
        plan_quotas([PoolStats("m", TaskKind.EM, 200, 1)], QuotaConfig(pool_cap=100))


def test_ed_quota_must_duplicate():
    with pytest.raises(ValueError):
        CorpusPlan((DatasetQuota("e", TaskKind.ED, 5),))


def _missing_ed():
    rec = RecordInstance((("age", "30"), ("income", Missing)))
    return LabeledInstance(rec, TaskKind.ED, Label.no(), "income", "m")


def test_duplicate_ed_examples():
    out = duplicate_ed([_missing_ed()])
    assert [(v.policy, v.gold) for v in out] == [(MissingPolicy.IS_ERROR, Label.yes()),
                                                 (MissingPolicy.NOT_ERROR, Label.no())]
    text_item = LabeledInstance(RecordInstance((("age", "30"), ("income", "x"))), TaskKind.ED, Label.no(), "income")
    assert [v.gold for v in duplicate_ed([text_item])] == [Label.no(), Label.no()]
    assert len(duplicate_ed(synthetic_dataset("adult", TaskKind.ED, 550, 35, seed=0))) == 1100


def test_duplicate_ed_rejects_other_tasks():
    with pytest.raises(ValueError):
        duplicate_ed(_pool(2, 1))


def test_task_corpus_basics():
    pool = {"toy": _pool(12, 3), "adult": synthetic_dataset("adult", TaskKind.ED, 5, 2, seed=0, missing_targets=1)}
    plan = plan_quotas([PoolStats("toy", TaskKind.EM, 12, 3), PoolStats("adult", TaskKind.ED, 5, 2)],
                       QuotaConfig(targets={"toy": 8}, seed=4))
    entries = build_task_corpus(plan, pool)
    assert len(entries) == 8 + 10
    for e in entries:
        assert e.response == e.gold.render()
        assert e.mode == "task" and "Hint:" not in e.prompt
    ed = [e for e in entries if e.task is TaskKind.ED]
    assert {e.policy for e in ed} == {MissingPolicy.IS_ERROR, MissingPolicy.NOT_ERROR}
    # the injected missing-value note follows the entry's policy
    for e in ed:
        assert ("they ARE errors" in e.prompt) == (e.policy is MissingPolicy.IS_ERROR)
    assert [e.id for e in entries] == [e.id for e in build_task_corpus(plan, pool)]
    assert build_task_corpus(CorpusPlan(), pool) == []


def test_task_corpus_needs_data():
    plan = plan_quotas([PoolStats("toy", TaskKind.EM, 12, 3)])
    with pytest.raises(QuotaUnmet):
        build_task_corpus(plan, {})


@given(st.integers(0, 10_000), st.lists(st.integers(0, 500), min_size=1, max_size=12))
def test_apportion_sums_and_is_near_proportional(total, weights):
    out = apportion(total, weights)
    if sum(weights) == 0:
        assert out == [0] * len(weights)
        return
    assert sum(out) == total
    for n, w in zip(out, weights):
        assert abs(n - total * w / sum(weights)) < 1


def test_reasoning_plan_examples():
    pool = [PoolStats("a", TaskKind.ED, 2000, 50), PoolStats("d", TaskKind.DI, 1364),
            PoolStats("s1", TaskKind.SM, 7000, 11), PoolStats("s2", TaskKind.SM, 5000, 18),
            PoolStats("m", TaskKind.EM, 9000, 300)]
    base = plan_quotas(pool)
    r8 = plan_reasoning("r8k", base)
    per = {t: sum(q.entry_count for q in r8.quotas if q.task is t) for t in TaskKind}
    assert (per[TaskKind.ED], per[TaskKind.DI], per[TaskKind.SM], per[TaskKind.EM]) == (3056, 1364, 2000, 2000)
    r20 = plan_reasoning("r20k", base)
    per = {t: sum(q.entry_count for q in r20.quotas if q.task is t) for t in TaskKind}
    assert (per[TaskKind.SM], per[TaskKind.EM]) == (8600, 7000)
    with pytest.raises(ValueError):
        plan_reasoning("r9k", base)


def _small_reasoning_setup():
    pool = {"toy": _pool(30, 6)}
    base = plan_quotas([PoolStats("toy", TaskKind.EM, 30, 6)])
    return pool, base


def test_reasoning_entries_hide_hint_and_match_gold():
    pool, base = _small_reasoning_setup()
    state = MockState()
    result = build_reasoning_corpus("r8k", pool, in_process_client(MockConfig(mode="rule"), state=state), base)
    assert len(result.entries) == result.planned == 30
    assert all("Hint:" in p for p in state.prompts)
    for e in result.entries:
        assert "Hint:" not in e.prompt
        assert e.response.rstrip().endswith(f"Final answer: {e.gold.value}")
        assert filter_low_quality(e).keep


def test_wrong_teacher_is_retried_then_dropped():
    from dpinstruct.inference.mock import teacher_reasoning
    from dpinstruct.serializer import prompt_hash

    pool, base = _small_reasoning_setup()
    state = MockState()
    build_reasoning_corpus("r8k", pool, in_process_client(MockConfig(mode="rule"), state=state), base)
    # replay a teacher that always contradicts the hint
    replay = {prompt_hash(p): teacher_reasoning("", "No" if 'final answer is "Yes"' in p else "Yes")
              for p in state.prompts}
    state2 = MockState()
    bad = in_process_client(MockConfig(mode="replay", replay=replay), state=state2)
    result = build_reasoning_corpus("r8k", pool, bad, base, retries=2)
    assert result.entries == []
    assert len(result.dropped) == 30
    assert state2.requests == 30 * 3


def test_teacher_unreachable_is_fatal():
    pool, base = _small_reasoning_setup()
    dead = in_process_client(MockConfig(mode="replay"))  # every prompt is unknown -> 404
    with pytest.raises(TeacherUnavailable):
        build_reasoning_corpus("r8k", pool, dead, base, retries=0)


def _entry(response, block='Product A: [name: "a b c", factory: "d"]'):
    return CorpusEntry("x", TaskKind.EM, "beer", "train", "reasoning", "p", response, Label.no(), None, block)


def test_filter_examples():
    block = 'Product A: [name: "Sequoia American Amber Ale", factory: "Wig And Pen"]'
    restate = _entry('Product A: name "Sequoia American Amber Ale", factory "Wig And Pen".\nFinal answer: No', block)
    assert not filter_low_quality(restate).keep
    assert filter_low_quality(restate).reason == "rephrase"
    good = _entry(
        "Both are amber ales, but they are brewed by different companies, one in the United States and one in "
        "Denmark. Based on the comparison of the names and factories, they are not the same product.\n"
        "Final answer: No", block)
    assert filter_low_quality(good).keep
    empty = filter_low_quality(_entry("   "))
    assert (empty.keep, empty.reason) == (False, "empty")


def test_novelty_range():
    assert novelty("a b c", "a b c") == 0.0
    assert novelty("x y z", "a b c") == 1.0


def _three():
    return [
        CorpusEntry(f"em-beer-task-00000{i}", TaskKind.EM, "beer", "train", "task", f"sys\nprompt {i}",
                    "Yes" if i % 2 else "No", Label.binary(bool(i % 2)), None, "block")
        for i in (2, 0, 1)
    ]


def test_export_native_round_trip(tmp_path):
    path = export_corpus(_three(), tmp_path / "c.jsonl")
    lines = path.read_text(encoding="utf-8").splitlines()
    assert len(lines) == 3
    back = load_corpus(path)
    assert back == sorted(_three(), key=lambda e: e.id)
    again = export_corpus(back, tmp_path / "d.jsonl")
    assert again.read_bytes() == path.read_bytes()


def test_export_triplet(tmp_path):
    path = export_corpus(_three(), tmp_path / "t.jsonl", "instruction-triplet")
    rows = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()]
    assert [r["output"] for r in rows] == ["No", "Yes", "No"]
    assert set(rows[0]) == {"system", "instruction", "output"}
    assert rows[0]["system"] == "sys"


def test_export_refuses_hints(tmp_path):
    bad = CorpusEntry("r", TaskKind.EM, "beer", "train", "reasoning", 'x\nHint: the final answer is "No"', "r",
                      Label.no())
    with pytest.raises(ValueError):
        export_corpus([bad], tmp_path / "x.jsonl")


def test_export_io_error(tmp_path):
    from dpinstruct.composer import IoError

    with pytest.raises(IoError):
        export_corpus(_three(), tmp_path / "missing-dir" / "x.jsonl")


def test_tuning_config(tmp_path):
    a = emit_tuning_config(tmp_path / "a.txt").read_text(encoding="utf-8")
    b = emit_tuning_config(tmp_path / "b.txt").read_text(encoding="utf-8")
    assert a == b
    for line in ("learning_rate: 3e-5", "temperature: 0.35", "top_p: 0.9", "top_k: 20", "lora_rank: 32",
                 "lora_alpha: 32", "num_train_epochs: 5", "per_device_train_batch_size: 2",
                 "gradient_accumulation_steps: 2", "lora_target: q_proj,k_proj,v_proj,o_proj"):
        assert line in a.splitlines()
