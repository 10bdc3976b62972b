"""Instruction-corpus assembly.

Task-mode corpora are planned per dataset (keep every positive, subsample
the rest with a seed), ED instances are duplicated once per missing-value
policy, and reasoning corpora are distilled from a teacher that sees the
gold answer as a hint the student never sees.
"""

from __future__ import annotations

import json
import logging
import random
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .core import DPError, Label, LabeledInstance, TaskKind, is_missing
from .evaluation import fold
from .ingest import Dataset, UnknownDataset, registry_lookup
from .knowledge import KnowledgeRegistry, MissingPolicy, default_registry
from .parser import ParseFailure, parse_final, parse_for_task
from .serializer import (
    HINT_MARKER,
    Mode,
    build_hinted_groundtruth_prompt,
    build_prompt,
)

log = logging.getLogger(__name__)

POOL_CAP = 115_000
ED_DUPLICATION = "ed-missing-x2"
NO_DUPLICATION = "none"
DEFAULT_NOVELTY_THRESHOLD = 0.35


class PoolExceeded(DPError):
    pass


class QuotaUnmet(DPError):
    pass


class TeacherUnavailable(DPError):
    pass


class TeacherAnswerMismatch(DPError):
    pass


class IoError(DPError):
    pass


# -- quota planning ---------------------------------------------------------


@dataclass(frozen=True)
class PoolStats:
    dataset: str
    task: TaskKind
    size: int
    positives: int | None = None  # None where the task has no positive class


@dataclass(frozen=True)
class DatasetQuota:
    dataset: str
    task: TaskKind
    target_count: int
    positives_kept: str | int = "all"
    duplication: str = NO_DUPLICATION
    sampling_seed: int = 0

    @property
    def entry_count(self) -> int:
        return self.target_count * (2 if self.duplication == ED_DUPLICATION else 1)


@dataclass(frozen=True)
class CorpusPlan:
    quotas: tuple[DatasetQuota, ...] = ()
    pool_cap: int = POOL_CAP
    dataset_knowledge: bool = False

    def __post_init__(self) -> None:
        total = sum(q.target_count for q in self.quotas)
        if total > self.pool_cap:
            raise PoolExceeded(f"plan needs {total} instances, pool cap is {self.pool_cap}")
        for q in self.quotas:
            if (q.task is TaskKind.ED) != (q.duplication == ED_DUPLICATION):
                raise ValueError(f"{q.dataset}: ED quotas (and only those) are duplicated")

    @property
    def total_entries(self) -> int:
        return sum(q.entry_count for q in self.quotas)

    def quota(self, dataset: str) -> DatasetQuota:
        for q in self.quotas:
            if q.dataset == dataset:
                return q
        raise KeyError(dataset)


@dataclass(frozen=True)
class QuotaConfig:
    # dataset -> instance target for SM/EM datasets; absent means "take the pool"
    targets: Mapping[str, int] = field(default_factory=dict)
    seed: int = 0
    pool_cap: int = POOL_CAP
    dataset_knowledge: bool = False


def plan_quotas(pool: Iterable[PoolStats], config: QuotaConfig = QuotaConfig()) -> CorpusPlan:
    """Per-dataset targets: ED/DI take their whole pool, SM/EM are capped by ``config.targets``."""
    quotas = []
    for stats in pool:
        if stats.task in (TaskKind.ED, TaskKind.DI):
            target = stats.size
        else:
            target = min(config.targets.get(stats.dataset, stats.size), stats.size)
        kept: str | int = "all"
        if stats.positives is not None and stats.positives > target:
            kept = target
        dup = ED_DUPLICATION if stats.task is TaskKind.ED else NO_DUPLICATION
        quotas.append(DatasetQuota(stats.dataset, stats.task, target, kept, dup, config.seed))
    return CorpusPlan(tuple(quotas), config.pool_cap, config.dataset_knowledge)


# Published instruction-data statistics: dataset -> (task, instances, positives).
REFERENCE_COUNTS: dict[str, tuple[TaskKind, int, int | None]] = {
    "adult": (TaskKind.ED, 550, 35),
    "hospital": (TaskKind.ED, 1710, 44),
    "buy": (TaskKind.DI, 586, None),
    "restaurant": (TaskKind.DI, 778, None),
    "mimic-iii": (TaskKind.SM, 7000, 11),
    "synthea": (TaskKind.SM, 5000, 18),
    "amazon-google": (TaskKind.EM, 6874, 699),
    "beer": (TaskKind.EM, 359, 54),
    "dblp-acm": (TaskKind.EM, 5000, 885),
    "dblp-googlescholar": (TaskKind.EM, 5000, 924),
    "fodors-zagats": (TaskKind.EM, 757, 88),
    "itunes-amazon": (TaskKind.EM, 430, 105),
}

# Pool sizes behind those statistics. Only DBLP-GoogleScholar's ratio is stated (1/3
# chosen); the other SM/EM pool sizes are stand-ins larger than the targets.
REFERENCE_POOL_SIZES: dict[str, int] = {
    "adult": 550,
    "hospital": 1710,
    "buy": 586,
    "restaurant": 778,
    "mimic-iii": 10_000,
    "synthea": 8_000,
    "amazon-google": 6874,
    "beer": 359,
    "dblp-acm": 7417,
    "dblp-googlescholar": 15_000,
    "fodors-zagats": 757,
    "itunes-amazon": 430,
}


def reference_pool() -> list[PoolStats]:
    return [
        PoolStats(ds, task, REFERENCE_POOL_SIZES[ds], positives)
        for ds, (task, _, positives) in REFERENCE_COUNTS.items()
    ]


def reference_quota_config(seed: int = 0, dataset_knowledge: bool = False) -> QuotaConfig:
    targets = {ds: n for ds, (task, n, _) in REFERENCE_COUNTS.items() if task in (TaskKind.SM, TaskKind.EM)}
    return QuotaConfig(targets=targets, seed=seed, dataset_knowledge=dataset_knowledge)


def pool_stats(dataset: str, instances: Sequence[LabeledInstance]) -> PoolStats:
    task = instances[0].task if instances else registry_lookup(dataset).task
    positives = None
    if task.is_binary:
        positives = sum(1 for x in instances if x.gold is not None and x.gold.is_yes)
    return PoolStats(dataset, task, len(instances), positives)


def training_pool(dataset: Dataset | Sequence[LabeledInstance]) -> list[LabeledInstance]:
    """Train and valid instances of a dataset (all instances if it has no such splits)."""
    if not isinstance(dataset, Dataset):
        return list(dataset)
    idx = sorted(set(dataset.splits.get("train", [])) | set(dataset.splits.get("valid", [])))
    if not idx:
        return list(dataset.instances)
    return [dataset.instances[i] for i in idx]


def _rng(seed: int, *parts: str) -> random.Random:
    return random.Random(":".join([str(seed), *parts]))


def select_instances(instances: Sequence[LabeledInstance], quota: DatasetQuota,
                     keep_positives: bool = True, salt: str = "task") -> list[LabeledInstance]:
    """Seeded pick of ``quota.target_count`` instances in their original order.

    With ``keep_positives`` the gold-Yes instances go in first (all of them,
    or a seeded sample when the plan caps them); negatives fill the rest
    uniformly at random.
    """
    n = quota.target_count
    if n > len(instances):
        raise QuotaUnmet(f"{quota.dataset}: plan wants {n} instances, pool has {len(instances)}")
    if n == len(instances):
        return list(instances)
    rng = _rng(quota.sampling_seed, quota.dataset, salt)
    if not keep_positives or not quota.task.is_binary:
        return [instances[i] for i in sorted(rng.sample(range(len(instances)), n))]
    pos = [i for i, x in enumerate(instances) if x.gold is not None and x.gold.is_yes]
    neg = [i for i, x in enumerate(instances) if not (x.gold is not None and x.gold.is_yes)]
    if quota.positives_kept == "all" and len(pos) <= n:
        chosen = pos
    else:
        limit = n if quota.positives_kept == "all" else min(int(quota.positives_kept), n)
        chosen = rng.sample(pos, min(limit, len(pos)))
    chosen = chosen + rng.sample(neg, n - len(chosen))
    return [instances[i] for i in sorted(chosen)]


# -- ED duplication ---------------------------------------------------------


@dataclass(frozen=True)
class EdVariant:
    instance: LabeledInstance
    policy: MissingPolicy
    gold: Label


def duplicate_ed(instances: Sequence[LabeledInstance]) -> list[EdVariant]:
    """Two variants per instance, one per missing-value policy.

    A missing target value is an error (Yes) under ``is-error`` and not one
    (No) under ``not-error``; other instances keep their gold in both.
    """
    out = []
    for item in instances:
        if item.task is not TaskKind.ED:
            raise ValueError(f"duplicate_ed needs ED instances, got {item.task.value}")
        missing = is_missing(item.target_value)
        for policy in (MissingPolicy.IS_ERROR, MissingPolicy.NOT_ERROR):
            gold = Label.binary(policy is MissingPolicy.IS_ERROR) if missing else item.gold
            out.append(EdVariant(item, policy, gold))
    return out


# -- corpus entries ---------------------------------------------------------


@dataclass(frozen=True)
class CorpusEntry:
    id: str
    task: TaskKind
    dataset: str
    split: str
    mode: str
    prompt: str
    response: str
    gold: Label
    policy: MissingPolicy | None = None
    instance_block: str = ""

    @property
    def system(self) -> str:
        return self.prompt.split("\n", 1)[0]

    @property
    def instruction(self) -> str:
        parts = self.prompt.split("\n", 1)
        return parts[1] if len(parts) > 1 else ""

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "task": self.task.value,
            "dataset": self.dataset,
            "split": self.split,
            "mode": self.mode,
            "prompt": self.prompt,
            "response": self.response,
            "gold": self.gold.to_json(),
            "policy": self.policy.value if self.policy else None,
            "instance_block": self.instance_block,
        }

    @classmethod
    def from_json(cls, data: dict) -> "CorpusEntry":
        return cls(
            id=data["id"],
            task=TaskKind.parse(data["task"]),
            dataset=data["dataset"],
            split=data["split"],
            mode=data["mode"],
            prompt=data["prompt"],
            response=data["response"],
            gold=Label.from_json(data["gold"]),
            policy=MissingPolicy(data["policy"]) if data.get("policy") else None,
            instance_block=data.get("instance_block", ""),
        )

    def to_triplet(self) -> dict:
        return {"system": self.system, "instruction": self.instruction, "output": self.response}


def _entry_id(task: TaskKind, dataset: str, mode: str, seq: int, policy: MissingPolicy | None) -> str:
    base = f"{task.value.lower()}-{dataset}-{mode}-{seq:06d}"
    return f"{base}-{policy.value}" if policy else base


def prompt_params(dataset: str) -> dict:
    try:
        return dict(registry_lookup(dataset).prompt)
    except UnknownDataset:
        return {}


def _work_items(task: TaskKind, selected: Sequence[LabeledInstance]):
    """(seq, instance-with-adjusted-gold, policy) for every entry to emit."""
    if task is TaskKind.ED:
        for n, v in enumerate(duplicate_ed(selected)):
            yield n // 2, replace(v.instance, gold=v.gold), v.policy
    else:
        for n, item in enumerate(selected):
            yield n, item, None


def build_task_corpus(plan: CorpusPlan, datasets: Mapping[str, Dataset | Sequence[LabeledInstance]],
                      registry: KnowledgeRegistry | None = None) -> list[CorpusEntry]:
    """Task-mode entries, in plan order; the response is the rendered gold label."""
    registry = registry or default_registry()
    entries: list[CorpusEntry] = []
    for quota in plan.quotas:
        if quota.dataset not in datasets:
            raise QuotaUnmet(f"no data supplied for planned dataset {quota.dataset}")
        selected = select_instances(training_pool(datasets[quota.dataset]), quota)
        params = prompt_params(quota.dataset)
        knowledge_cache: dict = {}
        for seq, item, policy in _work_items(quota.task, selected):
            if policy not in knowledge_cache:
                knowledge_cache[policy] = registry.resolve(
                    quota.task, quota.dataset, plan.dataset_knowledge, policy)
            bundle = build_prompt(item, knowledge_cache[policy], Mode.TASK, params=params)
            entries.append(CorpusEntry(
                id=_entry_id(quota.task, quota.dataset, "task", seq, policy),
                task=quota.task,
                dataset=quota.dataset,
                split="train",
                mode=Mode.TASK.value,
                prompt=bundle.render(),
                response=item.gold.render(),
                gold=item.gold,
                policy=policy,
                instance_block=bundle.instance_block,
            ))
    return entries


# -- reasoning corpora ------------------------------------------------------

# Per-task entry totals for the four reasoning corpora (ED counts include
# the ×2 duplication).
REASONING_PLANS: dict[str, dict[TaskKind, int]] = {
    "r8k": {TaskKind.ED: 3056, TaskKind.DI: 1364, TaskKind.SM: 2000, TaskKind.EM: 2000},
    "r11k": {TaskKind.ED: 3056, TaskKind.DI: 1364, TaskKind.SM: 3500, TaskKind.EM: 3500},
    "r14k": {TaskKind.ED: 3056, TaskKind.DI: 1364, TaskKind.SM: 5000, TaskKind.EM: 5000},
    "r20k": {TaskKind.ED: 3056, TaskKind.DI: 1364, TaskKind.SM: 8600, TaskKind.EM: 7000},
}
# ED and SM keep their (rare) positives; DI takes everything; EM is sampled.
_KEEP_POSITIVES = {TaskKind.ED, TaskKind.SM}


def apportion(total: int, weights: Sequence[int]) -> list[int]:
    """Split ``total`` in proportion to ``weights`` (largest remainder, ties to the earlier item)."""
    if total < 0 or any(w < 0 for w in weights):
        raise ValueError("negative total or weight")
    wsum = sum(weights)
    if wsum == 0:
        return [0] * len(weights)
    exact = [total * w / wsum for w in weights]
    out = [int(x) for x in exact]
    order = sorted(range(len(weights)), key=lambda i: (-(exact[i] - out[i]), i))
    for i in order[: total - sum(out)]:
        out[i] += 1
    return out


def plan_reasoning(name: str, corpus_plan: CorpusPlan, seed: int | None = None) -> CorpusPlan:
    """Instance quotas for a reasoning corpus, drawn from the task-corpus plan.

    ED's entry total is halved into instances (each is duplicated), DI keeps
    everything, SM/EM totals are spread over datasets in proportion to their
    task-corpus sizes.
    """
    try:
        totals = REASONING_PLANS[name]
    except KeyError:
        raise ValueError(f"unknown reasoning plan {name!r}; choose from {sorted(REASONING_PLANS)}") from None
    quotas: list[DatasetQuota] = []
    for task in (TaskKind.ED, TaskKind.DI, TaskKind.SM, TaskKind.EM):
        base = [q for q in corpus_plan.quotas if q.task is task]
        if not base:
            continue
        if task is TaskKind.DI:
            counts = [q.target_count for q in base]
        else:
            want = totals[task] // 2 if task is TaskKind.ED else totals[task]
            counts = apportion(min(want, sum(q.target_count for q in base)), [q.target_count for q in base])
        for q, n in zip(base, counts):
            quotas.append(replace(q, target_count=n, positives_kept="all",
                                  sampling_seed=q.sampling_seed if seed is None else seed))
    return CorpusPlan(tuple(quotas), corpus_plan.pool_cap, dataset_knowledge=False)


@dataclass
class ReasoningCorpus:
    entries: list[CorpusEntry]
    planned: int
    dropped: list[tuple[str, str]] = field(default_factory=list)  # (entry id, reason)


def answer_matches(task: TaskKind, response: str, gold: Label) -> bool:
    """True when the reply's final-answer line parses to ``gold``."""
    try:
        _, final = parse_final(response)
        parsed = parse_for_task(task, final).label
    except (ParseFailure, ValueError):
        return False
    if task.is_binary:
        return parsed.value == gold.value
    return fold(parsed.value) == fold(gold.value)


def build_reasoning_corpus(
    plan: str,
    datasets: Mapping[str, Dataset | Sequence[LabeledInstance]],
    teacher,
    corpus_plan: CorpusPlan | None = None,
    registry: KnowledgeRegistry | None = None,
    retries: int = 2,
    seed: int = 0,
) -> ReasoningCorpus:
    """Distill reasoning entries from ``teacher`` (a :class:`~dpinstruct.inference.ChatClient`).

    The teacher prompt carries dataset knowledge and the gold answer as a
    hint; the stored prompt is the plain reasoning prompt. Replies whose
    final answer disagrees with gold are re-requested up to ``retries``
    times, then dropped.
    """
    from .inference import CompletionRequest, EndpointError

    registry = registry or default_registry()
    if corpus_plan is None:
        stats = [pool_stats(ds, training_pool(data)) for ds, data in datasets.items()]
        corpus_plan = plan_quotas(stats, reference_quota_config(seed))
    rplan = plan_reasoning(plan, corpus_plan, seed)

    pending: list[tuple[CorpusEntry, CompletionRequest]] = []
    for quota in rplan.quotas:
        pool = training_pool(datasets[quota.dataset])
        selected = select_instances(pool, quota, keep_positives=quota.task in _KEEP_POSITIVES, salt="reasoning")
        params = prompt_params(quota.dataset)
        extra = registry.dataset_rules(quota.dataset)
        for seq, item, policy in _work_items(quota.task, selected):
            knowledge = registry.resolve(quota.task, quota.dataset, False, policy)
            student = build_prompt(item, knowledge, Mode.REASONING, params=params)
            hinted = build_hinted_groundtruth_prompt(item, knowledge, extra, params=params)
            entry = CorpusEntry(
                id=_entry_id(quota.task, quota.dataset, "reasoning", seq, policy),
                task=quota.task,
                dataset=quota.dataset,
                split="train",
                mode=Mode.REASONING.value,
                prompt=student.render(),
                response="",
                gold=item.gold,
                policy=policy,
                instance_block=student.instance_block,
            )
            request = CompletionRequest(hinted.system, hinted.user_text(), prefix=hinted.prefix(), key=entry.id)
            pending.append((entry, request))

    order = {entry.id: i for i, (entry, _) in enumerate(pending)}
    done: dict[str, CorpusEntry] = {}
    dropped: list[tuple[str, str]] = []
    for attempt in range(retries + 1):
        if not pending:
            break
        results = teacher.complete_grouped([req for _, req in pending])
        if attempt == 0 and all(isinstance(r, EndpointError) for r in results):
            raise TeacherUnavailable(str(results[0]))
        retry = []
        for (entry, req), res in zip(pending, results):
            if isinstance(res, Exception):
                retry.append((entry, req, "error", str(res)))
            elif answer_matches(entry.task, res.text, entry.gold):
                done[entry.id] = replace(entry, response=res.text)
            else:
                err = TeacherAnswerMismatch(f"{entry.id}: teacher disagrees with gold {entry.gold.value!r}")
                retry.append((entry, req, "mismatch", str(err)))
        pending = [(e, r) for e, r, _, _ in retry]
        if attempt == retries:
            for entry, _, reason, detail in retry:
                log.warning("dropping %s", detail)
                dropped.append((entry.id, reason))

    entries = []
    for entry_id in sorted(done, key=order.__getitem__):
        entry = done[entry_id]
        if HINT_MARKER in entry.prompt:
            dropped.append((entry.id, "hint-leak"))
            continue
        entries.append(entry)
    return ReasoningCorpus(entries, len(order), dropped)


# -- quality filter ---------------------------------------------------------

_TOKEN = re.compile(r"\w+")


def _tokens(text: str) -> list[str]:
    return _TOKEN.findall(text.lower().replace('"', " ").replace("'", " "))


@dataclass(frozen=True)
class FilterVerdict:
    keep: bool
    reason: str | None = None
    novelty: float = 0.0


def novelty(response_body: str, instance_block: str) -> float:
    """1 − (share of response tokens that already occur in the instance)."""
    body = _tokens(response_body)
    if not body:
        return 0.0
    seen = set(_tokens(instance_block))
    return 1.0 - sum(1 for t in body if t in seen) / len(body)


def filter_low_quality(entry: CorpusEntry, threshold: float = DEFAULT_NOVELTY_THRESHOLD) -> FilterVerdict:
    """Drop reasoning replies that are empty or mostly restate the instance."""
    if entry.mode != Mode.REASONING.value:
        raise ValueError("quality filtering applies to reasoning entries only")
    if not entry.response.strip():
        return FilterVerdict(False, "empty", 0.0)
    try:
        body, _ = parse_final(entry.response)
    except ParseFailure:
        body = entry.response
    score = novelty(body, entry.instance_block)
    if score < threshold:
        return FilterVerdict(False, "rephrase", score)
    return FilterVerdict(True, None, score)


def filter_corpus(entries: Iterable[CorpusEntry], threshold: float = DEFAULT_NOVELTY_THRESHOLD):
    kept, dropped = [], []
    for entry in entries:
        verdict = filter_low_quality(entry, threshold)
        if verdict.keep:
            kept.append(entry)
        else:
            dropped.append((entry.id, verdict.reason))
    log.info("quality filter (threshold %.2f): kept %d, dropped %d", threshold, len(kept), len(dropped))
    return kept, dropped


# -- export -----------------------------------------------------------------

FORMATS = ("native", "instruction-triplet")


def export_corpus(entries: Iterable[CorpusEntry], path: str | Path, format: str = "native") -> Path:
    """One JSON object per line, ordered by entry id."""
    if format not in FORMATS:
        raise ValueError(f"unknown export format {format!r}")
    path = Path(path)
    lines = []
    for entry in sorted(entries, key=lambda e: e.id):
        if HINT_MARKER in entry.prompt and entry.mode == Mode.REASONING.value:
            raise ValueError(f"{entry.id}: refusing to export a prompt with a hint")
        record = entry.to_json() if format == "native" else entry.to_triplet()
        lines.append(json.dumps(record, sort_keys=True, ensure_ascii=False))
    try:
        path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror}") from None
    return path


def load_corpus(path: str | Path) -> list[CorpusEntry]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc.strerror}") from None
    return [CorpusEntry.from_json(json.loads(line)) for line in text.splitlines() if line.strip()]


TUNING_CONFIG = (
    ("lora_target", "q_proj,k_proj,v_proj,o_proj"),
    ("per_device_train_batch_size", "2"),
    ("gradient_accumulation_steps", "2"),
    ("learning_rate", "3e-5"),
    ("num_train_epochs", "5"),
    ("lora_rank", "32"),
    ("lora_alpha", "32"),
    ("temperature", "0.35"),
    ("top_p", "0.9"),
    ("top_k", "20"),
)


def emit_tuning_config(path: str | Path) -> Path:
    """Write the LoRA tuning and inference settings as flat ``key: value`` lines."""
    path = Path(path)
    body = "# tuning\n"
    for key, value in TUNING_CONFIG:
        if key == "temperature":
            body += "# inference\n"
        body += f"{key}: {value}\n"
    try:
        path.write_text(body, encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror}") from None
    return path
