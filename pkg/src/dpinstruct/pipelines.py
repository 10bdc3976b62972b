"""Runners that wire prompts, the chat client and the parsers together.

``run_task`` covers ED/DI/SM/EM; ``run_cta`` is the domain-then-type column
annotation chain (each stage optionally step-by-step); ``run_ave`` asks one
question per attribute; ``judge_pair`` runs a blind head-to-head comparison.
"""

from __future__ import annotations

import json
import logging
import random
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

from .core import DPError, Label, LabeledInstance, RecordInstance, TaskKind, render_value
from .ingest import Dataset
from .inference import ChatClient, CompletionRequest, EndpointProfile, RuleOracle
from .knowledge import KnowledgeRegistry, MissingPolicy, default_registry
from .parser import ParseFailure, ParsedAnswer, parse_ave, parse_cta, parse_for_task
from .serializer import (
    DEFAULT_MAX_SHOTS,
    SYSTEM_MESSAGE,
    FewShotExample,
    Mode,
    PromptBundle,
    build_prompt,
    prompt_hash,
)

log = logging.getLogger(__name__)


class MissingFewShot(DPError):
    pass


class StageFailure(DPError):
    def __init__(self, stage: int, column: int | None, reason: str):
        where = f"stage {stage}" + (f", column {column}" if column is not None else "")
        super().__init__(f"{where}: {reason}")
        self.stage = stage
        self.column = column


class UnparseableVerdict(DPError):
    pass


# -- few-shot fixtures ------------------------------------------------------


def fewshot_path(dataset: str, fewshot_dir: str | Path | None = None) -> Path:
    if fewshot_dir is not None:
        return Path(fewshot_dir) / f"{dataset}.json"
    return Path(str(resources.files("dpinstruct.data").joinpath("fewshot", f"{dataset}.json")))


def load_fewshot(dataset: str, fewshot_dir: str | Path | None = None) -> list[FewShotExample]:
    path = fewshot_path(dataset, fewshot_dir)
    if not path.is_file():
        raise MissingFewShot(f"few-shot fixture file not found: {path}")
    return [FewShotExample.from_json(item) for item in json.loads(path.read_text(encoding="utf-8"))]


# -- seen-task runs ---------------------------------------------------------


@dataclass
class RunSpec:
    dataset: Dataset
    mode: Mode = Mode.TASK
    shots: int = 0
    profile: EndpointProfile | None = None
    dataset_knowledge: bool = False
    policy: MissingPolicy | None = None
    split: str = "test"
    fewshot_dir: Path | None = None
    output: Path | None = None
    registry: KnowledgeRegistry | None = None

    def __post_init__(self) -> None:
        if not 0 <= self.shots <= DEFAULT_MAX_SHOTS:
            raise ValueError(f"shots must be between 0 and {DEFAULT_MAX_SHOTS}")
        if self.shots:
            # fail before any request is sent
            load_fewshot(self.dataset.descriptor.id, self.fewshot_dir)

    @property
    def task(self) -> TaskKind:
        return self.dataset.descriptor.task

    def instances(self) -> list[LabeledInstance]:
        if self.dataset.splits.get(self.split):
            return self.dataset.split(self.split)
        return list(self.dataset.instances)


@dataclass(frozen=True)
class Prediction:
    instance_id: str
    dataset: str
    task: TaskKind
    prompt_hash: str
    raw_text: str | None
    parsed: ParsedAnswer | None
    error: str | None = None

    @property
    def label(self) -> Label | None:
        return self.parsed.label if self.parsed else None

    def to_json(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "dataset": self.dataset,
            "task": self.task.value,
            "prompt_hash": self.prompt_hash,
            "raw_text": self.raw_text,
            "parsed_label": self.parsed.label.value if self.parsed else None,
            "confidence_source": self.parsed.confidence_source if self.parsed else None,
            "error": self.error,
        }


def write_jsonl(records: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r, ensure_ascii=False) + "\n" for r in records), encoding="utf-8")
    return path


def read_jsonl(path: str | Path) -> list[dict]:
    text = Path(path).read_text(encoding="utf-8")
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def build_run_prompts(spec: RunSpec) -> list[tuple[LabeledInstance, PromptBundle]]:
    """The prompt for every instance the run will send, in instance order."""
    task = spec.task
    if task not in (TaskKind.ED, TaskKind.DI, TaskKind.SM, TaskKind.EM):
        raise ValueError(f"run_task handles ED/DI/SM/EM; use run_cta/run_ave for {task.value}")
    ds = spec.dataset.descriptor
    registry = spec.registry or default_registry()
    knowledge = registry.resolve(task, ds.id, spec.dataset_knowledge, spec.policy)
    fewshot = load_fewshot(ds.id, spec.fewshot_dir)[: spec.shots] if spec.shots else None
    return [
        (item, build_prompt(item, knowledge, spec.mode, fewshot, params=ds.prompt))
        for item in spec.instances()
    ]


def gold_records(pairs: Sequence[tuple[LabeledInstance, PromptBundle]], dataset: str) -> list[dict]:
    return [
        {
            "instance_id": item.uid,
            "dataset": dataset,
            "task": item.task.value,
            "gold": item.gold.value if item.gold else None,
            "prompt_hash": prompt_hash(bundle.render()),
        }
        for item, bundle in pairs
    ]


def rule_oracle(pairs: Sequence[tuple[LabeledInstance, PromptBundle]]) -> RuleOracle:
    """A perfect-model oracle for the given prompts."""
    return RuleOracle(by_hash={prompt_hash(b.render()): item.gold.render() for item, b in pairs if item.gold})


def run_task(spec: RunSpec, client: ChatClient | None = None) -> list[Prediction]:
    """One prediction per instance; failures are recorded on the prediction, not raised."""
    if client is None:
        if spec.profile is None:
            raise ValueError("run_task needs a client or an endpoint profile")
        client = ChatClient(spec.profile)
    pairs = build_run_prompts(spec)
    requests = [
        CompletionRequest(b.system, b.user_text(), prefix=b.prefix(), key=item.uid) for item, b in pairs
    ]
    results = client.complete_grouped(requests)

    ds = spec.dataset.descriptor.id
    preds = []
    for (item, bundle), res in zip(pairs, results):
        h = prompt_hash(bundle.render())
        if isinstance(res, Exception):
            preds.append(Prediction(item.uid, ds, spec.task, h, None, None, f"{type(res).__name__}: {res}"))
            continue
        try:
            parsed = parse_for_task(spec.task, res.text)
            preds.append(Prediction(item.uid, ds, spec.task, h, res.text, parsed))
        except ParseFailure as exc:
            preds.append(Prediction(item.uid, ds, spec.task, h, res.text, None, f"{type(exc).__name__}: {exc}"))
    failed = sum(1 for p in preds if p.error)
    fuzzy = sum(1 for p in preds if p.parsed and p.parsed.confidence_source == "fuzzy")
    log.info("%s: %d predictions, %d failed, %d fuzzy parses", ds, len(preds), failed, fuzzy)
    if spec.output is not None:
        write_jsonl([p.to_json() for p in preds], spec.output)
    return preds


# -- column type annotation -------------------------------------------------


@dataclass(frozen=True)
class CtaSpec:
    table: tuple[RecordInstance, ...]  # one column sample per entry
    candidate_domains: tuple[str, ...]
    # either one list for every domain or a domain -> types mapping
    candidate_types: tuple[str, ...] | Mapping[str, Sequence[str]]
    samples_per_column: int = 5

    def __post_init__(self) -> None:
        if not self.candidate_domains:
            raise ValueError("candidate domains must not be empty")
        if not self.all_types():
            raise ValueError("candidate types must not be empty")
        if self.samples_per_column < 1:
            raise ValueError("samples_per_column must be >= 1")

    def all_types(self) -> list[str]:
        if isinstance(self.candidate_types, Mapping):
            out: list[str] = []
            for types in self.candidate_types.values():
                out += [t for t in types if t not in out]
            return out
        return list(self.candidate_types)

    def types_for(self, domain: str | None) -> list[str]:
        if domain is not None and isinstance(self.candidate_types, Mapping):
            for key, types in self.candidate_types.items():
                if key.casefold() == domain.casefold():
                    return list(types)
        return self.all_types()

    def column_values(self, index: int) -> list[str]:
        return [render_value(v) for _, v in self.table[index].attributes][: self.samples_per_column]


def _either(options: Sequence[str]) -> str:
    options = list(options)
    if len(options) == 1:
        return options[0]
    return ", ".join(options[:-1]) + " or " + options[-1]


def _steps(kind: str, options: Sequence[str], answer: str) -> list[str]:
    return [
        "Solve the task step by step:",
        f"1. Look at the input and make a {kind} out of it.",
        "2. Look at the cell values in detail.",
        f"3. Decide if the {kind} describes {_either(options)}.",
        f"4. Answer with the {answer}.",
    ]


def cta_domain_prompt(spec: CtaSpec, cot: bool) -> tuple[str, str]:
    rows = max(len(spec.column_values(i)) for i in range(len(spec.table)))
    lines = []
    for r in range(rows):
        cells = [vals[r] if r < len(vals) else "" for vals in (spec.column_values(i) for i in range(len(spec.table)))]
        lines.append(" || ".join(cells))
    user = [
        "Your task is to classify the domain of a table. Columns are separated by \"||\" and each row is on its own line.",
        "Table:",
        *lines,
        f"Candidate domains: {', '.join(spec.candidate_domains)}.",
    ]
    if cot:
        user += _steps("table", spec.candidate_domains, "domain")
    user.append('Finish your response with a separate line of the form "Final answer: <domain>".')
    return SYSTEM_MESSAGE, "\n".join(user)


def cta_column_prompt(spec: CtaSpec, index: int, domain: str | None, cot: bool) -> tuple[str, str]:
    types = spec.types_for(domain)
    intro = "Your task is to classify the type of a table column"
    intro += f" from a table about {domain}." if domain else "."
    user = [
        intro,
        f"Column values: {', '.join(spec.column_values(index))}",
        f"Candidate types: {', '.join(types)}.",
    ]
    if cot:
        user += _steps("column", types, "type")
    user.append('Finish your response with a separate line of the form "Final answer: <type>".')
    return SYSTEM_MESSAGE, "\n".join(user)


@dataclass
class CtaResult:
    domain: str | None
    columns: list[Label | None]  # None = abstained (reply named no candidate)
    raw: list[str] = field(default_factory=list)
    requests: int = 0


def run_cta(spec: CtaSpec, client: ChatClient, two_stage: bool = True, cot: bool = True) -> CtaResult:
    """Annotate every column; the four (stages × step-by-step) combinations are all supported."""
    raw: list[str] = []
    sent = 0
    domain = None
    if two_stage:
        system, user = cta_domain_prompt(spec, cot)
        (res,) = client.complete_many([CompletionRequest(system, user, key="domain")])
        sent += 1
        if isinstance(res, Exception):
            raise StageFailure(1, None, str(res))
        raw.append(res.text)
        try:
            domain = parse_cta(res.text, list(spec.candidate_domains)).label.value
        except ParseFailure as exc:
            raise StageFailure(1, None, str(exc)) from None

    requests = []
    for i in range(len(spec.table)):
        system, user = cta_column_prompt(spec, i, domain, cot)
        requests.append(CompletionRequest(system, user, key=f"column-{i}"))
    results = client.complete_many(requests)
    sent += len(requests)

    columns: list[Label | None] = []
    for i, res in enumerate(results):
        if isinstance(res, Exception):
            raise StageFailure(2 if two_stage else 1, i, str(res))
        raw.append(res.text)
        try:
            columns.append(parse_cta(res.text, spec.types_for(domain)).label)
        except ParseFailure:
            log.info("column %d: no candidate type in reply, abstaining", i)
            columns.append(None)
    return CtaResult(domain, columns, raw, sent)


# -- attribute value extraction ---------------------------------------------


def ave_prompt(description: RecordInstance, attribute: str, entity: str = "product") -> tuple[str, str]:
    text = " ".join(render_value(v) for _, v in description.attributes)
    user = "\n".join([
        f"Your task is to extract the value of an attribute from the text description of a {entity}.",
        f"Description: {text}",
        f"Attribute: {attribute}",
        f'What is the value of the attribute "{attribute}" in the description? '
        'If the attribute cannot be extracted from the description, answer "N/A".',
        "Answer with the value only.",
    ])
    return SYSTEM_MESSAGE, user


def run_ave(description: RecordInstance, attributes: Sequence[str], client: ChatClient,
            entity: str = "product") -> dict[str, Label]:
    """One request per attribute; "N/A" means the value is not in the text."""
    if not attributes:
        return {}
    requests = [CompletionRequest(*ave_prompt(description, a, entity), key=a) for a in attributes]
    out = {}
    for attr, res in zip(attributes, client.complete_many(requests)):
        if isinstance(res, Exception):
            raise res
        out[attr] = parse_ave(res.text).label
    return out


# -- head-to-head judging ---------------------------------------------------

JUDGE_SYSTEM = "You are a fair and careful judge of answers written by AI assistants."
_WINNER = re.compile(r"winner\W{0,4}\s*model\s*([12])", re.IGNORECASE)


@dataclass(frozen=True)
class JudgeCase:
    case_id: str
    question: str
    answer_a: str
    answer_b: str
    dataset: str = ""


@dataclass(frozen=True)
class Verdict:
    case_id: str
    dataset: str
    winner: str  # "A" or "B"
    a_position: int  # 1 or 2: where answer A was shown
    rationale: str = ""

    def to_json(self) -> dict:
        return {"case_id": self.case_id, "dataset": self.dataset, "winner": self.winner,
                "a_position": self.a_position}


def judge_prompt(question: str, first: str, second: str) -> tuple[str, str]:
    user = "\n".join([
        "Two models answered the question below. Decide which answer is better.",
        "Compare them on faithfulness to the instruction, justification, clarity and completeness, "
        "and the conclusion. Discuss each aspect for both models, then finish with a line "
        '"Winner: Model 1" or "Winner: Model 2".',
        "### Question:",
        question,
        "### Model 1:",
        first,
        "### Model 2:",
        second,
    ])
    return JUDGE_SYSTEM, user


def a_position_for(case_id: str, seed: int) -> int:
    """Seeded, per-case position of answer A (1 or 2)."""
    return 1 if random.Random(f"{seed}-{case_id}").random() < 0.5 else 2


def parse_verdict(text: str) -> int:
    hits = _WINNER.findall(text)
    if not hits:
        raise UnparseableVerdict("no 'Winner: Model N' line")
    return int(hits[-1])


def _judge_request(case: JudgeCase, a_position: int) -> CompletionRequest:
    if not case.answer_a.strip() or not case.answer_b.strip():
        raise ValueError(f"{case.case_id}: both answers must be non-empty")
    first, second = (case.answer_a, case.answer_b) if a_position == 1 else (case.answer_b, case.answer_a)
    return CompletionRequest(*judge_prompt(case.question, first, second), key=case.case_id)


def _verdict(case: JudgeCase, a_position: int, text: str) -> Verdict:
    model = parse_verdict(text)
    return Verdict(case.case_id, case.dataset, "A" if model == a_position else "B", a_position, text)


def judge_pair(case: JudgeCase, client: ChatClient, seed: int = 0, a_position: int | None = None) -> Verdict:
    pos = a_position or a_position_for(case.case_id, seed)
    res = client.complete(_judge_request(case, pos))
    return _verdict(case, pos, res.text)


def judge_many(cases: Sequence[JudgeCase], client: ChatClient, seed: int = 0) -> list:
    """Verdicts in case order; an unparseable or failed case yields its exception."""
    positions = [a_position_for(c.case_id, seed) for c in cases]
    results = client.complete_many([_judge_request(c, p) for c, p in zip(cases, positions)])
    out = []
    for case, pos, res in zip(cases, positions, results):
        if isinstance(res, Exception):
            out.append(res)
            continue
        try:
            out.append(_verdict(case, pos, res.text))
        except UnparseableVerdict as exc:
            out.append(exc)
    return out


def winning_rate(wins: int, total: int) -> float:
    """Wins per hundred, truncated (not rounded) to two decimals."""
    return (wins * 10_000 // total) / 100


@dataclass
class JudgeReport:
    per_dataset: dict[str, tuple[int, int]]  # dataset -> (A wins, B wins)

    @property
    def totals(self) -> tuple[int, int]:
        return (sum(a for a, _ in self.per_dataset.values()), sum(b for _, b in self.per_dataset.values()))

    @property
    def rates(self) -> tuple[float, float] | None:
        a, b = self.totals
        if a + b == 0:
            return None
        return winning_rate(a, a + b), winning_rate(b, a + b)

    def render(self, name_a: str = "A", name_b: str = "B") -> str:
        def cells(a, b, fmt):
            return f"{fmt(a) + ('*' if a > b else ' '):>12}{fmt(b) + ('*' if b > a else ' '):>12}"

        lines = [f"{'dataset':<22}{name_a:>12}{name_b:>12}"]
        for ds, (a, b) in self.per_dataset.items():
            lines.append(f"{ds:<22}" + cells(a, b, str))
        a, b = self.totals
        lines.append(f"{'Total':<22}" + cells(a, b, str))
        if self.rates:
            ra, rb = self.rates
            lines.append(f"{'Winning Rate':<22}" + cells(ra, rb, lambda x: f"{x:.2f}%"))
        return "\n".join(lines)


def aggregate_judgments(verdicts: Sequence[Verdict]) -> JudgeReport:
    per: dict[str, list[int]] = {}
    for v in verdicts:
        counts = per.setdefault(v.dataset, [0, 0])
        counts[0 if v.winner == "A" else 1] += 1
    return JudgeReport({ds: (a, b) for ds, (a, b) in per.items()})
