"""Registry of knowledge sentences injected into prompts.

Rules live at three scopes (general, per task, per dataset). Rules sharing a
``variant_group`` are mutually exclusive; the ED missing-value group is only
injected when a :class:`MissingPolicy` picks one of its members.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import yaml

from .core import DPError, TaskKind

_SCOPE_ORDER = {"general": 0, "task": 1, "dataset": 2}


class DuplicateRuleId(DPError):
    pass


class MissingPolicy(str, enum.Enum):
    IS_ERROR = "is-error"
    NOT_ERROR = "not-error"


MISSING_GROUP = "missing"


@dataclass(frozen=True)
class KnowledgeRule:
    id: str
    scope: str  # "general", "task", "dataset"
    text: str
    rank: int = 0
    scope_key: str | None = None  # task value or dataset id
    variant_group: str | None = None
    tasks: tuple[TaskKind, ...] = ()
    default: bool = True
    policy: MissingPolicy | None = None

    def __post_init__(self) -> None:
        if self.scope not in _SCOPE_ORDER:
            raise ValueError(f"bad scope {self.scope!r}")
        if self.scope != "general" and not self.scope_key:
            raise ValueError(f"rule {self.id}: {self.scope} scope needs a key")
        if "\n" in self.text or self.text != self.text.strip():
            raise ValueError(f"rule {self.id}: text must be a single trimmed paragraph")

    @property
    def sort_key(self):
        return (_SCOPE_ORDER[self.scope], self.rank, self.id)

    def applies(self, task: TaskKind, dataset: str | None) -> bool:
        if self.scope == "general":
            return not self.tasks or task in self.tasks
        if self.scope == "task":
            return self.scope_key == task.value
        return dataset is not None and self.scope_key == dataset

    @classmethod
    def from_json(cls, data: dict) -> "KnowledgeRule":
        scope, _, key = str(data["scope"]).partition(":")
        if scope == "task":
            key = TaskKind.parse(key).value
        elif scope == "dataset":
            key = key.lower()
        return cls(
            id=data["id"],
            scope=scope,
            scope_key=key or None,
            text=str(data["text"]).strip(),
            rank=int(data.get("rank", 0)),
            variant_group=data.get("variant_group"),
            tasks=tuple(TaskKind.parse(t) for t in data.get("tasks", ())),
            default=bool(data.get("default", True)),
            policy=MissingPolicy(data["policy"]) if data.get("policy") else None,
        )

    def to_json(self) -> dict:
        out = {"id": self.id, "scope": self.scope if not self.scope_key else f"{self.scope}:{self.scope_key}",
               "rank": self.rank, "text": self.text}
        if self.tasks:
            out["tasks"] = [t.value for t in self.tasks]
        if self.variant_group:
            out["variant_group"] = self.variant_group
        if not self.default:
            out["default"] = False
        if self.policy:
            out["policy"] = self.policy.value
        return out


class KnowledgeRegistry:
    def __init__(self, rules=()):
        self._rules: dict[str, KnowledgeRule] = {}
        for rule in rules:
            self.register(rule)

    def register(self, rule: KnowledgeRule) -> "KnowledgeRegistry":
        if rule.id in self._rules:
            raise DuplicateRuleId(rule.id)
        self._rules[rule.id] = rule
        return self

    def get(self, rule_id: str) -> KnowledgeRule:
        return self._rules[rule_id]

    def __contains__(self, rule_id: str) -> bool:
        return rule_id in self._rules

    def __len__(self) -> int:
        return len(self._rules)

    def rules(self) -> list[KnowledgeRule]:
        return sorted(self._rules.values(), key=lambda r: r.sort_key)

    def dataset_rules(self, dataset: str) -> list[KnowledgeRule]:
        return [r for r in self.rules() if r.scope == "dataset" and r.scope_key == dataset]

    def resolve(
        self,
        task: TaskKind,
        dataset: str | None = None,
        include_dataset_specific: bool = False,
        policy: MissingPolicy | None = None,
        variants: dict[str, str] | None = None,
    ) -> list[KnowledgeRule]:
        """Ordered rules for a task/dataset.

        ``variants`` maps a group name to the rule id to use for it. Otherwise
        the missing-value group follows ``policy`` (omitted when None) and any
        other group keeps its most specific, lowest-ranked default member.
        """
        variants = variants or {}
        dataset = dataset.lower() if dataset else None
        candidates = [
            r for r in self._rules.values()
            if r.applies(task, dataset) and (include_dataset_specific or r.scope != "dataset")
        ]

        chosen: list[KnowledgeRule] = []
        groups: dict[str, list[KnowledgeRule]] = {}
        for rule in candidates:
            if rule.variant_group is None:
                chosen.append(rule)
            else:
                groups.setdefault(rule.variant_group, []).append(rule)

        for group, members in groups.items():
            pick = None
            if group in variants:
                pick = next((r for r in members if r.id == variants[group]), None)
            elif group == MISSING_GROUP and policy is not None:
                pick = next((r for r in members if r.policy == policy), None)
            else:
                defaults = [r for r in members if r.default]
                if defaults:
                    pick = min(defaults, key=lambda r: (-_SCOPE_ORDER[r.scope], r.rank, r.id))
            if pick is not None:
                chosen.append(pick)

        return sorted(chosen, key=lambda r: r.sort_key)

    def to_yaml(self) -> str:
        return yaml.safe_dump([r.to_json() for r in self.rules()], sort_keys=False, allow_unicode=True)

    @classmethod
    def from_yaml(cls, text: str) -> "KnowledgeRegistry":
        return cls(KnowledgeRule.from_json(item) for item in yaml.safe_load(text) or [])

    @classmethod
    def load(cls, path: str | Path) -> "KnowledgeRegistry":
        return cls.from_yaml(Path(path).read_text(encoding="utf-8"))


def default_registry() -> KnowledgeRegistry:
    """A fresh registry holding the shipped rules."""
    text = resources.files("dpinstruct.data").joinpath("knowledge.yaml").read_text(encoding="utf-8")
    return KnowledgeRegistry.from_yaml(text)


def resolve_knowledge(task, dataset, include_dataset_specific=False, policy=None, registry=None):
    return (registry or default_registry()).resolve(task, dataset, include_dataset_specific, policy)


def feature_selection_rule(dataset: str, attributes: list[str], rank: int = 100) -> KnowledgeRule:
    """Dataset rule that tells the model which attributes to look at."""
    if len(attributes) == 1:
        names = attributes[0]
    else:
        names = " and ".join([", ".join(attributes[:-1]), attributes[-1]])
    return KnowledgeRule(
        id=f"{dataset}.feature-selection",
        scope="dataset",
        scope_key=dataset,
        rank=rank,
        text=f"You should only consider {names} and ignore other attributes.",
    )
