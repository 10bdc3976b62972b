"""Domain types shared by every stage: tasks, records, labels, missing values."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Union

DEFAULT_MISSING_SPELLINGS = frozenset({"nan", "n/a", "na", ""})
MISSING_RENDERING = "nan"


class DPError(Exception):
    """Base class for errors raised by this package."""


class InvalidInstance(DPError):
    pass


class TaskKind(str, enum.Enum):
    ED = "ED"
    DI = "DI"
    SM = "SM"
    EM = "EM"
    CTA = "CTA"
    AVE = "AVE"

    @classmethod
    def parse(cls, text: str) -> "TaskKind":
        try:
            return cls(text.strip().upper())
        except ValueError:
            raise ValueError(f"unknown task {text!r}") from None

    @property
    def is_binary(self) -> bool:
        return self in (TaskKind.ED, TaskKind.SM, TaskKind.EM)

    @property
    def is_pair(self) -> bool:
        return self in (TaskKind.SM, TaskKind.EM)

    @property
    def has_target(self) -> bool:
        return self in (TaskKind.ED, TaskKind.DI)


class _MissingType:
    """Singleton marker for an absent cell value."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "Missing"

    def __reduce__(self):
        return (_MissingType, ())


Missing = _MissingType()

# A cell is either its raw text or the Missing marker.
AttributeValue = Union[str, _MissingType]


def is_missing(value: AttributeValue) -> bool:
    return value is Missing


def normalize_value(raw: str | None, missing: Iterable[str] = DEFAULT_MISSING_SPELLINGS) -> AttributeValue:
    """Map the usual missing-value spellings to ``Missing``; trim everything else.

    >>> normalize_value("  N/A ")
    Missing
    >>> normalize_value("indian")
    'indian'
    """
    if raw is None:
        return Missing
    trimmed = raw.strip()
    if trimmed.casefold() in missing:
        return Missing
    return trimmed


def render_value(value: AttributeValue) -> str:
    return MISSING_RENDERING if value is Missing else value


class Role(str, enum.Enum):
    SINGLE = "single-record"
    PAIR = "pair"
    COLUMN = "column-sample"
    TEXT = "text-description"


Attributes = tuple[tuple[str, AttributeValue], ...]


def _check_unique(names: list[str], side: str) -> None:
    seen = set()
    for name in names:
        if name in seen:
            raise InvalidInstance(f"duplicate attribute {name!r} in {side} record")
        seen.add(name)


@dataclass(frozen=True)
class RecordInstance:
    """One row, pair of rows, column sample or text description.

    Attribute order is insertion order and is what the prompt shows. For
    pairs, ``right`` holds the second record; names only need to be unique
    within one side.
    """

    attributes: Attributes
    role: Role = Role.SINGLE
    right: Attributes | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "attributes", tuple((str(n), v) for n, v in self.attributes))
        if self.right is not None:
            object.__setattr__(self, "right", tuple((str(n), v) for n, v in self.right))
        _check_unique([n for n, _ in self.attributes], "left")
        if self.role is Role.PAIR:
            if self.right is None:
                raise InvalidInstance("pair instance needs a right-hand record")
            _check_unique([n for n, _ in self.right], "right")
        elif self.right is not None:
            raise InvalidInstance(f"{self.role.value} instance cannot carry a right-hand record")

    @classmethod
    def from_pairs(cls, pairs, role: Role = Role.SINGLE, right=None) -> "RecordInstance":
        return cls(tuple(pairs), role, tuple(right) if right is not None else None)

    def get(self, name: str, default=None):
        for n, v in self.attributes:
            if n == name:
                return v
        return default

    def names(self) -> list[str]:
        return [n for n, _ in self.attributes]

    def without(self, name: str) -> "RecordInstance":
        return RecordInstance(tuple((n, v) for n, v in self.attributes if n != name), self.role, self.right)


class Binary(str, enum.Enum):
    YES = "Yes"
    NO = "No"


@dataclass(frozen=True)
class Label:
    """Gold or predicted answer. ``kind`` is one of binary, value, category."""

    kind: str
    value: str

    @classmethod
    def yes(cls) -> "Label":
        return cls("binary", Binary.YES.value)

    @classmethod
    def no(cls) -> "Label":
        return cls("binary", Binary.NO.value)

    @classmethod
    def binary(cls, flag: bool) -> "Label":
        return cls.yes() if flag else cls.no()

    @classmethod
    def of_value(cls, text: str) -> "Label":
        return cls("value", text)

    @classmethod
    def category(cls, text: str) -> "Label":
        return cls("category", text)

    @property
    def is_yes(self) -> bool:
        return self.kind == "binary" and self.value == Binary.YES.value

    def render(self) -> str:
        return self.value

    def to_json(self) -> dict:
        return {"kind": self.kind, "value": self.value}

    @classmethod
    def from_json(cls, data: dict) -> "Label":
        return cls(data["kind"], data["value"])


def label_for_task(task: TaskKind, text: str) -> Label:
    """Build the gold label a task expects from a raw label cell."""
    if task.is_binary:
        folded = text.strip().casefold()
        if folded in ("yes", "y", "1", "true"):
            return Label.yes()
        if folded in ("no", "n", "0", "false"):
            return Label.no()
        raise InvalidInstance(f"{task.value} label must be yes/no, got {text!r}")
    if task is TaskKind.CTA:
        return Label.category(text.strip())
    if task is TaskKind.AVE and text.strip().strip("\"'").casefold() in ("n/a", ""):
        return Label.of_value("N/A")
    return Label.of_value(text.strip())


@dataclass(frozen=True)
class LabeledInstance:
    instance: RecordInstance
    task: TaskKind
    gold: Label | None = None
    target_attribute: str | None = None
    uid: str = ""
    meta: dict = field(default_factory=dict, compare=False, hash=False)

    @property
    def target_value(self) -> AttributeValue | None:
        if self.target_attribute is None:
            return None
        return self.instance.get(self.target_attribute)


_LABEL_KINDS = {
    TaskKind.ED: "binary",
    TaskKind.SM: "binary",
    TaskKind.EM: "binary",
    TaskKind.DI: "value",
    TaskKind.AVE: "value",
    TaskKind.CTA: "category",
}


def validate_labeled(item: LabeledInstance) -> LabeledInstance:
    """Return ``item`` unchanged if it satisfies the per-task invariants."""
    task = item.task
    if task.has_target and not item.target_attribute:
        raise InvalidInstance(f"{task.value} instance needs a target attribute")
    if not task.has_target and item.target_attribute is not None:
        raise InvalidInstance(f"{task.value} instance cannot carry a target attribute")
    if task.is_pair and item.instance.role is not Role.PAIR:
        raise InvalidInstance(f"{task.value} instance must be a pair")
    if not task.is_pair and item.instance.role is Role.PAIR:
        raise InvalidInstance(f"{task.value} instance cannot be a pair")
    if task is TaskKind.ED and item.target_attribute not in item.instance.names():
        raise InvalidInstance(f"target {item.target_attribute!r} not among record attributes")
    if item.gold is not None:
        expected = _LABEL_KINDS[task]
        if item.gold.kind != expected:
            raise InvalidInstance(f"{task.value} expects a {expected} label, got {item.gold.kind}")
        if expected == "binary" and item.gold.value not in (Binary.YES.value, Binary.NO.value):
            raise InvalidInstance(f"bad binary label {item.gold.value!r}")
    return item
