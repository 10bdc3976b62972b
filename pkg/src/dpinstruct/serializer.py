"""Prompt rendering for the four tuned tasks.

A prompt is six sections joined by single newlines: system message, task
description, injected knowledge (one rule per line, omitted when empty),
instance content, question, output format. Few-shot examples sit between
the knowledge and the live instance; the hinted teacher prompt appends extra
knowledge and a hint after the output format.
"""

from __future__ import annotations

import enum
import hashlib
import re
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

from .core import (
    AttributeValue,
    DPError,
    LabeledInstance,
    RecordInstance,
    TaskKind,
    normalize_value,
    render_value,
)

SYSTEM_MESSAGE = (
    "You are an AI assistant that follows instruction extremely well. "
    "User will give you a question. Your task is to answer as faithfully as you can."
)
REASONING_INSTRUCTION = "While answering, provide detailed explanation and justify your answer."
FINAL_LINE_INSTRUCTION = (
    "After your reasoning, finish your response in a separate line with and ONLY with your final answer."
)
BINARY_FORMAT = "Choose your answer from: [Yes, No]"
BINARY_FINAL_FORMAT = "Choose your final answer from [Yes, No]."
HINT_PREAMBLE = 'You can use the "Hint" below, but your response cannot contain any information from it.'
HINT_MARKER = "Hint:"
INSTRUCTION_TAG = "### Instruction:"
RESPONSE_TAG = "### Response:"
DEFAULT_MAX_SHOTS = 3

SM_TASK = (
    "Your task is to determine if the two attributes (columns) are semantically equivalent in the "
    "context of merging two tables. Each attribute will be described by its name and a brief "
    "description. Your goal is to assess if they refer to the same information based on these "
    "names and descriptions provided."
)


class UnsupportedMode(DPError):
    pass


class MissingGold(DPError):
    pass


class PromptTooLong(DPError):
    pass


class Mode(str, enum.Enum):
    TASK = "task"
    REASONING = "reasoning"
    HINTED = "reasoning-groundtruth"


@dataclass(frozen=True)
class FewShotExample:
    instance_block: str
    question: str
    output_format: str
    response: str

    def render(self) -> str:
        return "\n".join(
            [INSTRUCTION_TAG, self.instance_block, self.question, self.output_format, RESPONSE_TAG, self.response]
        )

    @classmethod
    def from_json(cls, data: dict) -> "FewShotExample":
        return cls(data["instance_block"], data["question"], data["output_format"], data["response"])

    def to_json(self) -> dict:
        return {
            "instance_block": self.instance_block,
            "question": self.question,
            "output_format": self.output_format,
            "response": self.response,
        }


@dataclass(frozen=True)
class PromptBundle:
    system: str
    task_description: str
    knowledge: tuple[str, ...]
    instance_block: str
    question: str
    output_format: str
    mode: Mode = Mode.TASK
    fewshot_block: str | None = None
    extra_knowledge: tuple[str, ...] = ()
    hint: str | None = None

    def prefix(self) -> str:
        """System message, task description and knowledge: the part a batch shares."""
        return "\n".join([self.system, self.task_description, *self.knowledge])

    def sections(self) -> list[str]:
        parts = [self.system, self.task_description, *self.knowledge]
        if self.fewshot_block:
            parts.append(self.fewshot_block)
        parts += [self.instance_block, self.question, self.output_format]
        parts += list(self.extra_knowledge)
        if self.hint is not None:
            parts += [HINT_PREAMBLE, f'{HINT_MARKER} the final answer is "{self.hint}"']
        if self.fewshot_block:
            parts.append(RESPONSE_TAG)
        return parts

    def render(self) -> str:
        return "\n".join(self.sections())

    def user_text(self) -> str:
        """Everything after the system message."""
        return "\n".join(self.sections()[1:])

    def student_view(self) -> "PromptBundle":
        """The same prompt with teacher-only material removed."""
        mode = Mode.REASONING if self.mode is Mode.HINTED else self.mode
        return replace(self, extra_knowledge=(), hint=None, mode=mode)


def prompt_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


# -- record serialization ---------------------------------------------------


def serialize_attributes(attributes: Iterable[tuple[str, AttributeValue]]) -> str:
    return "[" + ", ".join(f'{name}: "{render_value(value)}"' for name, value in attributes) + "]"


def serialize_record(instance: RecordInstance | Sequence, heading: str, sep: str = ": ") -> str:
    """``<heading>: [name: "value", ...]`` in insertion order; Missing shows as "nan"."""
    attrs = instance.attributes if isinstance(instance, RecordInstance) else instance
    if not attrs:
        raise ValueError("cannot serialize an empty record")
    return f"{heading}{sep}{serialize_attributes(attrs)}"


_FIELD = re.compile(r'\s*([^":,\[\]\n]+?): "')
_NEXT = re.compile(r'", (?=[^":,\[\]\n]+?: ")|"\]\.?$')


def parse_record(text: str) -> tuple[str, list[tuple[str, AttributeValue]]]:
    """Read a serialized record back into (heading, attributes).

    Values are not escaped when rendered, so a value that itself contains
    ``", name: "`` cannot be recovered.
    """
    open_at = text.index("[")
    heading = text[:open_at].rstrip().rstrip(":").rstrip()
    body = text[open_at + 1:]
    out = []
    pos = 0
    while pos < len(body):
        m = _FIELD.match(body, pos)
        if not m:
            raise ValueError(f"malformed record near {body[pos:pos + 20]!r}")
        name = m.group(1)
        start = m.end()
        end = _NEXT.search(body, start)
        if not end:
            raise ValueError("unterminated value")
        out.append((name, normalize_value(body[start:end.start()])))
        pos = end.end()
    return heading, out


# -- task templates ---------------------------------------------------------


def natural_join(items: Sequence[str]) -> str:
    items = list(items)
    if len(items) <= 1:
        return "".join(items)
    if len(items) == 2:
        return f"{items[0]} and {items[1]}"
    return ", ".join(items[:-1]) + ", and " + items[-1]


@dataclass(frozen=True)
class _TaskText:
    task_description: str
    instance_block: str
    question: str
    output_format: str
    final_format: str


def _ed_text(item: LabeledInstance, params: dict) -> _TaskText:
    rec = item.instance
    target = item.target_attribute
    phrase = params.get("attribute_phrase") or natural_join(rec.names())
    task = (
        "Your task is to determine if there is an error in the value of a specific attribute within "
        f"the whole record provided. The attributes may include {phrase}."
    )
    block = "\n".join([
        serialize_record(rec, "Record", sep=" "),
        f"Attribute for Verification: {serialize_attributes([(target, rec.get(target))])}",
    ])
    question = f'Is there an error in the value of the "{target}" attribute?'
    return _TaskText(task, block, question, BINARY_FORMAT, BINARY_FINAL_FORMAT)


def _di_text(item: LabeledInstance, params: dict) -> _TaskText:
    target = item.target_attribute
    rec = item.instance.without(target)
    entity = params.get("entity", "data")
    phrase = params.get("target_phrase", target)
    display = params.get("target_display", target)
    fields = params.get("field_phrase") or natural_join([f"'{n}'" for n in rec.names()])
    task = (
        f"You are presented with a {entity} record that is missing a specific attribute: the {phrase}. "
        f"Your task is to deduce or infer the {phrase} of the {entity} using the available information "
        f"in the record. You may be provided with fields like {fields} to help you in the inference."
    )
    block = serialize_record(rec, "Record") + "."
    question = (
        f"Based on the provided {entity} record, what would you infer is the value for the missing "
        f'attribute "{display}"?'
    )
    fmt = f"Answer the name of the {phrase}."
    return _TaskText(task, block, question, fmt, fmt)


def _sm_text(item: LabeledInstance, params: dict) -> _TaskText:
    rec = item.instance
    block = "\n".join([
        serialize_record(rec.attributes, "Attribute A is", sep=" ") + ".",
        serialize_record(rec.right, "Attribute B is", sep=" ") + ".",
    ])
    question = "Are Attribute A and Attribute B semantically equivalent?"
    return _TaskText(params.get("task_description", SM_TASK), block, question, BINARY_FORMAT, BINARY_FINAL_FORMAT)


def _em_text(item: LabeledInstance, params: dict) -> _TaskText:
    rec = item.instance
    entity = params.get("entity", "Product")
    task = (
        f"You are tasked with determining whether two {entity}s listed below are the same based on the "
        "information provided. Carefully compare all the attributes before making your decision."
    )
    block = "\n".join([
        serialize_record(rec.attributes, f"{entity} A"),
        serialize_record(rec.right, f"{entity} B"),
    ])
    question = f"Are {entity} A and {entity} B the same {entity}?"
    return _TaskText(task, block, question, BINARY_FORMAT, BINARY_FINAL_FORMAT)


_BUILDERS = {TaskKind.ED: _ed_text, TaskKind.DI: _di_text, TaskKind.SM: _sm_text, TaskKind.EM: _em_text}


def _rule_texts(knowledge) -> tuple[str, ...]:
    return tuple(k if isinstance(k, str) else k.text for k in knowledge)


def build_prompt(
    item: LabeledInstance,
    knowledge=(),
    mode: Mode = Mode.TASK,
    fewshot: Sequence[FewShotExample] | None = None,
    params: dict | None = None,
    max_shots: int = DEFAULT_MAX_SHOTS,
) -> PromptBundle:
    """Assemble the prompt for one ED/DI/SM/EM instance.

    ``knowledge`` takes resolved rules or plain sentences. ``params`` fills
    dataset wording slots (entity noun, attribute phrases); see the registry.
    """
    if item.task not in _BUILDERS:
        raise UnsupportedMode(f"{item.task.value} prompts are built by the pipelines module")
    if mode is Mode.HINTED:
        raise UnsupportedMode("use build_hinted_groundtruth_prompt for teacher prompts")
    text = _BUILDERS[item.task](item, params or {})
    system = SYSTEM_MESSAGE
    output_format = text.output_format
    if mode is Mode.REASONING:
        system = f"{SYSTEM_MESSAGE} {REASONING_INSTRUCTION}"
        output_format = f"{FINAL_LINE_INSTRUCTION} {text.final_format}"
    block = render_fewshot_block(fewshot or (), max_shots=max_shots) or None
    return PromptBundle(
        system=system,
        task_description=text.task_description,
        knowledge=_rule_texts(knowledge),
        instance_block=text.instance_block,
        question=text.question,
        output_format=output_format,
        mode=mode,
        fewshot_block=block,
    )


def build_hinted_groundtruth_prompt(
    item: LabeledInstance,
    knowledge=(),
    teacher_extra_knowledge=(),
    params: dict | None = None,
) -> PromptBundle:
    """Teacher prompt: the reasoning prompt plus extra knowledge and the gold answer as a hint."""
    if item.gold is None:
        raise MissingGold(item.uid or "instance without gold label")
    bundle = build_prompt(item, knowledge, Mode.REASONING, params=params)
    return replace(
        bundle,
        mode=Mode.HINTED,
        extra_knowledge=_rule_texts(teacher_extra_knowledge),
        hint=item.gold.render(),
    )


def fewshot_from_bundle(bundle: PromptBundle, response: str) -> FewShotExample:
    return FewShotExample(bundle.instance_block, bundle.question, bundle.output_format, response)


def render_fewshot_block(examples: Sequence[FewShotExample], max_shots: int = DEFAULT_MAX_SHOTS) -> str:
    """Concatenate example blocks; each ends with its ``### Response:`` answer.

    The open ``### Response:`` line for the live instance is added by the
    prompt itself, after the instance.
    """
    if len(examples) > max_shots:
        raise ValueError(f"{len(examples)} examples exceed the limit of {max_shots}")
    return "\n".join(ex.render() for ex in examples)


def check_length(text: str, max_chars: int) -> str:
    if len(text) > max_chars:
        raise PromptTooLong(f"prompt has {len(text)} characters, limit {max_chars}")
    return text


def apply_wrapper(user_text: str, wrapper: str | None) -> str:
    """Decorate the user turn for endpoints that expect e.g. ``[INST] {prompt} [/INST]``."""
    if not wrapper:
        return user_text
    return wrapper.replace("{prompt}", user_text)
