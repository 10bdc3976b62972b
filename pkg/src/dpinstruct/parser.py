"""Turn free-text completions into labels.

Every parse reports how it found the answer: ``exact`` (the whole reply is
the answer), ``final-line`` (a "Final answer:" line, or a one-line reply
that leads with the answer) or ``fuzzy`` (last yes/no anywhere). Callers
count fuzzy parses instead of trusting them silently.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .core import DPError, Label

EXACT = "exact"
FINAL_LINE = "final-line"
FUZZY = "fuzzy"

_RESPONSE_TAG = "### Response:"
_FINAL = re.compile(
    r"^[\s*#>_`-]*final\s+answer[\s*_`]*(?::|：|-|\bis\b)\s*(?P<rest>.*)$",
    re.IGNORECASE,
)
_YESNO = re.compile(r"\b(yes|no)\b", re.IGNORECASE)
_LEADING_YESNO = re.compile(r"^[\s\"'*`(\[]*(yes|no)\b", re.IGNORECASE)
_TRIM = " \t\r\n\"'`*“”‘’"

# Echo prefixes removed from value answers, tried in order.
VALUE_PREFIXES = [
    re.compile(p, re.IGNORECASE)
    for p in (
        r"^based on [^,]*,\s*",
        r"^i (?:would )?infer (?:that )?",
        r"^(?:the )?(?:final )?answer(?: is)?\s*[:\-]?\s+",
        r"^the value for the missing attribute \"?[^\"]*\"? (?:is|would be)\s+",
        r"^the (?:missing )?(?:value|attribute value) (?:is|would be)\s+",
        r"^the name of the \w+ (?:is|would be)\s+",
        r"^the \w+(?: \w+)? (?:is|would be)\s+",
        r"^it (?:is|would be)\s+",
    )
]


class ParseFailure(DPError):
    pass


class Unparseable(ParseFailure):
    pass


class NoFinalLine(ParseFailure):
    pass


class EmptyAnswer(ParseFailure):
    pass


class NoCandidateMatched(ParseFailure):
    pass


@dataclass(frozen=True)
class ParsedAnswer:
    label: Label
    confidence_source: str = EXACT
    reason: str | None = None


def _after_response_tag(text: str) -> str:
    idx = text.rfind(_RESPONSE_TAG)
    if idx >= 0:
        text = text[idx + len(_RESPONSE_TAG):]
    return text.strip()


def _find_final(lines: list[str]):
    for i in range(len(lines) - 1, -1, -1):
        m = _FINAL.match(lines[i])
        if m:
            return i, m.group("rest").strip()
    return None


def parse_final(text: str) -> tuple[str, str]:
    """Split a reasoning reply into (reason, final answer text).

    The split is at the last "Final answer:" line. A one-line reply without
    the marker is all answer; a multi-line reply without it is an error.
    """
    body = text.strip()
    lines = body.splitlines()
    hit = _find_final(lines)
    if hit is not None:
        i, rest = hit
        return "\n".join(lines[:i]).strip(), rest
    if len(lines) <= 1:
        return "", body
    raise NoFinalLine("no final-answer line in a multi-line reply")


def _bare_binary(text: str) -> Label | None:
    cleaned = text.strip(_TRIM + ".,!;:").casefold()
    if cleaned == "yes":
        return Label.yes()
    if cleaned == "no":
        return Label.no()
    return None


def _line_label(line: str) -> Label | None:
    m = _LEADING_YESNO.match(line)
    if m:
        return Label.binary(m.group(1).lower() == "yes")
    hits = _YESNO.findall(line)
    if hits:
        return Label.binary(hits[-1].lower() == "yes")
    return None


def parse_binary(text: str) -> ParsedAnswer:
    """Yes/No from a reply: bare answer, then final-answer line, then last yes/no token."""
    body = _after_response_tag(text)
    bare = _bare_binary(body)
    if bare is not None:
        return ParsedAnswer(bare, EXACT)

    lines = body.splitlines()
    hit = _find_final(lines)
    if hit is not None:
        label = _line_label(hit[1])
        if label is not None:
            return ParsedAnswer(label, FINAL_LINE, "\n".join(lines[:hit[0]]).strip())
    elif len(lines) == 1:
        label = _line_label(lines[0])
        if label is not None:
            return ParsedAnswer(label, FINAL_LINE)

    hits = _YESNO.findall(body)
    if hits:
        return ParsedAnswer(Label.binary(hits[-1].lower() == "yes"), FUZZY)
    raise Unparseable("no yes/no answer found")


def _answer_span(text: str) -> tuple[str, str, str | None]:
    """(span, confidence, reason) for value-style answers."""
    body = _after_response_tag(text)
    lines = [ln for ln in body.splitlines()]
    hit = _find_final(lines)
    if hit is not None:
        return hit[1], FINAL_LINE, "\n".join(lines[:hit[0]]).strip()
    non_empty = [ln for ln in lines if ln.strip()]
    if not non_empty:
        return "", EXACT, None
    if len(non_empty) == 1:
        return non_empty[0], EXACT, None
    return non_empty[0], FUZZY, None


def clean_value(span: str) -> str:
    value = span.strip(_TRIM)
    for pattern in VALUE_PREFIXES:
        value = pattern.sub("", value, count=1).strip(_TRIM)
    if value.endswith(".") and not value.endswith(".."):
        value = value[:-1]
    return value.strip(_TRIM)


def parse_value(text: str) -> ParsedAnswer:
    span, source, reason = _answer_span(text)
    value = clean_value(span)
    if not value:
        raise EmptyAnswer("empty answer")
    return ParsedAnswer(Label.of_value(value), source, reason)


def _is_na(text: str) -> bool:
    return text.strip(_TRIM + ".").casefold() in ("n/a", "na")


def parse_ave(text: str) -> ParsedAnswer:
    """Like :func:`parse_value`, but any spelling of "N/A" means "not extractable"."""
    span, source, reason = _answer_span(text)
    if _is_na(span) or _is_na(clean_value(span)):
        return ParsedAnswer(Label.of_value("N/A"), source, reason)
    value = clean_value(span)
    if not value:
        raise EmptyAnswer("empty answer")
    return ParsedAnswer(Label.of_value(value), source, reason)


def _last_candidate(text: str, candidates: list[str]) -> str | None:
    best = None  # (end, length, candidate)
    for cand in candidates:
        pattern = re.compile(r"(?<!\w)" + re.escape(cand.strip()) + r"(?!\w)", re.IGNORECASE)
        for m in pattern.finditer(text):
            key = (m.end(), len(cand))
            if best is None or key > best[:2]:
                best = (m.end(), len(cand), cand)
    return best[2] if best else None


def parse_cta(text: str, candidates: list[str]) -> ParsedAnswer:
    """The candidate named in the final line; the last mention wins on ties."""
    if not candidates:
        raise ValueError("candidate list is empty")
    body = _after_response_tag(text)
    lines = [ln for ln in body.splitlines() if ln.strip()]
    hit = _find_final(lines)
    if hit is not None:
        final, source = hit[1], FINAL_LINE
    elif lines:
        final, source = lines[-1], (EXACT if len(lines) == 1 else FINAL_LINE)
    else:
        raise NoCandidateMatched("empty reply")
    found = _last_candidate(final, candidates)
    if found is None:
        found, source = _last_candidate(body, candidates), FUZZY
    if found is None:
        raise NoCandidateMatched("reply names none of the candidates")
    return ParsedAnswer(Label.category(found), source)


def parse_for_task(task, text: str, candidates: list[str] | None = None) -> ParsedAnswer:
    from .core import TaskKind

    if task in (TaskKind.ED, TaskKind.SM, TaskKind.EM):
        return parse_binary(text)
    if task is TaskKind.DI:
        return parse_value(text)
    if task is TaskKind.AVE:
        return parse_ave(text)
    return parse_cta(text, candidates or [])
