"""Dataset loading, manifests, splits and the built-in dataset registry."""

from __future__ import annotations

import csv
import io
import json
import logging
import random
from dataclasses import dataclass, field, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path

import yaml

from .core import (
    DPError,
    LabeledInstance,
    RecordInstance,
    Role,
    TaskKind,
    label_for_task,
    normalize_value,
    render_value,
    validate_labeled,
)

log = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")


class ParseError(DPError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class LabelColumnMissing(DPError):
    pass


class UnknownDataset(DPError):
    pass


@dataclass(frozen=True)
class SplitProtocol:
    kind: str = "provided"  # "provided" or "seeded-fraction"
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("provided", "seeded-fraction"):
            raise ValueError(f"unknown split protocol {self.kind!r}")
        if self.kind == "seeded-fraction" and abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {self.fractions}")

    def to_json(self) -> dict:
        if self.kind == "provided":
            return {"kind": "provided"}
        return {"kind": self.kind, "fractions": list(self.fractions), "seed": self.seed}

    @classmethod
    def from_json(cls, data) -> "SplitProtocol":
        if data is None or data == "provided":
            return cls()
        return cls(data.get("kind", "provided"), tuple(data.get("fractions", (0.6, 0.2, 0.2))), int(data.get("seed", 0)))


@dataclass(frozen=True)
class DatasetDescriptor:
    id: str
    task: TaskKind
    domain_tag: str
    name: str = ""
    files: dict[str, str] = field(default_factory=dict)
    split_protocol: SplitProtocol = SplitProtocol()
    label_field: str = "label"
    target_field: str = "target_attribute"
    id_field: str = "id"
    pair_prefixes: tuple[str, str] = ("left_", "right_")
    delimiter: str = ","
    prompt: dict[str, str] = field(default_factory=dict)

    @property
    def display_name(self) -> str:
        return self.name or self.id

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "name": self.name,
            "task": self.task.value,
            "domain_tag": self.domain_tag,
            "files": dict(self.files),
            "split_protocol": self.split_protocol.to_json(),
            "label_field": self.label_field,
            "target_field": self.target_field,
            "id_field": self.id_field,
            "pair_prefixes": list(self.pair_prefixes),
            "delimiter": self.delimiter,
            "prompt": dict(self.prompt),
        }

    @classmethod
    def from_json(cls, data: dict) -> "DatasetDescriptor":
        known = None
        try:
            known = registry_lookup(data["id"])
        except UnknownDataset:
            pass
        prompt = dict(known.prompt) if known else {}
        prompt.update(data.get("prompt") or {})
        task = data.get("task") or (known.task.value if known else None)
        if task is None:
            raise ValueError(f"manifest for {data['id']!r} needs a task")
        return cls(
            id=str(data["id"]).lower(),
            task=TaskKind.parse(task),
            domain_tag=data.get("domain_tag") or (known.domain_tag if known else ""),
            name=data.get("name") or (known.name if known else ""),
            files={k: str(v) for k, v in (data.get("files") or {}).items()},
            split_protocol=SplitProtocol.from_json(data.get("split_protocol")),
            label_field=data.get("label_field", "label"),
            target_field=data.get("target_field", "target_attribute"),
            id_field=data.get("id_field", "id"),
            pair_prefixes=tuple(data.get("pair_prefixes", ("left_", "right_"))),
            delimiter=data.get("delimiter", ","),
            prompt=prompt,
        )


@dataclass
class Dataset:
    descriptor: DatasetDescriptor
    instances: list[LabeledInstance]
    # split name -> instance indexes, in row order
    splits: dict[str, list[int]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.instances)

    def split(self, name: str) -> list[LabeledInstance]:
        if name == "all":
            return list(self.instances)
        return [self.instances[i] for i in self.splits.get(name, [])]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.descriptor.id == other.descriptor.id
            and self.instances == other.instances
            and self.splits == other.splits
        )


# -- registry ---------------------------------------------------------------


@lru_cache(maxsize=None)
def _registry() -> dict[str, DatasetDescriptor]:
    text = resources.files("dpinstruct.data").joinpath("registry.yaml").read_text(encoding="utf-8")
    out = {}
    for entry in yaml.safe_load(text):
        out[entry["id"]] = DatasetDescriptor(
            id=entry["id"],
            task=TaskKind.parse(entry["task"]),
            domain_tag=entry["domain_tag"],
            name=entry.get("name", ""),
            prompt=dict(entry.get("prompt") or {}),
        )
    return out


def _canonical_id(name: str) -> str:
    return name.strip().lower().replace("_", "-").replace(" ", "-")


def registry_lookup(dataset_id: str) -> DatasetDescriptor:
    try:
        return _registry()[_canonical_id(dataset_id)]
    except KeyError:
        raise UnknownDataset(dataset_id) from None


def registered_ids() -> list[str]:
    return list(_registry())


# -- reading ----------------------------------------------------------------


def _read_rows(path: Path, delimiter: str):
    """Yield (line_number, row_dict) pairs from a CSV or JSONL file."""
    if path.suffix in (".jsonl", ".ndjson"):
        with path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ParseError(lineno, f"bad JSON: {exc.msg}") from None
                if not isinstance(obj, dict):
                    raise ParseError(lineno, "expected a flat object")
                row = {}
                for k, v in obj.items():
                    if isinstance(v, (dict, list)):
                        raise ParseError(lineno, f"field {k!r} is not a scalar")
                    row[str(k)] = None if v is None else str(v)
                yield lineno, row
        return

    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            return
        except csv.Error as exc:
            raise ParseError(reader.line_num, str(exc)) from None
        while True:
            try:
                values = next(reader)
            except StopIteration:
                break
            except csv.Error as exc:
                raise ParseError(reader.line_num, str(exc)) from None
            if not values:
                continue
            if len(values) != len(header):
                raise ParseError(reader.line_num, f"expected {len(header)} fields, found {len(values)}")
            yield reader.line_num, dict(zip(header, values))


def _row_to_instance(row: dict, desc: DatasetDescriptor, uid: str) -> LabeledInstance:
    task = desc.task
    skip = {desc.label_field, desc.id_field, desc.target_field}
    target = None
    if task.has_target:
        target = (row.get(desc.target_field) or "").strip() or None

    if task.is_pair:
        lp, rp = desc.pair_prefixes
        left, right = [], []
        for col, raw in row.items():
            if col in skip:
                continue
            if col.startswith(lp):
                left.append((col[len(lp):], normalize_value(raw)))
            elif col.startswith(rp):
                right.append((col[len(rp):], normalize_value(raw)))
        record = RecordInstance(tuple(left), Role.PAIR, tuple(right))
    else:
        role = {TaskKind.CTA: Role.COLUMN, TaskKind.AVE: Role.TEXT}.get(task, Role.SINGLE)
        attrs = tuple((col, normalize_value(raw)) for col, raw in row.items() if col not in skip)
        record = RecordInstance(attrs, role)

    gold = label_for_task(task, row[desc.label_field])
    return validate_labeled(LabeledInstance(record, task, gold, target, uid))


def load_table(path: str | Path, descriptor: DatasetDescriptor, split: str = "all") -> Dataset:
    """Read one delimited or line-record file; every row becomes one instance."""
    path = Path(path)
    instances = []
    for index, (lineno, row) in enumerate(_read_rows(path, descriptor.delimiter)):
        if descriptor.label_field not in row:
            raise LabelColumnMissing(f"{path}: no {descriptor.label_field!r} column")
        raw_id = (row.get(descriptor.id_field) or "").strip()
        uid = raw_id or f"{descriptor.id}-{split}-{index}"
        try:
            instances.append(_row_to_instance(row, descriptor, uid))
        except DPError as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(lineno, str(exc)) from None
    return Dataset(descriptor, instances, {split: list(range(len(instances)))})


def write_table(dataset: Dataset, path: str | Path) -> Path:
    """Write ``dataset`` in the layout ``load_table`` reads back."""
    path = Path(path)
    desc = dataset.descriptor
    header: list[str] = []
    rows = []
    for item in dataset.instances:
        row = {desc.id_field: item.uid}
        inst = item.instance
        if inst.role is Role.PAIR:
            lp, rp = desc.pair_prefixes
            row.update({lp + n: render_value(v) for n, v in inst.attributes})
            row.update({rp + n: render_value(v) for n, v in inst.right})
        else:
            row.update({n: render_value(v) for n, v in inst.attributes})
        if desc.task.has_target:
            row[desc.target_field] = item.target_attribute or ""
        row[desc.label_field] = item.gold.render() if item.gold else ""
        for key in row:
            if key not in header:
                header.append(key)
        rows.append(row)

    if path.suffix in (".jsonl", ".ndjson"):
        with path.open("w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row, ensure_ascii=False) + "\n")
        return path

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=header, delimiter=desc.delimiter, lineterminator="\n", restval="nan")
    writer.writeheader()
    writer.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


# -- manifests and splits ---------------------------------------------------


def load_manifest(path: str | Path) -> DatasetDescriptor:
    path = Path(path)
    data = yaml.safe_load(path.read_text(encoding="utf-8"))
    if not isinstance(data, dict) or "id" not in data:
        raise ValueError(f"{path}: manifest must be a mapping with an 'id'")
    return DatasetDescriptor.from_json(data)


def write_manifest(descriptor: DatasetDescriptor, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(descriptor.to_json(), sort_keys=False), encoding="utf-8")
    return path


def load_dataset(manifest: str | Path, data_root: str | Path | None = None) -> Dataset:
    """Load all files named by a manifest and assign splits.

    Relative file paths resolve against ``data_root`` when given, else the
    manifest's own directory.
    """
    manifest = Path(manifest)
    desc = load_manifest(manifest)
    base = Path(data_root) if data_root is not None else manifest.parent
    if not desc.files:
        raise ValueError(f"{manifest}: no files listed")

    instances: list[LabeledInstance] = []
    splits: dict[str, list[int]] = {}
    for split_name, rel in desc.files.items():
        part = load_table(base / rel, desc, split=split_name)
        start = len(instances)
        instances.extend(part.instances)
        splits[split_name] = list(range(start, len(instances)))
    dataset = Dataset(desc, instances, splits)
    if desc.split_protocol.kind == "seeded-fraction":
        train, valid, test = apply_split(dataset)
        dataset.splits = {"train": sorted(train), "valid": sorted(valid), "test": sorted(test)}
    log.info("loaded %s: %d instances", desc.id, len(instances))
    return dataset


def seeded_permutation(n: int, seed: int) -> list[int]:
    """The permutation used by seeded-fraction splits: ``random.Random(seed).shuffle``."""
    order = list(range(n))
    random.Random(seed).shuffle(order)
    return order


def split_sizes(n: int, fractions: tuple[float, float, float]) -> tuple[int, int, int]:
    n_train = int(round(n * fractions[0]))
    n_valid = min(n - n_train, int(round(n * fractions[1])))
    return n_train, n_valid, n - n_train - n_valid


def apply_split(dataset: Dataset) -> tuple[set[int], set[int], set[int]]:
    """Return (train, valid, test) index sets for the descriptor's protocol.

    Provided splits mirror file membership; files named other than
    train/valid/test are treated as train. Seeded-fraction shuffles all
    indexes with :func:`seeded_permutation` and cuts by rounded fractions.
    """
    proto = dataset.descriptor.split_protocol
    if proto.kind == "provided":
        out = {name: set() for name in SPLITS}
        for name, idx in dataset.splits.items():
            out[name if name in out else "train"].update(idx)
        return out["train"], out["valid"], out["test"]

    n = len(dataset.instances)
    order = seeded_permutation(n, proto.seed)
    n_train, n_valid, _ = split_sizes(n, proto.fractions)
    return set(order[:n_train]), set(order[n_train:n_train + n_valid]), set(order[n_train + n_valid:])


def with_split_protocol(dataset: Dataset, protocol: SplitProtocol) -> Dataset:
    return Dataset(replace(dataset.descriptor, split_protocol=protocol), dataset.instances, dict(dataset.splits))
