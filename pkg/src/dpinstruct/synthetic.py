"""Synthetic datasets shaped like the instruction-data pool.

Values are placeholders; only sizes, positive counts and record shapes
matter. Used for quota checks and offline dry runs of the corpus builder.
"""

from __future__ import annotations

import random

from .core import Label, LabeledInstance, Missing, RecordInstance, Role, TaskKind

_ED_ATTRS = ("age", "workclass", "education", "occupation", "hoursperweek", "income")


def synthetic_dataset(dataset: str, task: TaskKind, size: int, positives: int | None = None,
                      seed: int = 0, missing_targets: int = 0) -> list[LabeledInstance]:
    """``size`` instances of ``task``; ``positives`` of them gold Yes (binary tasks).

    For ED, ``missing_targets`` negatives get a missing target cell.
    """
    rng = random.Random(f"{seed}:{dataset}:synthetic")
    order = list(range(size))
    rng.shuffle(order)
    n_pos = positives or 0
    pos = set(order[:n_pos])
    missing = set(order[n_pos:n_pos + missing_targets])
    out = []
    for i in range(size):
        uid = f"{dataset}-{i:06d}"
        yes = i in pos
        if task is TaskKind.ED:
            target = _ED_ATTRS[i % len(_ED_ATTRS)]
            attrs = tuple((a, Missing if (a == target and i in missing) else f"{a}-{i}") for a in _ED_ATTRS)
            out.append(LabeledInstance(RecordInstance(attrs), task, Label.binary(yes), target, uid))
        elif task is TaskKind.DI:
            attrs = (("name", f"place {i}"), ("addr", f"{i} main st."), ("phone", f"555-{i:04d}"),
                     ("type", "cafe"), ("city", f"town{i % 17}"))
            out.append(LabeledInstance(RecordInstance(attrs), task, Label.of_value(f"town{i % 17}"), "city", uid))
        elif task is TaskKind.SM:
            left = (("name", f"table_a-col{i}"), ("description", f"column {i} of the first schema"))
            right = (("name", f"table_b-col{i if yes else i + 1}"), ("description", f"field {i} in the second schema"))
            out.append(LabeledInstance(RecordInstance(left, Role.PAIR, right), task, Label.binary(yes), None, uid))
        elif task is TaskKind.EM:
            left = (("name", f"item {i}"), ("factory", f"maker {i % 50}"))
            right = (("name", f"item {i if yes else i + 7}"), ("factory", f"maker {i % 50}"))
            out.append(LabeledInstance(RecordInstance(left, Role.PAIR, right), task, Label.binary(yes), None, uid))
        else:
            raise ValueError(f"no synthetic generator for {task.value}")
    return out


def synthetic_pool(seed: int = 0) -> dict[str, list[LabeledInstance]]:
    """Datasets with the reference pool's sizes and positive counts."""
    from .composer import REFERENCE_POOL_SIZES, REFERENCE_COUNTS

    return {
        ds: synthetic_dataset(ds, task, REFERENCE_POOL_SIZES[ds], positives, seed)
        for ds, (task, _, positives) in REFERENCE_COUNTS.items()
    }
