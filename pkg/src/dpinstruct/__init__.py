"""Instruction-tuning data builder and evaluation harness for tabular data preprocessing tasks."""

from .core import Label, LabeledInstance, RecordInstance, Role, TaskKind

__version__ = "0.1.0"
__all__ = ["Label", "LabeledInstance", "RecordInstance", "Role", "TaskKind"]
