from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from groupnlu.errors import RegistryError

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
UNK_ID = 1


@dataclass(frozen=True)
class Utterance:
    tokens: Tuple[str, ...]
    slots: Tuple[str, ...]
    intent: str
    task_id: str = ""

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class LabelMap:
    labels: List[str]

    def __post_init__(self) -> None:
        self._ids = {label: idx for idx, label in enumerate(self.labels)}
        if len(self._ids) != len(self.labels):
            raise ValueError("label list contains duplicates")

    def __len__(self) -> int:
        return len(self.labels)

    def __contains__(self, label: str) -> bool:
        return label in self._ids

    def id_of(self, label: str, default: Optional[int] = None) -> int:
        if label in self._ids:
            return self._ids[label]
        if default is None:
            raise KeyError(label)
        return default

    def label_of(self, idx: int) -> str:
        return self.labels[idx]


@dataclass
class Vocabulary:
    words: List[str]
    chars: List[str]
    slot_labels: Dict[str, LabelMap] = field(default_factory=dict)
    intent_labels: Dict[str, LabelMap] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self._word_ids = {w: i for i, w in enumerate(self.words)}
        self._char_ids = {c: i for i, c in enumerate(self.chars)}

    def word_id(self, token: str) -> int:
        return self._word_ids.get(token.lower(), UNK_ID)

    def char_id(self, char: str) -> int:
        return self._char_ids.get(char, UNK_ID)

    def to_dict(self) -> dict:
        return {
            "words": self.words,
            "chars": self.chars,
            "slot_labels": {task: m.labels for task, m in self.slot_labels.items()},
            "intent_labels": {task: m.labels for task, m in self.intent_labels.items()},
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "Vocabulary":
        return cls(
            words=list(payload["words"]),
            chars=list(payload["chars"]),
            slot_labels={task: LabelMap(list(v)) for task, v in payload["slot_labels"].items()},
            intent_labels={task: LabelMap(list(v)) for task, v in payload["intent_labels"].items()},
        )


@dataclass
class TaskSpec:
    task_id: str
    group_id: str
    alpha: float
    train_size: int
    slot_labels: LabelMap
    intent_labels: LabelMap


@dataclass
class TaskGroup:
    group_id: str
    task_ids: List[str]


@dataclass
class TaskRegistry:
    groups: List[TaskGroup]
    tasks: Dict[str, TaskSpec]

    @property
    def task_ids(self) -> List[str]:
        return [task_id for group in self.groups for task_id in group.task_ids]

    @property
    def group_ids(self) -> List[str]:
        return [group.group_id for group in self.groups]

    def task(self, task_id: str) -> TaskSpec:
        if task_id not in self.tasks:
            raise RegistryError(f"Unknown task {task_id!r}; registered tasks: {self.task_ids}")
        return self.tasks[task_id]

    def group(self, group_id: str) -> TaskGroup:
        for group in self.groups:
            if group.group_id == group_id:
                return group
        raise RegistryError(f"Unknown group {group_id!r}")

    def group_of(self, task_id: str) -> TaskGroup:
        return self.group(self.task(task_id).group_id)

    def universe_index(self, task_id: str) -> int:
        self.task(task_id)
        return self.task_ids.index(task_id)

    def group_index(self, task_id: str) -> int:
        return self.group_of(task_id).task_ids.index(task_id)

    def alpha(self, task_id: str) -> float:
        alpha = self.task(task_id).alpha
        if alpha is None or not alpha > 0:
            raise RegistryError(f"Task {task_id!r} has no positive loss weight")
        return alpha

    def __iter__(self) -> Iterator[TaskSpec]:
        for task_id in self.task_ids:
            yield self.tasks[task_id]

    def to_dict(self) -> dict:
        return {
            "groups": [{"group_id": g.group_id, "task_ids": list(g.task_ids)} for g in self.groups],
            "tasks": {
                t.task_id: {"group_id": t.group_id, "alpha": t.alpha, "train_size": t.train_size}
                for t in self.tasks.values()
            },
        }

    @classmethod
    def from_dict(cls, payload: dict, vocab: Vocabulary) -> "TaskRegistry":
        groups = [TaskGroup(g["group_id"], list(g["task_ids"])) for g in payload["groups"]]
        tasks = {
            task_id: TaskSpec(
                task_id=task_id,
                group_id=info["group_id"],
                alpha=float(info["alpha"]),
                train_size=int(info["train_size"]),
                slot_labels=vocab.slot_labels[task_id],
                intent_labels=vocab.intent_labels[task_id],
            )
            for task_id, info in payload["tasks"].items()
        }
        return cls(groups=groups, tasks=tasks)


@dataclass
class Batch:
    task_id: str
    word_ids: np.ndarray
    char_ids: np.ndarray
    char_mask: np.ndarray
    mask: np.ndarray
    slot_ids: np.ndarray
    intent_ids: np.ndarray
    utterances: Tuple[Utterance, ...]

    def __len__(self) -> int:
        return self.word_ids.shape[0]

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)
