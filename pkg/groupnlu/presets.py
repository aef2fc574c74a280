"""Named run configurations for the ATIS / Snips benchmark.

Presets resolve corpus paths under a data root laid out as
``<root>/<task>/{train,dev,test}.tsv``; ``split-snips`` produces the three
Snips parts in that layout.
"""

import os
from typing import Any, Dict, List

from groupnlu.mtl_model import ArchitectureKind

BENCHMARK_GROUPS = (
    ("atis_location", ("atis", "snips_location")),
    ("music_creative", ("snips_music", "snips_creative")),
)


def _task(data_dir: str, name: str, group: str) -> Dict[str, Any]:
    root = os.path.join(data_dir, name)
    return {
        "name": name,
        "group": group,
        "train": os.path.join(root, "train.tsv"),
        "dev": os.path.join(root, "dev.tsv"),
        "test": os.path.join(root, "test.tsv"),
    }


def _single(data_dir: str, name: str) -> Dict[str, Any]:
    return {
        "tasks": [_task(data_dir, name, name)],
        "architecture": ArchitectureKind.SINGLE_TASK.value,
        "lambda_adv": 0.0,
        "gamma_ortho": 0.0,
        "alpha_mode": "uniform",
    }


def _two_task(data_dir: str) -> Dict[str, Any]:
    return {
        "tasks": [_task(data_dir, "atis", "atis"), _task(data_dir, "snips", "snips")],
        "architecture": ArchitectureKind.PARALLEL_UNIV_TASK.value,
        "alpha_mode": "inverse-size",
    }


def _four_task(data_dir: str, kind: ArchitectureKind) -> Dict[str, Any]:
    tasks = [_task(data_dir, name, group) for group, members in BENCHMARK_GROUPS for name in members]
    payload: Dict[str, Any] = {"tasks": tasks, "architecture": kind.value, "alpha_mode": "inverse-size"}
    if kind is ArchitectureKind.SINGLE_TASK:
        payload.update(lambda_adv=0.0, gamma_ortho=0.0)
    return payload


def preset_names() -> List[str]:
    names = ["atis-single", "snips-single", "benchmark-2task"]
    names.extend(f"benchmark-4task-{kind.value}" for kind in ArchitectureKind)
    return names


def load_preset(name: str, data_dir: str) -> Dict[str, Any]:
    if name == "atis-single":
        payload = _single(data_dir, "atis")
    elif name == "snips-single":
        payload = _single(data_dir, "snips")
    elif name == "benchmark-2task":
        payload = _two_task(data_dir)
    elif name.startswith("benchmark-4task-"):
        try:
            kind = ArchitectureKind(name[len("benchmark-4task-"):])
        except ValueError:
            raise KeyError(name) from None
        payload = _four_task(data_dir, kind)
    else:
        raise KeyError(name)
    payload["output_dir"] = os.path.join("runs", name)
    return payload
