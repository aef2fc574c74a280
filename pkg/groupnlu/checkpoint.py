import json
import os
import sqlite3
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Any, Dict, Optional

import numpy as np

from groupnlu.errors import CompatibilityError
from groupnlu.models import TaskRegistry, Vocabulary
from groupnlu.mtl_model import ModelConfig, MtlModel

SCHEMA_VERSION = 1


class CheckpointStore:
    """A checkpoint is one SQLite file: JSON metadata plus raw float64 parameter blobs."""

    def __init__(self, path: str) -> None:
        dir_name = os.path.dirname(path)
        if dir_name:
            os.makedirs(dir_name, exist_ok=True)
        self.path = path
        self.conn = sqlite3.connect(path)
        self.conn.row_factory = sqlite3.Row
        self.conn.execute("PRAGMA synchronous = NORMAL")
        self._init_schema()

    def _init_schema(self) -> None:
        cursor = self.conn.cursor()
        cursor.execute(
            """
            CREATE TABLE IF NOT EXISTS meta (
                key TEXT PRIMARY KEY,
                value TEXT NOT NULL
            )
            """
        )
        cursor.execute(
            """
            CREATE TABLE IF NOT EXISTS parameters (
                name TEXT PRIMARY KEY,
                shape TEXT NOT NULL,
                data BLOB NOT NULL
            )
            """
        )
        cursor.execute(
            """
            CREATE TABLE IF NOT EXISTS optimizer_moments (
                name TEXT NOT NULL,
                kind TEXT NOT NULL,
                shape TEXT NOT NULL,
                data BLOB NOT NULL,
                PRIMARY KEY (name, kind)
            )
            """
        )
        self.conn.commit()

    def close(self) -> None:
        self.conn.close()

    def __enter__(self) -> "CheckpointStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def set_meta(self, key: str, value: Any) -> None:
        self.conn.execute(
            "INSERT INTO meta (key, value) VALUES (?, ?) ON CONFLICT(key) DO UPDATE SET value = excluded.value",
            (key, json.dumps(value, sort_keys=True)),
        )

    def get_meta(self, key: str, default: Any = None) -> Any:
        row = self.conn.execute("SELECT value FROM meta WHERE key = ?", (key,)).fetchone()
        return json.loads(row["value"]) if row else default

    def put_array(self, table: str, name: str, values: np.ndarray, kind: Optional[str] = None) -> None:
        values = np.ascontiguousarray(values, dtype=np.float64)
        shape = json.dumps(list(values.shape))
        if table == "parameters":
            self.conn.execute(
                "INSERT OR REPLACE INTO parameters (name, shape, data) VALUES (?, ?, ?)",
                (name, shape, values.tobytes()),
            )
        else:
            self.conn.execute(
                "INSERT OR REPLACE INTO optimizer_moments (name, kind, shape, data) VALUES (?, ?, ?, ?)",
                (name, kind, shape, values.tobytes()),
            )

    @staticmethod
    def _decode(row: sqlite3.Row) -> np.ndarray:
        shape = tuple(json.loads(row["shape"]))
        return np.frombuffer(row["data"], dtype=np.float64).reshape(shape).copy()

    def arrays(self) -> Dict[str, np.ndarray]:
        rows = self.conn.execute("SELECT name, shape, data FROM parameters ORDER BY name").fetchall()
        return {row["name"]: self._decode(row) for row in rows}

    def moments(self) -> Dict[str, Dict[str, np.ndarray]]:
        out: Dict[str, Dict[str, np.ndarray]] = {}
        rows = self.conn.execute("SELECT name, kind, shape, data FROM optimizer_moments").fetchall()
        for row in rows:
            out.setdefault(row["kind"], {})[row["name"]] = self._decode(row)
        return out

    def commit(self) -> None:
        self.conn.commit()


@dataclass
class LoadedCheckpoint:
    model: MtlModel
    run_config: Dict[str, Any]
    training_state: Dict[str, Any]
    moments: Dict[str, Dict[str, np.ndarray]]


def save_checkpoint(
    path: str,
    model: MtlModel,
    run_config: Optional[Dict[str, Any]] = None,
    training_state: Optional[Dict[str, Any]] = None,
    moments: Optional[Dict[str, Dict[str, np.ndarray]]] = None,
) -> None:
    """Write to a sibling temp file and swap it in, so readers never see a partial checkpoint."""
    tmp_path = f"{path}.tmp"
    if os.path.exists(tmp_path):
        os.remove(tmp_path)
    store = CheckpointStore(tmp_path)
    try:
        store.set_meta("schema_version", SCHEMA_VERSION)
        store.set_meta("saved_at", datetime.now(timezone.utc).isoformat())
        store.set_meta("model_config", model.config.to_dict())
        store.set_meta("vocab", model.vocab.to_dict())
        store.set_meta("registry", model.registry.to_dict())
        store.set_meta("run_config", run_config or {})
        store.set_meta("training_state", training_state or {})
        for name, var in model.named_parameters().items():
            store.put_array("parameters", name, var.data)
        for kind, arrays in (moments or {}).items():
            for name, values in arrays.items():
                store.put_array("optimizer_moments", name, values, kind=kind)
        store.commit()
    finally:
        store.close()
    os.replace(tmp_path, path)


def load_checkpoint(path: str) -> LoadedCheckpoint:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with CheckpointStore(path) as store:
        version = store.get_meta("schema_version")
        if version != SCHEMA_VERSION:
            raise CompatibilityError(f"{path}: checkpoint schema {version} is not {SCHEMA_VERSION}")
        config = ModelConfig.from_dict(store.get_meta("model_config"))
        vocab = Vocabulary.from_dict(store.get_meta("vocab"))
        registry = TaskRegistry.from_dict(store.get_meta("registry"), vocab)
        arrays = store.arrays()
        run_config = store.get_meta("run_config", {})
        training_state = store.get_meta("training_state", {})
        moments = store.moments()

    model = MtlModel.build(config, registry, vocab)
    params = model.named_parameters()
    missing = sorted(set(params) - set(arrays))
    extra = sorted(set(arrays) - set(params))
    if missing or extra:
        raise CompatibilityError(f"{path}: parameter names differ (missing {missing[:3]}, unexpected {extra[:3]})")
    for name, var in params.items():
        if arrays[name].shape != var.shape:
            raise CompatibilityError(f"{path}: {name} has shape {arrays[name].shape}, model expects {var.shape}")
        var.data = arrays[name]
    return LoadedCheckpoint(model=model, run_config=run_config, training_state=training_state, moments=moments)
