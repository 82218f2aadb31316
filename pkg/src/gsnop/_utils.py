from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .ctdg import CtdgStore


def write_json(path: Path, data: Mapping[str, Any]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as file:
        json.dump(data, file, indent=2, sort_keys=True)


def append_csv_row(path: Path, fields: Sequence[str], row: Mapping[str, Any]) -> None:
    """Append `row`, writing the header first when the file is new."""
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", encoding="utf-8", newline="") as file:
        writer = csv.DictWriter(file, fieldnames=list(fields))
        if new:
            writer.writeheader()
        writer.writerow({name: row.get(name, "") for name in fields})


def data_hash(store: CtdgStore) -> str:
    digest = hashlib.sha256()
    for array in (store.src, store.dst, store.t, store.edge_feat):
        digest.update(np.ascontiguousarray(array).tobytes())
    return digest.hexdigest()[:16]


def is_nonempty_dir(path: Path) -> bool:
    return path.is_dir() and any(path.iterdir())
