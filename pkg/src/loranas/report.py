"""Artifact emission: rank maps, per-epoch metrics and run manifests.

Every file is written to a temporary sibling and renamed into place, so a
reader never sees a partial artifact.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .supernet import RankMap

METRIC_COLUMNS = ("phase", "epoch", "train_loss", "val_loss", "eval_perplexity", "trainable_params")


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def export_rank_map(rank_map: RankMap, path) -> None:
    """Write the rank map as sorted-key JSON: name -> {rank, alphas, search_space}."""
    atomic_write_text(path, rank_map.dumps())


def load_rank_map(path) -> RankMap:
    return RankMap.loads(Path(path).read_text(encoding="utf-8"))


def _fmt(x) -> str:
    if isinstance(x, float):
        return "" if math.isnan(x) else repr(x)
    return str(x)


def metrics_csv(state, include_time: bool = False) -> str:
    """Per-epoch metrics as CSV text.

    Wall-clock seconds vary between runs, so the column is only emitted on
    request; without it the file is reproducible byte for byte.
    """
    if not state.epochs:
        raise ValueError("no epochs recorded")
    cols = METRIC_COLUMNS + (("wall_seconds",) if include_time else ())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for rec in state.epochs:
        row = asdict(rec)
        w.writerow([_fmt(row[c]) for c in cols])
    return buf.getvalue()


def export_metrics_csv(state, path, include_time: bool = False) -> None:
    atomic_write_text(path, metrics_csv(state, include_time))


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    started: str
    finished: str = ""
    artifacts: dict[str, str] = field(default_factory=dict)
    results: dict = field(default_factory=dict)
    tool_version: str = __version__

    def write(self, path) -> None:
        self.artifacts.setdefault("manifest", str(path))
        atomic_write_text(path, json.dumps(asdict(self), sort_keys=True, indent=2) + "\n")
