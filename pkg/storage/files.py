"""
storage/files.py — Run-directory layout, provenance-stamped CSV/JSON writers,
sample dumps and the run lock.

Every CSV starts with one comment line `# config_hash=<hash> seed=<seed>`
(readable by gnuplot and by `pandas.read_csv(comment="#")`); every JSON report
carries `config_hash` and `seed` keys.
"""
from __future__ import annotations

import csv
import json
import logging
import os
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Union

import torch
from pydantic import BaseModel

from core.errors import ConfigurationError, RunLockedError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Provenance:
    config_hash: str
    seed: Union[int, str]           # merged reports carry comma-joined hashes and seeds

    def comment(self) -> str:
        return f"# config_hash={self.config_hash} seed={self.seed}"


# ─── Run directory ────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class RunPaths:
    root: Path

    @property
    def config(self) -> Path:
        return self.root / "config.json"

    @property
    def metrics(self) -> Path:
        return self.root / "metrics.csv"

    @property
    def snapshots(self) -> Path:
        return self.root / "snapshots"

    @property
    def final(self) -> Path:
        return self.root / "final.ckpt"

    @property
    def ema(self) -> Path:
        return self.root / "ema.ckpt"

    @property
    def swa(self) -> Path:
        return self.root / "swa.ckpt"

    @property
    def summary(self) -> Path:
        return self.root / "train_summary.json"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    @property
    def lock(self) -> Path:
        return self.root / ".lock"

    def snapshot(self, step: int) -> Path:
        return self.snapshots / f"step_{step:08d}.ckpt"

    def snapshot_files(self) -> list[Path]:
        return sorted(self.snapshots.glob("step_*.ckpt")) if self.snapshots.exists() else []


class RunLock:
    """Exclusive lock file for one trainer per run directory."""

    def __init__(self, path: Path) -> None:
        self.path = Path(path)

    def __enter__(self) -> "RunLock":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as exc:
            raise RunLockedError(
                f"Run directory {self.path.parent} is locked by another trainer "
                f"(remove {self.path.name} if that process is gone)."
            ) from exc
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc_info: object) -> None:
        self.path.unlink(missing_ok=True)


# ─── Writers ──────────────────────────────────────────────────────────────────

def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]], provenance: Provenance) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write(provenance.comment() + "\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if v is None else v for v in row])
    logger.info("Wrote %s", path)
    return path


def read_csv(path: Path) -> tuple[dict[str, str], list[dict[str, str]]]:
    """Rows of a provenance-stamped CSV plus the key=value pairs of its comment line."""
    path = Path(path)
    provenance: dict[str, str] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            for token in line[1:].split():
                key, _, value = token.partition("=")
                provenance[key] = value
        else:
            body.append(line)
    return provenance, list(csv.DictReader(body))


def write_json(path: Path, payload: Union[BaseModel, dict, list], provenance: Provenance) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(payload, BaseModel):
        body: Any = payload.model_dump(mode="json")
    elif isinstance(payload, list):
        body = [p.model_dump(mode="json") if isinstance(p, BaseModel) else p for p in payload]
    else:
        body = payload
    document = {"config_hash": provenance.config_hash, "seed": provenance.seed}
    document.update(body if isinstance(body, dict) else {"records": body})
    path.write_text(json.dumps(document, indent=2, sort_keys=False), encoding="utf-8")
    logger.info("Wrote %s", path)
    return path


def read_json(path: Path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigurationError(f"Report not found: {path}") from exc


def write_samples_csv(path: Path, samples: torch.Tensor, provenance: Provenance) -> Path:
    """Sample dump: `sample_id,dim0,dim1,…`, one row per generated point."""
    flat = samples.detach().to(torch.float64).reshape(samples.shape[0], -1)
    header = ["sample_id", *(f"dim{k}" for k in range(flat.shape[1]))]
    rows = ([i, *(repr(float(v)) for v in row)] for i, row in enumerate(flat.tolist()))
    return write_csv(path, header, rows, provenance)


def read_samples_csv(path: Path) -> torch.Tensor:
    _, rows = read_csv(path)
    if not rows:
        return torch.zeros((0, 0), dtype=torch.float64)
    dims = sorted((k for k in rows[0] if k.startswith("dim")), key=lambda k: int(k[3:]))
    return torch.tensor([[float(r[k]) for k in dims] for r in rows], dtype=torch.float64)
