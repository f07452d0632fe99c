"""Checkpoint persistence and report emission (JSON + CSV)."""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from promptnorm.harness import FrequencyTable, RunReport, norm_telemetry
from promptnorm.prompt import SoftPrompt

SCHEMA_VERSION = 1

FREQUENCY_COLUMNS = ["arm", "parameter", "position", "accuracy_base", "accuracy_corrupted",
                     "delta", "norm_before", "norm_after", "exceeds"]


class CheckpointError(RuntimeError):
    pass


class CheckpointNotFound(CheckpointError, FileNotFoundError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointParseError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    prompt: SoftPrompt
    task_seed: int
    encoder_seed: int
    epoch: int
    mode: str
    model: dict = field(default_factory=dict)
    version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "L": self.prompt.length,
            "D": self.prompt.dim,
            "prompt": self.prompt.rows.tolist(),
            "task_seed": self.task_seed,
            "encoder_seed": self.encoder_seed,
            "epoch": self.epoch,
            "mode": self.mode,
            "model": self.model,
        }


def write_atomic(path: str | Path, text: str) -> None:
    """Write UTF-8 text to ``path`` via a temp file and rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(obj) -> str:
    # json emits floats via repr(): the shortest string that round-trips exactly
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    write_atomic(path, dumps(ckpt.to_dict()))


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise CheckpointNotFound(f"checkpoint not found: {path}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointParseError(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") \
            from None
    if not isinstance(doc, dict):
        raise CheckpointParseError(f"{path}: top level must be an object")
    version = doc.get("version")
    if version != SCHEMA_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint schema version {version!r}, this build reads {SCHEMA_VERSION}")
    try:
        rows = np.array(doc["prompt"], dtype=np.float64)
        if rows.shape != (doc["L"], doc["D"]):
            raise CheckpointParseError(
                f"{path}: prompt shape {rows.shape} does not match L={doc['L']}, D={doc['D']}")
        return Checkpoint(SoftPrompt(rows), int(doc["task_seed"]), int(doc["encoder_seed"]),
                          int(doc["epoch"]), str(doc["mode"]), dict(doc.get("model", {})),
                          version)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointParseError(f"{path}: malformed checkpoint ({exc!r})") from None


def _csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(rows)
    return buf.getvalue()


def trace_csv(report: RunReport, length: int) -> str:
    rows = norm_telemetry(report.trace)
    if not report.trace.records:
        rows = [["epoch", "test_accuracy", "mean_norm"]
                + [f"norm_{j}" for j in range(1, length + 1)]]
    return _csv(rows)


def frequency_csv(table: FrequencyTable | None) -> str:
    rows: list[list] = [FREQUENCY_COLUMNS]
    if table is not None:
        for r in table.averaged_cells():
            rows.append([r[c] if c != "exceeds" else int(r[c]) for c in FREQUENCY_COLUMNS])
    return _csv(rows)


def emit_reports(report: RunReport, out_dir: str | Path, length: int) -> dict[str, Path]:
    """Write trace.csv, frequency.csv and report.json into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"trace": out / "trace.csv", "frequency": out / "frequency.csv",
             "report": out / "report.json"}
    write_atomic(paths["trace"], trace_csv(report, length))
    write_atomic(paths["frequency"], frequency_csv(report.frequency))
    write_atomic(paths["report"], dumps(report.to_dict()))
    return paths


def read_report(path: str | Path) -> RunReport:
    return RunReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
