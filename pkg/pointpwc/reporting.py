from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List

LOSS_LOG_HEADER = ["step", "loss", "epe3d"]


def build_logger(log_file: Path) -> logging.Logger:
    log_file.parent.mkdir(parents=True, exist_ok=True)
    logger = logging.getLogger("pointpwc")
    logger.setLevel(logging.INFO)
    logger.handlers.clear()

    formatter = logging.Formatter(
        fmt="%(asctime)s | %(levelname)s | %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )

    file_handler = logging.FileHandler(log_file, encoding="utf-8")
    file_handler.setFormatter(formatter)
    logger.addHandler(file_handler)

    stream_handler = logging.StreamHandler()
    stream_handler.setFormatter(formatter)
    logger.addHandler(stream_handler)
    return logger


def write_json(output_file: Path, payload: Any) -> None:
    output_file.parent.mkdir(parents=True, exist_ok=True)
    temp_file = output_file.with_suffix(output_file.suffix + ".tmp")
    temp_file.write_text(json.dumps(payload, ensure_ascii=False, indent=2), encoding="utf-8")
    temp_file.replace(output_file)


@dataclass
class StepRecord:
    step: int
    loss: float
    epe3d: float | None = None


@dataclass
class TrainReport:
    loss_mode: str
    seed: int
    steps_requested: int
    start_step: int = 0
    final_step: int = 0
    initial_loss: float | None = None
    final_loss: float | None = None
    metrics: Dict[str, Any] = field(default_factory=dict)
    checkpoints: List[str] = field(default_factory=list)
    history: List[StepRecord] = field(default_factory=list)

    def add_step(self, record: StepRecord) -> None:
        self.history.append(record)
        if self.initial_loss is None:
            self.initial_loss = record.loss
        self.final_loss = record.loss
        self.final_step = record.step

    def write(self, output_file: Path) -> None:
        payload = asdict(self)
        payload.pop("history")
        write_json(output_file, payload)


class LossLog:
    """Append-only ``step,loss,epe3d`` CSV."""

    def __init__(self, path: Path):
        self.path = Path(path)

    def reset(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("w", newline="", encoding="utf-8") as handle:
            csv.writer(handle).writerow(LOSS_LOG_HEADER)

    def truncate_after(self, step: int) -> None:
        if not self.path.exists():
            self.reset()
            return
        kept = [row for row in self.read() if int(row["step"]) <= step]
        self.reset()
        with self.path.open("a", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            for row in kept:
                writer.writerow([row["step"], row["loss"], row["epe3d"]])

    def append(self, record: StepRecord) -> None:
        with self.path.open("a", newline="", encoding="utf-8") as handle:
            epe = "" if record.epe3d is None else repr(float(record.epe3d))
            csv.writer(handle).writerow([record.step, repr(float(record.loss)), epe])

    def read(self) -> List[Dict[str, str]]:
        if not self.path.exists():
            return []
        with self.path.open("r", newline="", encoding="utf-8") as handle:
            return list(csv.DictReader(handle))
