"""
Training records: per-iteration log lines and learning curves
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Optional

from loguru import logger

from dfiv.models.features import Mat


@dataclass
class IterationRecord:
    iteration: int
    stage1_loss: float
    stage2_loss: float
    stage1_oos: Optional[float] = None
    stage2_oos: Optional[float] = None
    test_loss: Optional[float] = None

    def to_dict(self) -> dict:
        return {key: value for key, value in asdict(self).items() if value is not None}


@dataclass
class TrainingLog:
    """
    Collects one record per outer iteration. When a test grid is attached the
    trainer also evaluates the structural error after every iteration.
    """

    test_x: Optional[Mat] = None
    test_truth: Optional[Mat] = None
    test_o: Optional[Mat] = None
    records: List[IterationRecord] = field(default_factory=list)
    diverged: bool = False
    stopped_early: bool = False

    @property
    def tracks_test_loss(self) -> bool:
        return self.test_x is not None and self.test_truth is not None

    def append(self, record: IterationRecord) -> None:
        self.records.append(record)
        logger.debug("iteration {iteration}: {payload}", iteration=record.iteration, payload=record.to_dict())

    def __len__(self) -> int:
        return len(self.records)

    def curve(self, key: str) -> List[Optional[float]]:
        return [getattr(record, key) for record in self.records]
