"""metrics.csv 写入

列：step, phase, name, value
- 单写者，逐行追加；同一运行目录下各阶段（bootstrap / pretrain / finetune / eval）共用一个文件
- value 用 repr(float) 写出，保证同配置同种子的两次运行逐字节相同
- 不写任何时间戳
"""
from __future__ import annotations

import csv
import logging
import math
from pathlib import Path
from typing import Mapping, Optional

import pandas as pd

logger = logging.getLogger(__name__)

COLUMNS = ("step", "phase", "name", "value")


class MetricsWriter:
    """可直接作为引擎的 on_metrics 回调：writer(step, phase, name, value)"""

    def __init__(self, path, append: bool = True) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fresh = not append or not self.path.exists() or self.path.stat().st_size == 0
        self._fh = open(self.path, "w" if not append else "a", encoding="utf-8", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        if fresh:
            self._writer.writerow(COLUMNS)
        self.rows = 0

    def __call__(self, step: int, phase: str, name: str, value: float) -> None:
        value = float(value)
        if not math.isfinite(value):
            logger.warning(f"[metrics] {phase}/{name} 在 step={step} 非有限: {value}")
        self._writer.writerow((int(step), phase, name, repr(value)))
        self.rows += 1

    def write_many(self, step: int, phase: str, values: Mapping[str, float]) -> None:
        for name in sorted(values):
            self(step, phase, name, values[name])

    def flush(self) -> None:
        self._fh.flush()

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_metrics(path, phase: Optional[str] = None) -> pd.DataFrame:
    df = pd.read_csv(path, dtype={"step": "int64", "phase": str, "name": str, "value": "float64"})
    return df[df["phase"] == phase] if phase else df


def last_value(df: pd.DataFrame, phase: str, name: str) -> float:
    rows = df[(df["phase"] == phase) & (df["name"] == name)]
    if rows.empty:
        raise KeyError(f"metrics 中没有 {phase}/{name}")
    return float(rows["value"].iloc[-1])
