"""Run artifacts: metrics and projection CSVs, group curves and the summary table."""

from __future__ import annotations

import csv
import json
import logging
import threading
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import pandas as pd

from src.errors import MetricsError
from src.metrics import MetricsRecord, groupwise_summary

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("accuracy", "weighted_auc", "weighted_f1")
ROLE_LABELS = {"train": "tr", "test": "ts"}


@dataclass(frozen=True)
class ProjectionRow:
    run_id: str
    round: int
    strategy: str
    sample_id: int
    client_id: int
    group_id: int
    x: float
    y: float

    def __post_init__(self) -> None:
        if not (np.isfinite(self.x) and np.isfinite(self.y)):
            raise MetricsError(f"projection of sample {self.sample_id} is not finite")

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def _format(value: object) -> object:
    # repr keeps floats round-trippable and deterministic
    return repr(float(value)) if isinstance(value, (float, np.floating)) else value


class MetricsSink:
    """Append-only CSV writer; the header is written when the file is created."""

    def __init__(self, path: Path, columns: Sequence[str]) -> None:
        self.path = Path(path)
        self.columns = list(columns)
        self._lock = threading.Lock()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists() or self.path.stat().st_size == 0:
            with self.path.open("w", encoding="utf-8", newline="") as fh:
                csv.writer(fh).writerow(self.columns)
        else:
            with self.path.open("r", encoding="utf-8", newline="") as fh:
                header = next(csv.reader(fh), [])
            if header != self.columns:
                raise MetricsError(f"{self.path}: existing header {header} does not match {self.columns}")
        self.rows_written = 0

    def append(self, rows: Iterable[object]) -> int:
        written = 0
        with self._lock, self.path.open("a", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            for row in rows:
                values = asdict(row) if not isinstance(row, dict) else row
                writer.writerow([_format(values[c]) for c in self.columns])
                written += 1
        self.rows_written += written
        return written


def read_metrics(path: Path) -> list[MetricsRecord]:
    path = Path(path)
    if not path.exists():
        raise MetricsError(f"metrics file not found: {path}")
    frame = pd.read_csv(path, dtype={"run_id": str, "strategy": str, "role": str, "split": str},
                        keep_default_na=False, na_values=["nan"], float_precision="round_trip")
    missing = set(MetricsRecord.columns()) - set(frame.columns)
    if missing:
        raise MetricsError(f"{path}: missing columns {sorted(missing)}")
    return [
        MetricsRecord(
            run_id=row.run_id,
            round=int(row.round),
            strategy=row.strategy,
            client_id=int(row.client_id),
            group_id=int(row.group_id),
            role=row.role,
            split=row.split,
            accuracy=float(row.accuracy),
            weighted_auc=float(row.weighted_auc),
            weighted_f1=float(row.weighted_f1),
        )
        for row in frame.itertuples(index=False)
    ]


def summary_table(records: Sequence[MetricsRecord], split: str = "local_test") -> pd.DataFrame:
    """Mean and std across clients at each strategy's final round, per client role.

    Also reports the spread of group means, the robustness figure used to
    compare strategies across groups.
    """
    frame = pd.DataFrame([asdict(r) for r in records])
    if frame.empty:
        raise MetricsError("summary_table needs at least one record")
    frame = frame[frame["split"] == split]
    last = frame.groupby("strategy")["round"].transform("max")
    final = frame[frame["round"] == last]

    rows = []
    for (strategy, role), part in final.groupby(["strategy", "role"], sort=True):
        row: dict[str, object] = {
            "strategy": strategy,
            "role": ROLE_LABELS.get(role, role),
            "round": int(part["round"].iloc[0]),
            "clients": int(len(part)),
        }
        for metric in METRIC_COLUMNS:
            values = part[metric].to_numpy(dtype=np.float64)
            row[f"{metric}_mean"] = float(np.nanmean(values)) if np.isfinite(values).any() else float("nan")
            row[f"{metric}_std"] = float(np.nanstd(values)) if np.isfinite(values).any() else float("nan")
        group_means = part.groupby("group_id")["accuracy"].mean()
        row["group_accuracy_std"] = float(np.std(group_means.to_numpy(), ddof=0))
        rows.append(row)
    return pd.DataFrame(rows)


def write_summary(table: pd.DataFrame, out_dir: Path) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    csv_path = out_dir / "summary.csv"
    json_path = out_dir / "summary.json"
    table.to_csv(csv_path, index=False)
    records = json.loads(table.to_json(orient="records"))
    json_path.write_text(json.dumps(records, indent=2), encoding="utf-8")
    return csv_path, json_path


def write_groups(records: Sequence[MetricsRecord], out_dir: Path, split: str = "local_test") -> Path:
    selected = [r for r in records if r.split == split]
    path = Path(out_dir) / "groups.csv"
    groupwise_summary(selected).to_csv(path, index=False)
    return path


def format_summary(table: pd.DataFrame) -> str:
    """Plain-text table, mean (std) in percent as the result tables print them."""
    lines = [f"{'strategy':<16}{'role':<6}{'acc':>16}{'w. AUC':>16}{'w. F1':>16}"]
    for row in table.itertuples(index=False):
        cells = [f"{100 * getattr(row, m + '_mean'):.2f} ({100 * getattr(row, m + '_std'):.2f})"
                 for m in METRIC_COLUMNS]
        lines.append(f"{row.strategy:<16}{row.role:<6}" + "".join(f"{c:>16}" for c in cells))
    return "\n".join(lines)


def load_run(run_dir: Path) -> dict[str, pd.DataFrame]:
    """Whatever tables a run directory holds, keyed by file stem."""
    run_dir = Path(run_dir)
    tables = {}
    for name in ("metrics", "projections", "groups", "summary", "sweep"):
        path = run_dir / f"{name}.csv"
        if path.exists() and path.stat().st_size:
            tables[name] = pd.read_csv(path)
    return tables
