"""Plain-text and JSON result tables."""

from __future__ import annotations

import json
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .metrics import recovery
from .pipeline import ExperimentRow, environment_info


@dataclass
class MetricsReport:
    rows: list[ExperimentRow]
    environment: dict = field(default_factory=environment_info)

    def __post_init__(self):
        for r in self.rows:
            if r.intent_accuracy is not None and not 0.0 <= r.intent_accuracy <= 1.0:
                raise ValueError(f"{r.name}: accuracy {r.intent_accuracy} outside [0, 1]")
            if r.wer is not None and r.wer < 0:
                raise ValueError(f"{r.name}: negative WER")

    @property
    def seeds(self) -> list[int]:
        return sorted({r.seed for r in self.rows})

    def to_dict(self) -> dict:
        return {"rows": [r.to_dict() for r in self.rows], "environment": self.environment, "seeds": self.seeds}

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        os.replace(tmp, path)
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "MetricsReport":
        raw = json.loads(Path(path).read_text())
        return cls([ExperimentRow.from_dict(r) for r in raw["rows"]], raw.get("environment", {}))


def aggregate(rows: Sequence[ExperimentRow]) -> list[dict]:
    """Mean metrics per label over the successful rows (seeds)."""
    groups: OrderedDict[str, list[ExperimentRow]] = OrderedDict()
    for r in rows:
        groups.setdefault(r.label, []).append(r)
    out = []
    for label, members in groups.items():
        ok = [m for m in members if m.ok]
        accs = [m.intent_accuracy for m in ok if m.intent_accuracy is not None]
        wers = [m.wer for m in ok if m.wer is not None]
        out.append({
            "label": label,
            "pipeline": members[0].pipeline,
            "reference": members[0].reference,
            "data": members[0].data,
            "seeds": sorted(m.seed for m in ok),
            "failed": [f"{m.name}: {m.failed_stage}" for m in members if not m.ok],
            "intent_accuracy": float(np.mean(accs)) if accs else None,
            "wer": float(np.mean(wers)) if wers else None,
        })
    low = next((g["intent_accuracy"] for g in out if g["reference"] == "low"), None)
    full = next((g["intent_accuracy"] for g in out if g["reference"] == "full"), None)
    for g in out:
        g["recovery"] = None
        if low is not None and full is not None and g["intent_accuracy"] is not None:
            g["recovery"] = recovery(g["intent_accuracy"], low, full)
    return out


def _pct(x: float | None) -> str:
    return "n/a" if x is None else f"{100 * x:.1f}%"


def _table(header: list[str], body: list[list[str]]) -> str:
    widths = [max(len(h), *(len(row[i]) for row in body)) if body else len(h) for i, h in enumerate(header)]

    def line(cells: list[str]) -> str:
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()

    rule = "  ".join("-" * w for w in widths)
    return "\n".join([line(header), rule, *(line(r) for r in body)])


def _status(group: dict) -> str:
    return "" if not group["failed"] else f"FAILED ({'; '.join(group['failed'])})"


def emit_report(rows: Sequence[ExperimentRow] | MetricsReport) -> tuple[str, dict]:
    """Render results as text tables and a JSON-ready dict.

    Cascade rows get AM / LM / T2I data columns with WER and accuracy; speech
    rows get accuracy and the share of the low-to-full gap they recover.
    """
    report = rows if isinstance(rows, MetricsReport) else MetricsReport(list(rows))
    if not report.rows:
        raise ValueError("no rows to report")
    groups = aggregate(report.rows)
    sections = []
    cascade = [g for g in groups if g["pipeline"] == "cascade"]
    speech = [g for g in groups if g["pipeline"] != "cascade"]
    if cascade:
        body = [[g["data"].get("am_adapt", "-"), g["data"].get("lm", "-"), g["data"].get("t2i", "-"),
                 _pct(g["wer"]), _pct(g["intent_accuracy"]), str(len(g["seeds"])), _status(g)] for g in cascade]
        sections.append("Cascade\n" + _table(["AM", "LM", "T2I", "WER", "IntAcc", "seeds", ""], body))
    if speech:
        body = [[g["label"], g["pipeline"], _pct(g["intent_accuracy"]),
                 "n/a" if g["recovery"] is None else f"{g['recovery']:.2f}", str(len(g["seeds"])), _status(g)]
                for g in speech]
        sections.append("End-to-end\n" + _table(["method", "pipeline", "IntAcc", "recovery", "seeds", ""], body))
    text = "\n\n".join(sections) + f"\n\nseeds: {report.seeds}\n"
    payload = report.to_dict()
    payload["aggregate"] = groups
    return text, payload
