"""Tabular metric records with provenance and content hashing."""

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field, asdict


@dataclass
class MetricsRow:
    """One experiment cell's measurements, with full provenance."""

    method: str
    budget: float
    prompt: str
    seed: int
    purification: str = "none"
    transfer: str = "self"
    subject: str = ""
    config_hash: str = ""
    metrics: dict = field(default_factory=dict)

    def flat(self) -> dict:
        out = asdict(self)
        metrics = out.pop("metrics")
        for k in sorted(metrics):
            out[k] = metrics[k]
        return out


def _fmt(v) -> str:
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)

    def add(self, row: MetricsRow) -> None:
        self.rows.append(row)

    def columns(self) -> list:
        cols = []
        for row in self.rows:
            for k in row.flat():
                if k not in cols:
                    cols.append(k)
        return cols

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = self.columns()
        writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            flat = {k: _fmt(v) for k, v in row.flat().items()}
            writer.writerow({c: flat.get(c, "") for c in cols})
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps([row.flat() for row in self.rows], indent=2, default=_fmt)

    def content_hash(self) -> str:
        """sha256 over the canonical CSV serialization of the rows."""
        return hashlib.sha256(self.to_csv().encode()).hexdigest()

    def save(self, csv_path, json_path=None) -> str:
        from pathlib import Path
        Path(csv_path).parent.mkdir(parents=True, exist_ok=True)
        Path(csv_path).write_text(self.to_csv())
        if json_path is not None:
            Path(json_path).write_text(self.to_json())
        return self.content_hash()
