"""A minimal named table: ordered columns, list-of-dict rows."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    return str(v)


@dataclass
class Table:
    name: str
    columns: list[str]
    rows: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        return [r[name] for r in self.rows]

    def lookup(self, key_column, key):
        for r in self.rows:
            if r[key_column] == key:
                return r
        raise KeyError(key)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([_cell(r.get(c)) for c in self.columns])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"name": self.name, "columns": list(self.columns), "rows": self.rows, "meta": self.meta}

    @classmethod
    def from_dict(cls, d) -> "Table":
        return cls(d["name"], list(d["columns"]), list(d["rows"]), dict(d.get("meta", {})))
