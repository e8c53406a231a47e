"""A full-scan executor for the toy SQL dialect.

    SELECT [DISTINCT] col FROM table [WHERE col = literal [AND col = literal ...]] [;]

Malformed queries never raise; they evaluate to an ``ExecutionFailure``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, FrozenSet, List, Sequence, Tuple, Union


@dataclass(frozen=True)
class ExecutionFailure:
    reason: str

    def __eq__(self, other):  # a failed query never matches anything
        return False

    def __hash__(self):
        return hash(("ExecutionFailure", self.reason))


Denotation = Union[FrozenSet[Tuple[str, ...]], ExecutionFailure]


class ToyDatabase:
    def __init__(self, tables: Dict[str, Tuple[Sequence[str], Sequence[Sequence]]]):
        self.tables: Dict[str, Tuple[List[str], List[list]]] = {}
        for name, (columns, rows) in tables.items():
            columns = list(columns)
            if len(set(columns)) != len(columns):
                raise ValueError(f"duplicate column names in table {name!r}")
            rows = [list(r) for r in rows]
            for r in rows:
                if len(r) != len(columns):
                    raise ValueError(f"row width mismatch in table {name!r}: {r}")
            self.tables[name] = (columns, rows)

    @classmethod
    def from_json(cls, data: dict) -> "ToyDatabase":
        return cls({k: (v["columns"], v["rows"]) for k, v in data.items()})

    def to_json(self) -> dict:
        return {k: {"columns": c, "rows": r} for k, (c, r) in self.tables.items()}

    @classmethod
    def load(cls, path) -> "ToyDatabase":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)
            fh.write("\n")


def _tokenize(lf: str) -> List[str]:
    lf = lf.replace("=", " = ").replace(";", " ; ")
    return lf.split()


def execute_lf(lf: str, db: ToyDatabase) -> Denotation:
    toks = _tokenize(lf)
    if toks and toks[-1] == ";":
        toks = toks[:-1]
    if len(toks) < 4 or toks[0].upper() != "SELECT":
        return ExecutionFailure("expected SELECT")
    i = 1
    if toks[i].upper() == "DISTINCT":
        i += 1
    col = toks[i]
    if i + 1 >= len(toks) or toks[i + 1].upper() != "FROM" or i + 2 >= len(toks):
        return ExecutionFailure("expected FROM table")
    table = toks[i + 2]
    if table not in db.tables:
        return ExecutionFailure(f"unknown table {table!r}")
    columns, rows = db.tables[table]
    if col not in columns:
        return ExecutionFailure(f"unknown column {col!r}")
    rest = toks[i + 3:]
    conditions = []
    if rest:
        if rest[0].upper() != "WHERE":
            return ExecutionFailure("expected WHERE")
        rest = rest[1:]
        while True:
            if len(rest) < 3 or rest[1] != "=":
                return ExecutionFailure("malformed condition")
            c, lit = rest[0], rest[2]
            if c not in columns:
                return ExecutionFailure(f"unknown column {c!r}")
            conditions.append((columns.index(c), lit))
            rest = rest[3:]
            if not rest:
                break
            if rest[0].upper() != "AND":
                return ExecutionFailure("expected AND")
            rest = rest[1:]
    k = columns.index(col)
    return frozenset(
        (str(r[k]),) for r in rows if all(str(r[j]) == lit for j, lit in conditions)
    )
