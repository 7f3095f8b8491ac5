"""Relational database model: schema manifests, typed tables and validation.

A database is a set of CSV files described by a JSON manifest::

    {"tables": [{"name": "users", "file": "users.csv", "time_column": null,
                 "columns": [{"name": "user_id", "type": "primary_key"}, ...]}]}

Cells are parsed into Python values per column type. Keys stay as their raw
strings, numerics become floats, timestamps become integer epoch seconds
(UTC). Nulls are ``None`` except for text, where null reads as ``""``.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

SEMANTIC_TYPES = ("primary_key", "foreign_key", "numeric", "categorical", "text", "timestamp")


class SchemaError(ValueError):
    """Malformed or inconsistent schema manifest."""


class DataError(ValueError):
    """A table file does not match its declared schema."""


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    semantic_type: str
    target: str | None = None
    nullable: bool = False

    def to_dict(self) -> dict:
        d = {"name": self.name, "type": self.semantic_type}
        if self.semantic_type == "foreign_key":
            d["target"] = self.target
        d["nullable"] = self.nullable
        return d


@dataclass(frozen=True)
class TableSpec:
    name: str
    file: str
    columns: tuple[ColumnSpec, ...]
    time_column: str | None = None

    @property
    def primary_key(self) -> str:
        return next(c.name for c in self.columns if c.semantic_type == "primary_key")

    @property
    def foreign_keys(self) -> list[ColumnSpec]:
        return [c for c in self.columns if c.semantic_type == "foreign_key"]

    def column(self, name: str) -> ColumnSpec:
        for c in self.columns:
            if c.name == name:
                return c
        raise KeyError(f"table {self.name!r} has no column {name!r}")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "file": self.file,
            "time_column": self.time_column,
            "columns": [c.to_dict() for c in self.columns],
        }


@dataclass(frozen=True)
class SchemaManifest:
    tables: tuple[TableSpec, ...]
    path: str = ""

    def table(self, name: str) -> TableSpec:
        for t in self.tables:
            if t.name == name:
                return t
        raise KeyError(f"unknown table {name!r}")

    @property
    def table_names(self) -> list[str]:
        return [t.name for t in self.tables]

    def to_dict(self) -> dict:
        return {"tables": [t.to_dict() for t in self.tables]}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _require(obj, key, ctx, kind=None):
    if not isinstance(obj, dict) or key not in obj:
        raise SchemaError(f"{ctx}: missing field {key!r}")
    val = obj[key]
    if kind is not None and not isinstance(val, kind):
        raise SchemaError(f"{ctx}.{key}: expected {kind.__name__}, got {type(val).__name__}")
    return val


def parse_manifest(doc: dict, path: str = "") -> SchemaManifest:
    raw_tables = _require(doc, "tables", path or "manifest", list)
    tables = []
    seen_tables = set()
    for ti, rt in enumerate(raw_tables):
        ctx = f"tables[{ti}]"
        name = _require(rt, "name", ctx, str)
        if name in seen_tables:
            raise SchemaError(f"{ctx}.name: duplicate table name {name!r}")
        seen_tables.add(name)
        file = rt.get("file") or f"{name}.csv"
        time_column = rt.get("time_column")
        cols = []
        seen_cols = set()
        for ci, rc in enumerate(_require(rt, "columns", ctx, list)):
            cctx = f"{ctx}.columns[{ci}]"
            cname = _require(rc, "name", cctx, str)
            ctype = _require(rc, "type", cctx, str)
            if ctype not in SEMANTIC_TYPES:
                raise SchemaError(f"{cctx}.type: unknown semantic type {ctype!r}")
            if cname in seen_cols:
                raise SchemaError(f"{cctx}.name: duplicate column name {cname!r} in table {name!r}")
            seen_cols.add(cname)
            target = None
            if ctype == "foreign_key":
                target = _require(rc, "target", cctx, str)
            nullable = bool(rc.get("nullable", False))
            cols.append(ColumnSpec(cname, ctype, target, nullable))
        n_pk = sum(c.semantic_type == "primary_key" for c in cols)
        if n_pk != 1:
            raise SchemaError(f"{ctx}: table {name!r} must have exactly one primary_key column, found {n_pk}")
        if time_column is not None:
            tc = next((c for c in cols if c.name == time_column), None)
            if tc is None or tc.semantic_type != "timestamp":
                raise SchemaError(f"{ctx}.time_column: {time_column!r} is not a timestamp column of {name!r}")
        tables.append(TableSpec(name, file, tuple(cols), time_column))
    for ti, t in enumerate(tables):
        for c in t.foreign_keys:
            if c.target not in seen_tables:
                raise SchemaError(f"tables[{ti}].{c.name}: unknown fkey target {c.target!r}")
    return SchemaManifest(tuple(tables), path)


def load_manifest(path: str | os.PathLike) -> SchemaManifest:
    path = str(path)
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
    return parse_manifest(doc, path)


# -- cell parsing -----------------------------------------------------------

def parse_timestamp(cell: str) -> int:
    """Integer epoch seconds; ISO dates parse as midnight UTC."""
    s = cell.strip()
    try:
        return int(s)
    except ValueError:
        pass
    if s.endswith("Z"):
        s = s[:-1] + "+00:00"
    dt = datetime.fromisoformat(s)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def format_float(x: float) -> str:
    # repr is the shortest string that round-trips
    return repr(float(x))


def _parse_cell(cell: str, col: ColumnSpec):
    if cell == "":
        if col.semantic_type == "text":
            return ""
        if col.semantic_type == "primary_key" or not col.nullable:
            raise ValueError("null in non-nullable column")
        return None
    t = col.semantic_type
    if t in ("primary_key", "foreign_key", "categorical", "text"):
        return cell
    if t == "numeric":
        return float(cell)
    return parse_timestamp(cell)


def _format_cell(value, col: ColumnSpec) -> str:
    if value is None:
        return ""
    if col.semantic_type == "numeric":
        return format_float(value)
    if col.semantic_type == "timestamp":
        return str(int(value))
    return str(value)


@dataclass
class Table:
    """Typed table. Storage is column-major: ``columns[name]`` is a list of cells."""

    spec: TableSpec
    columns: dict[str, list]

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def time_column(self) -> str | None:
        return self.spec.time_column

    def __len__(self) -> int:
        return len(self.columns[self.spec.primary_key])

    @property
    def rows(self) -> list[tuple]:
        names = [c.name for c in self.spec.columns]
        return list(zip(*(self.columns[n] for n in names)))

    def times(self, null=None) -> np.ndarray:
        """Time-column values as int64 (``null`` substituted for missing)."""
        if self.time_column is None:
            raise ValueError(f"table {self.name!r} has no time column")
        fill = np.iinfo(np.int64).min if null is None else null
        return np.array([fill if v is None else v for v in self.columns[self.time_column]], dtype=np.int64)


@dataclass
class Database:
    manifest: SchemaManifest
    tables: dict[str, Table]
    manifest_path: str = ""
    dangling: dict[tuple[str, str], int] = field(default_factory=dict)
    _pk_index: dict = field(default_factory=dict, repr=False)
    _fk_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for t in self.tables.values():
            self._check_table(t)
        for t in self.tables.values():
            for c in t.spec.foreign_keys:
                idx = self.resolve_fkey(t.name, c.name)
                vals = t.columns[c.name]
                n_null = sum(v is None for v in vals)
                self.dangling[(t.name, c.name)] = int((idx < 0).sum()) - n_null

    def _check_table(self, t: Table):
        n = len(t)
        for c in t.spec.columns:
            if len(t.columns[c.name]) != n:
                raise DataError(f"table {t.name!r}: column {c.name!r} has {len(t.columns[c.name])} cells, expected {n}")
        index = {}
        for i, v in enumerate(t.columns[t.spec.primary_key]):
            if v is None:
                raise DataError(f"table {t.name!r} row {i}: null primary key")
            if v in index:
                raise DataError(f"table {t.name!r} row {i}: duplicate primary key {v!r}")
            index[v] = i
        self._pk_index[t.name] = index

    @property
    def dangling_fkeys(self) -> int:
        return sum(self.dangling.values())

    def row_counts(self) -> dict[str, int]:
        return {name: len(t) for name, t in self.tables.items()}

    def pkey_index(self, table: str) -> dict:
        return self._pk_index[table]

    def resolve_fkey(self, table: str, column: str) -> np.ndarray:
        """Row index in the target table per fkey cell; -1 if null or dangling."""
        key = (table, column)
        if key not in self._fk_cache:
            t = self.tables[table]
            col = t.spec.column(column)
            index = self._pk_index[col.target]
            out = np.fromiter((index.get(v, -1) if v is not None else -1 for v in t.columns[column]),
                              dtype=np.int64, count=len(t))
            self._fk_cache[key] = out
        return self._fk_cache[key]


def _load_table(spec: TableSpec, directory: Path) -> Table:
    path = directory / spec.file
    if not path.exists():
        raise DataError(f"missing table file {path}")
    names = [c.name for c in spec.columns]
    cols: dict[str, list] = {n: [] for n in names}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != names:
            raise DataError(f"{path}: header mismatch, expected {names}, got {header}")
        for rownum, row in enumerate(reader):
            if len(row) != len(names):
                raise DataError(f"{path}: table {spec.name!r} row {rownum}: expected {len(names)} cells, got {len(row)}")
            for col, cell in zip(spec.columns, row):
                try:
                    cols[col.name].append(_parse_cell(cell, col))
                except ValueError as e:
                    raise DataError(
                        f"table {spec.name!r} row {rownum} column {col.name!r}: cannot parse {cell!r} "
                        f"as {col.semantic_type} ({e})") from None
    return Table(spec, cols)


def load_database(manifest: SchemaManifest, directory: str | os.PathLike | None = None) -> Database:
    if directory is None:
        directory = Path(manifest.path).parent
    directory = Path(directory)
    tables = {spec.name: _load_table(spec, directory) for spec in manifest.tables}
    return Database(manifest, tables, manifest.path)


def write_table(table: Table, path: str | os.PathLike):
    specs = table.spec.columns
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([c.name for c in specs])
        for row in table.rows:
            w.writerow([_format_cell(v, c) for v, c in zip(row, specs)])


def write_database(db: Database, directory: str | os.PathLike, manifest_name: str = "manifest.json") -> Path:
    """Serialize all tables plus the manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for spec in db.manifest.tables:
        write_table(db.tables[spec.name], directory / spec.file)
    mpath = directory / manifest_name
    mpath.write_text(db.manifest.dumps(), encoding="utf-8")
    return mpath


@dataclass
class ValidationReport:
    row_counts: dict[str, int]
    null_fractions: dict[str, dict[str, float]]
    dangling: dict[str, int]
    time_ranges: dict[str, tuple[int | None, int | None]]

    @property
    def total_dangling(self) -> int:
        return sum(self.dangling.values())

    def to_dict(self) -> dict:
        return {
            "row_counts": self.row_counts,
            "null_fractions": self.null_fractions,
            "dangling": self.dangling,
            "total_dangling": self.total_dangling,
            "time_ranges": {k: list(v) for k, v in self.time_ranges.items()},
        }


def validate(db: Database) -> ValidationReport:
    nulls = {}
    ranges = {}
    for name, t in db.tables.items():
        n = len(t)
        fr = {}
        for c in t.spec.columns:
            vals = t.columns[c.name]
            missing = sum(1 for v in vals if v is None or (c.semantic_type == "text" and v == ""))
            fr[c.name] = missing / n if n else 0.0
        nulls[name] = fr
        if t.time_column is not None:
            ts = [v for v in t.columns[t.time_column] if v is not None]
            ranges[name] = (min(ts), max(ts)) if ts else (None, None)
    dangling = {f"{t}.{c}": n for (t, c), n in sorted(db.dangling.items())}
    return ValidationReport(db.row_counts(), nulls, dangling, ranges)
