"""Reader/writer for the sectioned text format shared by calibration and
campaign files.

Layout::

    emfi-surface v1          <- magic + schema version, first line
    # comment
    [section]                <- key = value lines
    voltage_slope = 25
    [anchors]                <- tabular section: CSV header row, then rows
    model,timing,...
    resnet50,during,...

Which sections are tabular is decided by the caller.  Values written as
``a/b`` are accepted wherever a number is expected.
"""

from __future__ import annotations

import csv
import io
import os
import tempfile
from fractions import Fraction
from pathlib import Path


class FormatError(ValueError):
    """Malformed file, with the offending line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaVersionError(FormatError):
    pass


def parse_number(text: str) -> float:
    text = text.strip()
    try:
        if "/" in text:
            num, den = text.split("/", 1)
            return float(Fraction(num.strip()) / Fraction(den.strip()))
        return float(text)
    except (ValueError, ZeroDivisionError) as exc:
        raise FormatError(f"not a number: {text!r}") from exc


def parse_sectioned(text: str, magic: str, version: int, tables: set[str]):
    """Parse ``text`` into ``{section: dict | list[dict]}``.

    Keys of key-value sections other than the first unnamed/"main" one are
    not prefixed; callers flatten as they see fit.
    """
    lines = text.splitlines()
    if not lines:
        raise FormatError("empty file", 1)
    head = lines[0].split()
    if len(head) != 2 or head[0] != magic:
        raise FormatError(f"expected header '{magic} v{version}'", 1)
    if head[1] != f"v{version}":
        raise SchemaVersionError(
            f"unsupported schema version {head[1]!r} (this build reads v{version})", 1)

    sections: dict[str, dict | list] = {}
    current = None
    table_lines: dict[str, list[tuple[int, str]]] = {}
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current in sections:
                raise FormatError(f"duplicate section [{current}]", lineno)
            if current in tables:
                sections[current] = []
                table_lines[current] = []
            else:
                sections[current] = {}
            continue
        if current is None:
            raise FormatError("content before first section", lineno)
        if current in tables:
            table_lines[current].append((lineno, line))
        else:
            if "=" not in line:
                raise FormatError(f"expected 'key = value' in [{current}]", lineno)
            key, value = (s.strip() for s in line.split("=", 1))
            sections[current][key] = value

    for name, rows in table_lines.items():
        if not rows:
            continue
        header_line, header = rows[0]
        columns = [c.strip() for c in next(csv.reader([header]))]
        for lineno, row_text in rows[1:]:
            cells = [c.strip() for c in next(csv.reader([row_text]))]
            if len(cells) != len(columns):
                raise FormatError(
                    f"[{name}] row has {len(cells)} cells, header has {len(columns)}", lineno)
            row = dict(zip(columns, cells))
            row["_line"] = lineno
            sections[name].append(row)
    return sections


def format_table(columns: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    writer.writerows(rows)
    return buf.getvalue()


def atomic_write(path: str | os.PathLike, data: str | bytes) -> Path:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path
