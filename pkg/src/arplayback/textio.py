"""Small helpers shared by the line-oriented and key-value file formats."""

from __future__ import annotations

import math
import sys
from pathlib import Path
from typing import Iterator

from .errors import FormatError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


def fmt(x: float) -> str:
    """Shortest string that parses back to exactly ``x``."""
    return repr(float(x))


def fmt_values(values) -> str:
    return " ".join(fmt(v) for v in values)


def read_text(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: cannot read ({exc})") from exc


def data_lines(text: str, source: str = "<input>") -> Iterator[tuple[int, list[str]]]:
    """``(line number, tokens)`` for every non-blank, non-comment line."""
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield n, line.split()


def parse_floats(tokens, where: str) -> list[float]:
    try:
        values = [float(t) for t in tokens]
    except ValueError as exc:
        raise FormatError(f"{where}: {exc}") from exc
    if not all(math.isfinite(v) for v in values):
        raise FormatError(f"{where}: non-finite number")
    return values


def load_toml(path) -> dict:
    text = read_text(path)
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def require(table: dict, key: str, where: str):
    if key not in table:
        raise FormatError(f"{where}: missing field {key!r}")
    return table[key]


def write_key_values(path, items) -> None:
    """``key = value`` lines, one per item, in the given order."""
    lines = [f"{k} = {fmt(v) if isinstance(v, float) else v}" for k, v in items]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_key_values(path) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(read_text(path).splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{n}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out
