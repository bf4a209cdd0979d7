"""
kvtext.py
=========
Flat `key = <JSON literal>` text, used for configs, task files and reports,
plus atomic file writes (write `<name>.tmp`, then rename).
"""

import json
import os
from pathlib import Path
from typing import Any, Iterable, List, Tuple, Type


def format_value(value: Any) -> str:
    return json.dumps(value, ensure_ascii=False)


def dump_pairs(pairs: Iterable[Tuple[str, Any]]) -> str:
    return "".join(f"{key} = {format_value(value)}\n" for key, value in pairs)


def parse_line(line: str, lineno: int, source: str, error: Type[Exception]) -> Tuple[str, Any]:
    key, sep, raw = line.partition("=")
    key = key.strip()
    if not sep or not key:
        raise error(f"{source}:{lineno}: expected 'key = value', got {line!r}")
    try:
        return key, json.loads(raw.strip())
    except json.JSONDecodeError as e:
        raise error(f"{source}:{lineno}: value for {key!r} is not a JSON literal ({e.msg})") from None


def parse_pairs(text: str, source: str, error: Type[Exception]) -> List[Tuple[str, Any, int]]:
    """(key, value, line number) per non-blank, non-comment line."""
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, value = parse_line(stripped, lineno, source, error)
        out.append((key, value, lineno))
    return out


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
