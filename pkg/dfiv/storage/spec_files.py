"""
Flat ``key=value`` run spec files. ``#`` starts a comment; list values are comma separated.
"""
from pathlib import Path
from typing import Dict, Union

from dfiv.exceptions import InvalidSpecError


def parse_spec_text(text: str) -> Dict[str, str]:
    entries: Dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidSpecError(f"line {number}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise InvalidSpecError(f"line {number}: empty key")
        if key in entries:
            raise InvalidSpecError(f"line {number}: duplicate key {key!r}")
        entries[key] = value
    return entries


def read_spec_file(path: Union[str, Path]) -> Dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise InvalidSpecError(f"cannot read spec file {path}: {e}") from e
    return parse_spec_text(text)


def format_spec(entries: Dict[str, object]) -> str:
    lines = []
    for key, value in entries.items():
        if value is None:
            continue
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"
