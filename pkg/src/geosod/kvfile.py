"""Plain-text ``key = value`` files used for configs and reports."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping


def dumps(items: Mapping[str, object]) -> str:
    lines = []
    for key, value in items.items():
        if isinstance(value, (list, tuple)):
            value = ",".join(_fmt(v) for v in value)
        else:
            value = _fmt(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def _fmt(v: object) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def loads(text: str, source: str = "<string>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ValueError(f"{source}:{lineno}: empty key")
        out[key] = value.strip()
    return out


def write(path: str | Path, items: Mapping[str, object]) -> None:
    Path(path).write_text(dumps(items))


def read(path: str | Path) -> dict[str, str]:
    path = Path(path)
    return loads(path.read_text(), source=str(path))


def floats(value: str) -> list[float]:
    return [float(v) for v in value.split(",") if v.strip()]


def ints(value: str) -> list[int]:
    return [int(v) for v in value.split(",") if v.strip()]


def boolean(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")
