"""Plain-text ``key=value`` files used to echo run configurations."""
from __future__ import annotations

from .errors import ParseError


def write_kv(path, mapping) -> None:
    with open(path, "w") as f:
        for key, value in mapping.items():
            text = str(value)
            if "\n" in text:
                raise ValueError(f"value for {key!r} spans lines")
            f.write(f"{key}={text}\n")


def read_kv(path) -> dict[str, str]:
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            if "=" not in line:
                raise ParseError("expected key=value", path, lineno)
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out
