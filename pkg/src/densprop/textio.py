"""Line-oriented `key = value` text files shared by configs, metadata and reports."""

from __future__ import annotations

import numpy as np


def fmt_float(x) -> str:
    """Format a float with 17 significant digits (lossless double round-trip)."""
    return format(float(x), ".17g")


def fmt_float_list(values) -> str:
    return ",".join(fmt_float(v) for v in np.asarray(values, dtype=float).ravel())


def parse_float_list(text: str) -> np.ndarray:
    text = text.strip()
    if not text:
        return np.empty(0)
    return np.array([float(tok) for tok in text.split(",")], dtype=float)


def parse_int_list(text: str) -> list[int]:
    text = text.strip()
    if not text:
        return []
    return [int(tok) for tok in text.split(",")]


class KeyValueError(ValueError):
    """Malformed line in a key = value document."""


def parse_kv(text: str, source: str = "<string>") -> dict[str, str]:
    """Parse `key = value` lines; '#' starts a comment, blank lines ignored.

    Keys keep their dotted form; values are raw strings (caller converts).
    Duplicate keys are an error so configs stay unambiguous.
    """
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise KeyValueError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise KeyValueError(f"{source}:{lineno}: empty key")
        if key in out:
            raise KeyValueError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def format_kv(items: dict[str, str]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in items.items())


def read_kv(path) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_kv(fh.read(), source=str(path))


def write_kv(path, items: dict[str, str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_kv(items))
