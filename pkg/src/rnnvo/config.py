"""Key-value configuration files.

One ``section.field = value`` per line, ``#`` starts a comment. Sections are
``net`` (:class:`NetConfig`), ``loss`` (:class:`LossWeights`) and ``train``
(:class:`TrainConfig` schedule fields). Values are JSON literals; bare words
are read as strings.
"""
from __future__ import annotations

import json
from dataclasses import fields
from pathlib import Path
from typing import Any, Dict


class ConfigError(ValueError):
    pass


def parse_value(text: str) -> Any:
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def read_config(path) -> Dict[str, Dict[str, Any]]:
    out: Dict[str, Dict[str, Any]] = {"net": {}, "loss": {}, "train": {}}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in out or not name:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[section][name] = parse_value(value)
    return out


def write_config(path, sections: Dict[str, Dict[str, Any]]) -> None:
    lines = []
    for section, values in sections.items():
        for name, value in values.items():
            lines.append(f"{section}.{name} = {json.dumps(value)}")
    Path(path).write_text("\n".join(lines) + "\n")


def check_fields(cls, values: Dict[str, Any], section: str) -> None:
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown {section} fields: {sorted(unknown)}")
