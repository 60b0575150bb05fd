#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
File helpers for hybridgrid.

Outputs are written to a temporary file next to the target and renamed, so a
reader never sees a half-written file.
"""

import json
import os
import tempfile
from typing import Any, Callable, Dict, Mapping, Optional, Union

from ..errors import SchemaError

PathLike = Union[str, "os.PathLike[str]"]


def atomic_write(path: PathLike, writer: Callable[[str], None]) -> str:
    """
    Run writer on a temporary path and move the result onto path.

    Args:
        path: Final destination
        writer: Callable receiving the temporary file path

    Returns:
        str: The destination path
    """
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", suffix=os.path.splitext(path)[1], dir=directory)
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise
    return path


def atomic_write_text(path: PathLike, text: str) -> str:
    """Write text to path atomically (UTF-8)."""

    def _write(tmp: str) -> None:
        with open(tmp, "w", encoding="utf-8") as f:
            f.write(text)

    return atomic_write(path, _write)


def read_json(path: PathLike) -> Dict[str, Any]:
    """
    Read a JSON object from path.

    Raises:
        SchemaError: if the file cannot be parsed or is not an object
    """
    path = os.fspath(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise SchemaError(path, f"invalid JSON ({e.msg} at line {e.lineno})") from e
    if not isinstance(data, dict):
        raise SchemaError(path, "top level must be an object")
    return data


def require(mapping: Mapping[str, Any], key: str, where: str, default: Optional[Any] = ...) -> Any:
    """
    Fetch key from mapping or raise a SchemaError naming the field path.

    Args:
        mapping: Parsed JSON object
        key: Field name
        where: Path of mapping inside the document, e.g. "buses[3]"
        default: Value returned when the key is absent; omitted means required
    """
    if not isinstance(mapping, Mapping):
        raise SchemaError(where, "expected an object")
    if key in mapping:
        return mapping[key]
    if default is not ...:
        return default
    raise SchemaError(f"{where}.{key}" if where else key, "missing field")
