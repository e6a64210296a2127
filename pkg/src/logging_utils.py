"""
Run journal for immersed-body experiments.

Append-only JSONL records (one sorted-key object per line) written under a
process-wide lock, plus readers used by the CLI and tests.
"""

import json
import logging
import os
import threading
import time
from typing import Any, Dict, List, Optional

import numpy as np

logger = logging.getLogger(__name__)

JOURNAL_NAME = 'run.jsonl'

# Serializes appends from worker threads
_write_lock = threading.Lock()


def _plain(value: Any) -> Any:
    """numpy scalars and arrays to JSON-native values."""
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def append_jsonl(filepath: str, obj: Dict[str, Any]) -> None:
    """
    Append exactly one JSON object per line to a JSONL file.

    Args:
        filepath: Path to the JSONL file; its directory is created if needed
        obj: Record to append

    Raises:
        TypeError: If obj is not a dict or not serializable
        OSError: If the write fails
    """
    if not isinstance(obj, dict):
        raise TypeError(f"Object must be a dictionary, got {type(obj)}")
    try:
        json_line = json.dumps(obj, separators=(',', ':'), sort_keys=True, default=_plain)
    except TypeError as e:
        raise TypeError(f"Object is not JSON serializable: {e}")

    os.makedirs(os.path.dirname(filepath) or '.', exist_ok=True)
    with _write_lock:
        try:
            with open(filepath, 'a', encoding='utf-8') as f:
                f.write(json_line + '\n')
            logger.debug(f"Appended journal entry to {filepath}: {obj.get('kind', 'unknown')}")
        except OSError as e:
            logger.error(f"Failed to write to {filepath}: {e}")
            raise


def journal_event(out_dir: str, kind: str, **payload: Any) -> Dict[str, Any]:
    """Append a {'ts', 'kind', ...payload} record to <out_dir>/run.jsonl and return it."""
    record = {'ts': time.time(), 'kind': kind}
    record.update(payload)
    append_jsonl(os.path.join(out_dir, JOURNAL_NAME), record)
    return record


def read_jsonl(filepath: str) -> List[Dict[str, Any]]:
    """
    Read all records of a JSONL file.

    Raises:
        FileNotFoundError: If the file doesn't exist
        ValueError: If a line is not valid JSON
    """
    if not os.path.exists(filepath):
        raise FileNotFoundError(f"JSONL file not found: {filepath}")
    records = []
    with open(filepath, 'r', encoding='utf-8') as f:
        for line_num, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ValueError(f"Invalid JSON on line {line_num} of {filepath}: {e}")
    return records


def get_latest_jsonl_entry(filepath: str) -> Optional[Dict[str, Any]]:
    """Last record of the file, or None if it is missing or empty."""
    try:
        records = read_jsonl(filepath)
    except (FileNotFoundError, ValueError, OSError):
        return None
    return records[-1] if records else None


def filter_jsonl_by_kind(filepath: str, kind: str) -> List[Dict[str, Any]]:
    try:
        return [obj for obj in read_jsonl(filepath) if obj.get('kind') == kind]
    except (FileNotFoundError, ValueError, OSError):
        return []


def validate_jsonl_format(filepath: str) -> tuple:
    """
    Returns:
        (is_valid, message); a missing file counts as a valid empty journal
    """
    if not os.path.exists(filepath):
        return True, "File does not exist (valid empty state)"
    try:
        records = read_jsonl(filepath)
    except (ValueError, OSError) as e:
        return False, str(e)
    for i, obj in enumerate(records, 1):
        if not isinstance(obj, dict):
            return False, f"Record {i}: JSON value is not an object"
        if 'kind' not in obj:
            return False, f"Record {i}: missing 'kind'"
    return True, "Valid JSONL format"
