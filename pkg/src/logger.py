import dataclasses
import json
import sys
from datetime import datetime
from pathlib import Path

import jsonlines
import numpy as np
from pydantic import BaseModel


def convert_to_serializable(obj):
    """
    Recursively convert numpy values, dataclasses and pydantic models to
    JSON-ready Python values.

    Args:
        obj: Any Python object that may contain numpy arrays, Box / LabelMask
            dataclasses or config models

    Returns:
        Object made of dicts, lists, strings, numbers, booleans and None
    """
    # NumPy scalars and arrays first
    if isinstance(obj, (np.integer, np.floating, np.bool_)):
        return obj.item()
    elif isinstance(obj, np.ndarray):
        return obj.tolist()

    # Config models
    elif isinstance(obj, BaseModel):
        return obj.model_dump(mode="json")

    # Box, BoxOffset, LabelMask, loss reports ...
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {
            field.name: convert_to_serializable(getattr(obj, field.name))
            for field in dataclasses.fields(obj)
        }

    elif isinstance(obj, dict):
        return {str(key): convert_to_serializable(value) for key, value in obj.items()}

    elif isinstance(obj, (list, tuple)):
        return [convert_to_serializable(item) for item in obj]

    elif isinstance(obj, Path):
        return str(obj)

    else:
        return obj


def status(message: str) -> None:
    """Print a timestamped progress line to stderr (never to artifacts)."""
    print(f"[{datetime.now().isoformat(timespec='seconds')}] {message}", file=sys.stderr)


def write_to_log_file(message, filename, run_id=None, jsonlines_flag=False, log_dir="log"):
    """
    Append a message to a log file in the specified directory.
    Creates the directory if it doesn't exist.

    File records carry no wall-clock fields so that two runs with the same
    seed write identical logs.

    Args:
        message: The content to write
        filename: Name of the log file
        run_id: Optional run identifier stored with JSONLines records
        jsonlines_flag: If True, write as JSONLines format
        log_dir: Directory to store log files
    """
    try:
        log_path = Path(log_dir)
        log_file = log_path / filename
        log_path.mkdir(parents=True, exist_ok=True)

        if jsonlines_flag:
            processed_message = convert_to_serializable(message)
            if run_id is None:
                run_id = "default_id"
            with jsonlines.open(log_file, mode="a") as writer:
                writer.write({"id": run_id, "record": processed_message})
        else:
            with open(log_file, "a", encoding="utf-8") as f:
                f.write(json.dumps(convert_to_serializable(message)))
                f.write("\n")

    except Exception as e:
        print(f"warning: could not write to {filename}: {e}", file=sys.stderr)
