"""Logging configuration and line-delimited run logs."""
import json
import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

_CONFIGURED = False


def configure_logging(level: Union[str, int] = "INFO") -> None:
    """Install a single stream handler on the package root logger."""
    global _CONFIGURED
    root = logging.getLogger("src")
    if isinstance(level, str):
        level = logging.getLevelName(level.upper())
    root.setLevel(level)
    if _CONFIGURED:
        return
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)-7s %(name)s: %(message)s", "%H:%M:%S"))
    root.addHandler(handler)
    _CONFIGURED = True


def progress_disabled(quiet: bool = False) -> bool:
    """tqdm bars are off when quiet or when stderr is not a terminal."""
    return quiet or not sys.stderr.isatty()


class RunLog:
    """Append-only JSONL log of per-epoch scalars."""

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path is not None else None
        self.records: List[Dict[str, Any]] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, **fields: Any) -> Dict[str, Any]:
        record = {"time": datetime.now().isoformat(timespec="seconds"), **fields}
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as f:
                f.write(json.dumps(record, default=float) + "\n")
        return record

    @staticmethod
    def read(path: Union[str, Path]) -> List[Dict[str, Any]]:
        with open(path) as f:
            return [json.loads(line) for line in f if line.strip()]
