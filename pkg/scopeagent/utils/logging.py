"""
Logging utilities for the surgical image enhancement agent.
Log lines read ``message {json context}``; context values may be numpy
scalars, arrays, paths, enums or labels.
"""

import enum
import json
import logging
import sys
import time
import uuid
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

from scopeagent.config import settings

PACKAGE_LOGGER = "scopeagent"
LINE_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - [%(threadName)s] %(message)s"


def _json_default(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist() if value.size <= 16 else f"<array shape={list(value.shape)}>"
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, Path):
        return str(value)
    return str(value)


class StructuredLogger:
    """Logger with a persistent context merged into every line.

    Only the package logger gets a stderr handler; ``scopeagent.*`` children
    propagate to it.
    """

    def __init__(self, name: str, level: Optional[str] = None):
        self.logger = logging.getLogger(name)
        self.set_level(level or settings.log_level)

        if name == PACKAGE_LOGGER and not self.logger.handlers:
            handler = logging.StreamHandler(sys.stderr)
            handler.setFormatter(logging.Formatter(LINE_FORMAT))
            self.logger.addHandler(handler)

        self.context: Dict[str, Any] = {}

    def set_level(self, level: str) -> None:
        self.logger.setLevel(getattr(logging, str(level).upper(), logging.INFO))

    def set_context(self, **kwargs):
        """Set context values to include in all log messages."""
        self.context.update(kwargs)

    def clear_context(self):
        self.context.clear()

    def _format_message(self, message: str, extra: Optional[Dict[str, Any]] = None) -> str:
        fields = {**self.context, **(extra or {})}
        if not fields:
            return message
        return f"{message} {json.dumps(fields, default=_json_default)}"

    def debug(self, message: str, **kwargs):
        if self.logger.isEnabledFor(logging.DEBUG):
            self.logger.debug(self._format_message(message, kwargs))

    def info(self, message: str, **kwargs):
        self.logger.info(self._format_message(message, kwargs))

    def warning(self, message: str, **kwargs):
        self.logger.warning(self._format_message(message, kwargs))

    def error(self, message: str, **kwargs):
        self.logger.error(self._format_message(message, kwargs))

    def run_context(self, run_id: Optional[str] = None) -> str:
        """Tag every following line with a run id (random when not given) until clear_context."""
        rid = run_id or uuid.uuid4().hex[:12]
        self.set_context(run_id=rid, run_started=round(time.time(), 3))
        return rid


logger = StructuredLogger(PACKAGE_LOGGER)
