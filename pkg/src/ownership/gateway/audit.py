"""
Audit logging for security-relevant gateway events.
"""

import logging
import logging.handlers
from pathlib import Path
from typing import Any, Dict, Optional

import orjson
import structlog

from ..clock import SimulatedClock
from ..trace import EventTrace

_AUDIT_LOGGER_NAME = "ownership.audit"


class AuditLogger:
    """Writes one JSON object per event and mirrors it into the event trace."""

    def __init__(
        self,
        log_file: Optional[str] = None,
        trace: Optional[EventTrace] = None,
        clock: Optional[SimulatedClock] = None,
    ):
        """Initialize the audit logger.

        Args:
            log_file: Path to the audit log file. If None, events go through structlog.
            trace: Event trace that receives a copy of every entry
            clock: Source of event timestamps (simulated milliseconds)
        """
        self.trace = trace
        self.clock = clock or (trace.clock if trace is not None else SimulatedClock())
        self._file_logger: Optional[logging.Logger] = None
        self._fallback = structlog.get_logger(_AUDIT_LOGGER_NAME)

        if log_file:
            log_path = Path(log_file)
            log_path.parent.mkdir(parents=True, exist_ok=True)
            self._file_logger = logging.getLogger(f"{_AUDIT_LOGGER_NAME}.{log_path.resolve()}")
            self._file_logger.setLevel(logging.INFO)
            self._file_logger.propagate = False
            # Prevent duplicate handlers
            if not self._file_logger.handlers:
                # 5MB per file, 5 backups
                handler = logging.handlers.RotatingFileHandler(
                    filename=log_path,
                    maxBytes=5 * 1024 * 1024,
                    backupCount=5,
                    encoding="utf-8",
                )
                handler.setFormatter(logging.Formatter("%(message)s"))
                self._file_logger.addHandler(handler)

    def _emit(self, entry: Dict[str, Any], severity: str = "info", private: bool = False) -> None:
        if self._file_logger is not None:
            log_method = getattr(self._file_logger, severity.lower(), self._file_logger.info)
            log_method(orjson.dumps(entry, option=orjson.OPT_SORT_KEYS).decode("utf-8"))
        else:
            fields = {k: v for k, v in entry.items() if k != "event_type"}
            getattr(self._fallback, severity.lower(), self._fallback.info)(entry["event_type"], **fields)
        if self.trace is not None:
            kind = entry["event_type"].split(".", 1)[-1] if entry["event_type"].startswith("gateway.") else "audit"
            self.trace.record("gateway", kind, entry, actor=entry.get("principal"), private=private)

    def log_event(
        self,
        event_type: str,
        message: str,
        principal: Optional[str] = None,
        operation: Optional[str] = None,
        **extra: Any,
    ) -> None:
        """Log a gateway event.

        Args:
            event_type: Type of event (e.g. 'gateway.request', 'gateway.principal_registered')
            message: Human-readable description of the event
            principal: Address of the calling principal
            operation: ``module.op`` name of the requested operation
            **extra: Additional context data to include in the log
        """
        entry: Dict[str, Any] = {
            "time": self.clock.now(),
            "event_type": event_type,
            "message": message,
        }
        if principal is not None:
            entry["principal"] = principal
        if operation is not None:
            entry["operation"] = operation
        entry.update(extra)
        self._emit(entry)

    def log_request(
        self,
        operation: str,
        decision: str,
        principal: Optional[str],
        nonce: Optional[int] = None,
        status_code: int = 200,
        **extra: Any,
    ) -> None:
        """Log one mediated request with its authorization decision."""
        self.log_event(
            event_type="gateway.request",
            message=f"{operation} -> {decision} ({status_code})",
            principal=principal,
            operation=operation,
            decision=decision,
            nonce=nonce,
            status_code=status_code,
            **extra,
        )

    def log_security_event(
        self,
        event_type: str,
        message: str,
        severity: str = "warning",
        principal: Optional[str] = None,
        **extra: Any,
    ) -> None:
        """Log an authentication or authorization failure."""
        entry: Dict[str, Any] = {
            "time": self.clock.now(),
            "event_type": f"gateway.security.{event_type}",
            "severity": severity.upper(),
            "message": message,
        }
        if principal is not None:
            entry["principal"] = principal
        entry.update(extra)
        self._emit(entry, severity=severity)
