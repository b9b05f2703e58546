# stages/run_ledger.py

import json
import logging
import uuid
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

logger = logging.getLogger("RunLedger")


class RunLedger:
    """Append-only JSON log of CLI runs, one file per day under <workdir>/audit_logs."""

    def __init__(self, audit_log_path: str = "runs/default/audit_logs"):
        self.audit_log_path = Path(audit_log_path)

    def log_run(
        self,
        command: str,
        config_digest: str,
        artifacts: Optional[List[str]] = None,
        status: str = "ok",
        details: Optional[Dict[str, Any]] = None,
    ) -> str:
        """Log one command invocation"""
        log_entry = {
            "log_id": str(uuid.uuid4()),
            "timestamp": datetime.now().isoformat(),
            "event_type": "command_run",
            "command": command,
            "config_digest": config_digest,
            "artifacts": [str(a) for a in artifacts or []],
            "status": status,
            "details": details or {},
        }
        return self._save_log_entry(log_entry)

    def get_audit_trail(self, config_digest: str) -> List[Dict[str, Any]]:
        """All events for one resolved config, oldest first"""
        audit_trail = []
        for log_file in sorted(self.audit_log_path.glob("audit_*.json")):
            with open(log_file, "r") as f:
                try:
                    logs = json.load(f)
                except json.JSONDecodeError:
                    logger.warning("Skipping unreadable ledger file %s", log_file)
                    continue
            audit_trail.extend(log for log in logs if log.get("config_digest") == config_digest)
        audit_trail.sort(key=lambda x: x["timestamp"])
        return audit_trail

    def _save_log_entry(self, log_entry: Dict[str, Any]) -> str:
        self.audit_log_path.mkdir(parents=True, exist_ok=True)
        date_str = datetime.now().strftime("%Y%m%d")
        log_file = self.audit_log_path / f"audit_{date_str}.json"

        logs = []
        if log_file.exists():
            try:
                with open(log_file, "r") as f:
                    logs = json.load(f)
            except (json.JSONDecodeError, FileNotFoundError):
                logs = []

        logs.append(log_entry)
        with open(log_file, "w") as f:
            json.dump(logs, f, indent=2)
        logger.debug("Logged %s event: %s", log_entry["command"], log_entry["log_id"])
        return log_entry["log_id"]
