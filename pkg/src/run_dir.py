"""
Run directory management.
Every command writes into one directory; timestamps live only in manifest.json.
"""

import os
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

from src import __version__
from src.utils import get_output_root, write_json

MANIFEST = "manifest.json"


class RunDirectory:
    def __init__(self, command: str, arguments: Optional[Dict[str, Any]] = None,
                 path: Optional[os.PathLike] = None, root: Optional[os.PathLike] = None):
        self.command = command
        self.arguments = dict(arguments or {})
        self.run_id = self._generate_run_id(command)
        if path is None:
            path = Path(root) if root is not None else get_output_root()
            path = path / self.run_id
        self.path = Path(path)
        self.started_at = datetime.now().isoformat()
        self.finished_at: Optional[str] = None
        self.status = "running"
        self.artifacts: List[str] = []

    def _generate_run_id(self, command: str) -> str:
        return f"{command}_{datetime.now().strftime('%Y%m%d_%H%M%S_%f')}"

    def create(self) -> Path:
        self.path.mkdir(parents=True, exist_ok=True)
        self.save_manifest()
        return self.path

    def file(self, name: str) -> Path:
        target = self.path / name
        target.parent.mkdir(parents=True, exist_ok=True)
        rel = str(Path(name).as_posix())
        if rel not in self.artifacts:
            self.artifacts.append(rel)
        return target

    def finish(self, status: str = "ok"):
        self.status = status
        self.finished_at = datetime.now().isoformat()
        self.save_manifest()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "run_id": self.run_id,
            "command": self.command,
            "arguments": self.arguments,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "status": self.status,
            "version": __version__,
            "artifacts": sorted(self.artifacts),
        }

    def save_manifest(self) -> Path:
        return write_json(self.to_dict(), self.path / MANIFEST)

