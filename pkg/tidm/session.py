import json
import logging
import os
import threading
from typing import Any, Dict, List, Optional, Tuple

from . import __version__
from .config import flatten
from .models.schemas import AppConfig

logger = logging.getLogger(__name__)

MANIFEST_NAME = "run.manifest"


class RunSession:
    """Collects what one CLI run consumed and produced, then writes ``run.manifest``.

    The manifest has no timestamps or host details, so two runs with the same
    config and seed write identical files.
    """

    def __init__(self, command: str, config: AppConfig, out_dir: Optional[str] = None):
        self.command = command
        self.config = config
        self.out_dir = out_dir or config.out_dir
        self._lock = threading.Lock()
        self._seeds: Dict[str, int] = {"seed": config.seed}
        self._checkpoints: Dict[str, Tuple[str, str]] = {}
        self._outputs: List[str] = []

    def record_seed(self, name: str, seed: int) -> None:
        with self._lock:
            self._seeds[name] = int(seed)

    def record_checkpoint(self, role: str, path: str, checksum: str) -> None:
        with self._lock:
            self._checkpoints[role] = (self._relative(path), checksum)

    def record_output(self, path: str) -> None:
        with self._lock:
            self._outputs.append(self._relative(path))

    def checkpoints(self) -> Dict[str, Tuple[str, str]]:
        with self._lock:
            return dict(self._checkpoints)

    def _relative(self, path: str) -> str:
        return os.path.relpath(os.path.abspath(path), os.path.abspath(self.out_dir))

    def lines(self) -> List[str]:
        with self._lock:
            lines = [f"tool tidm {__version__}", f"command {self.command}"]
            lines += [f"config {key} {json.dumps(value)}" for key, value in sorted(flatten(self.config).items())]
            lines += [f"seed {name} {value}" for name, value in sorted(self._seeds.items())]
            lines += [f"checkpoint {role} {path} {checksum}" for role, (path, checksum) in sorted(self._checkpoints.items())]
            lines += [f"output {path}" for path in self._outputs]
        return lines

    def write(self) -> str:
        """Write ``<out_dir>/run.manifest`` (``<out_dir>/<command>.run.manifest`` keeps per-command history)."""
        os.makedirs(self.out_dir, exist_ok=True)
        text = "".join(line + "\n" for line in self.lines())
        path = os.path.join(self.out_dir, MANIFEST_NAME)
        for target in (path, os.path.join(self.out_dir, f"{self.command}.{MANIFEST_NAME}")):
            tmp = f"{target}.tmp"
            with open(tmp, "w", encoding="utf-8") as handle:
                handle.write(text)
            os.replace(tmp, target)
        logger.info("Session: wrote %s", path)
        return path
