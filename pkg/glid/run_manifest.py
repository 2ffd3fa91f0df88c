"""
Run manifest: one JSON document per command describing what ran and what it produced
"""
import json
import sys
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from config_settings import RunConfig, config_hash


@dataclass
class RunManifest:
    command: List[str]
    config: Optional[Dict[str, Any]] = None
    config_hash: Optional[str] = None
    outputs: Dict[str, str] = field(default_factory=dict)
    started_at: str = ''
    finished_at: str = ''
    wall_clock_seconds: float = 0.0
    final_metrics: Dict[str, float] = field(default_factory=dict)
    status: str = 'running'
    exit_code: Optional[int] = None
    error: Optional[str] = None
    _t0: float = field(default=0.0, repr=False)

    @classmethod
    def start(cls, cfg: Optional[RunConfig] = None, argv: Optional[List[str]] = None) -> 'RunManifest':
        manifest = cls(command=list(argv if argv is not None else sys.argv))
        manifest.started_at = datetime.now(timezone.utc).isoformat()
        manifest._t0 = time.perf_counter()
        if cfg is not None:
            manifest.attach_config(cfg)
        return manifest

    def attach_config(self, cfg: RunConfig):
        self.config = cfg.to_dict()
        self.config_hash = config_hash(cfg)

    def add_output(self, kind: str, path: Union[str, Path]):
        self.outputs[kind] = str(path)

    def finish(self, exit_code: int, final_metrics: Optional[Dict[str, float]] = None, error: Optional[str] = None):
        self.finished_at = datetime.now(timezone.utc).isoformat()
        self.wall_clock_seconds = round(time.perf_counter() - self._t0, 3)
        self.exit_code = exit_code
        self.status = 'ok' if exit_code == 0 else 'failed'
        self.error = error
        if final_metrics:
            self.final_metrics.update(final_metrics)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data.pop('_t0')
        return data

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + '\n', encoding='utf-8')
        return path


def manifest_path(out: Union[str, Path]) -> Path:
    out = Path(out)
    return out.with_name(out.name + '.manifest.json')
