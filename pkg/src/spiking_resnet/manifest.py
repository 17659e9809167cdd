"""Run manifests: every CLI command records its config, seeds, input file
digests, and output digests, so a run is reproducible from the manifest
alone. CSV artifacts carry a versioned schema comment line so downstream
plotting never silently drifts."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None = None
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    tool_version: str = __version__
    started_utc: str = ""
    wall_seconds: float = 0.0

    def __post_init__(self):
        if not self.started_utc:
            self.started_utc = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
        self._t0 = time.monotonic()

    def add_input(self, path) -> None:
        self.inputs[str(path)] = sha256_file(path)

    def add_output(self, path) -> None:
        self.outputs[str(path)] = sha256_file(path)

    def write(self, run_dir) -> Path:
        self.wall_seconds = round(time.monotonic() - self._t0, 3)
        path = Path(run_dir) / "manifest.json"
        payload = {k: v for k, v in asdict(self).items() if not k.startswith("_")}
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return path


def load_manifest(run_dir) -> dict:
    return json.loads((Path(run_dir) / "manifest.json").read_text())


def write_csv(path, schema: str, header: list[str], rows) -> None:
    """Plain CSV with a `# schema: <name> v<N>` first line."""
    lines = [f"# schema: {schema}", ",".join(header)]
    for row in rows:
        lines.append(",".join("" if v is None else f"{v}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n")
