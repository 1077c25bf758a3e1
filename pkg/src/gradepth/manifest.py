"""Run manifests: enough recorded state to replay any CLI invocation.

Replaying the stored argv with the same tool version reproduces the
outputs (bit-identically under the direct solver backend).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone

from .fileio import atomic_write_text

__all__ = ["RunManifest", "sha256_file", "write_manifest", "read_manifest"]

MANIFEST_NAME = "manifest.json"


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    seeds: dict
    tool_version: str
    started_utc: str = ""
    wall_s: float = 0.0
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.started_utc:
            self.started_utc = datetime.now(timezone.utc).isoformat()

    def add_input(self, name: str, path: str) -> None:
        self.inputs[name] = {"path": str(path), "sha256": sha256_file(path)}

    def add_output(self, name: str, path: str) -> None:
        self.outputs[name] = {"path": str(path), "sha256": sha256_file(path)}

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "argv": list(self.argv),
            "config": self.config,
            "seeds": self.seeds,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "tool_version": self.tool_version,
            "started_utc": self.started_utc,
            "wall_s": self.wall_s,
        }


def write_manifest(out_dir: str, manifest: RunManifest) -> str:
    path = os.path.join(out_dir, MANIFEST_NAME)
    atomic_write_text(path, json.dumps(manifest.to_dict(), indent=2) + "\n")
    return path


def read_manifest(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
