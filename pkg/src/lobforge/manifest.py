"""Run manifests: every artifact-producing command records its command
name, full config, seed, input digests, tool version, and output digests
in a JSON manifest next to its outputs. Manifests deliberately carry no
wall-clock fields so a reproduced run reproduces its manifest too.
"""

from __future__ import annotations

import hashlib
import json
import os

from . import __version__
from .errors import ConfigError


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def canonical_json(doc) -> str:
    """Deterministic JSON text: sorted keys, repr-exact floats, newline end."""
    return json.dumps(doc, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path: str, doc) -> None:
    with open(path, "w") as fh:
        fh.write(canonical_json(doc))


def build_manifest(command: str, config: dict, inputs: dict[str, str],
                   outputs: dict[str, str], seed: int | None = None) -> dict:
    return {
        "tool": "lobforge",
        "version": __version__,
        "command": command,
        "seed": seed,
        "config": config,
        "inputs": {name: {"path": path, "sha256": sha256_file(path)}
                   for name, path in inputs.items()},
        "outputs": {name: {"path": path, "sha256": sha256_file(path)}
                    for name, path in outputs.items()},
        "env": {"blas_threads": os.environ.get("OMP_NUM_THREADS", "default")},
    }


def manifest_path(output_path: str) -> str:
    return output_path + ".manifest.json"


def write_manifest(command: str, config: dict, inputs: dict[str, str],
                   outputs: dict[str, str], seed: int | None = None,
                   path: str | None = None) -> str:
    """Write the manifest next to the primary output; returns its path."""
    if not outputs:
        raise ConfigError("a manifest needs at least one output")
    doc = build_manifest(command, config, inputs, outputs, seed)
    primary = next(iter(outputs.values()))
    target = path or manifest_path(primary)
    write_json(target, doc)
    return target


def load_manifest(path: str) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    for key in ("tool", "command", "config", "inputs", "outputs"):
        if key not in doc:
            raise ConfigError(f"{path}: not a run manifest (missing '{key}')")
    return doc


def outputs_match(doc: dict) -> bool:
    """True when every recorded output still exists with the same digest."""
    for entry in doc["outputs"].values():
        path = entry["path"]
        if not os.path.exists(path) or sha256_file(path) != entry["sha256"]:
            return False
    return True


def inputs_match(doc: dict) -> bool:
    for entry in doc["inputs"].values():
        path = entry["path"]
        if not os.path.exists(path) or sha256_file(path) != entry["sha256"]:
            return False
    return True
