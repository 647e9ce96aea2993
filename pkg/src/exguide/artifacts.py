"""Artifact paths, overwrite guards and config-hash checks."""
from __future__ import annotations

import json
from pathlib import Path

from .autodiff import checkpoint


class ArtifactError(RuntimeError):
    pass


NAMES = {
    "data": "dataset.jsonl",
    "features": "encoder.ckpt",
    "index": "index.json",
}


def path_for(out, stage: str, method: str | None = None) -> Path:
    out = Path(out)
    if stage == "train":
        return out / f"{method}.ckpt"
    return out / NAMES[stage]


def guard(path, force: bool) -> Path:
    p = Path(path)
    if p.exists() and not force:
        raise ArtifactError(f"refusing to overwrite {p} (use --force)")
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def read_meta(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing artifact: {p}")
    if p.suffix == ".ckpt":
        return checkpoint.loads(p.read_bytes())[1]
    if p.suffix == ".jsonl":
        with p.open() as fh:
            return json.loads(fh.readline())
    if p.suffix == ".json":
        return json.loads(p.read_text())
    raise ArtifactError(f"no metadata reader for {p}")


def check(path, expected_hash: str) -> dict:
    meta = read_meta(path)
    found = meta.get("config_hash")
    if found != expected_hash:
        raise ArtifactError(f"config hash mismatch for {path}: expected {expected_hash}, found {found}")
    return meta


def stamp_line(meta: dict) -> str:
    """One-line header for text formats without a metadata slot."""
    return "# " + " ".join(f"{k}={meta[k]}" for k in ("config_hash", "seed", "tool_version"))
