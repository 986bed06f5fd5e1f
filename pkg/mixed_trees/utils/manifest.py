"""Run manifests: what a command read, what it wrote, and with which seed."""

from __future__ import annotations

from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from pydantic import BaseModel, Field

from mixed_trees import __version__
from mixed_trees.utils.io import file_sha256
from mixed_trees.utils.report_generator import write_json_report


class FileEntry(BaseModel):
    path: str
    sha256: str


class RunManifest(BaseModel):
    """No timestamps, so reruns produce identical manifests."""

    command: str
    version: str = __version__
    seed: Optional[int] = None
    config: Dict[str, Any] = Field(default_factory=dict)
    inputs: List[FileEntry] = Field(default_factory=list)
    outputs: List[FileEntry] = Field(default_factory=list)


def get_manifest_path(out_dir: Path) -> Path:
    return Path(out_dir) / "manifest.json"


def _entries(paths: Sequence[Path], root: Optional[Path] = None) -> List[FileEntry]:
    entries = []
    for path in sorted({Path(p) for p in paths}, key=str):
        shown = path.relative_to(root) if root is not None and path.is_relative_to(root) else path
        entries.append(FileEntry(path=shown.as_posix(), sha256=file_sha256(path)))
    return entries


def write_manifest(
    out_dir: Path,
    command: str,
    seed: Optional[int],
    inputs: Sequence[Path],
    outputs: Sequence[Path],
    config: Optional[Dict[str, Any]] = None,
) -> Path:
    out_dir = Path(out_dir)
    manifest = RunManifest(
        command=command,
        seed=seed,
        config=config or {},
        inputs=_entries(inputs),
        outputs=_entries(outputs, root=out_dir),
    )
    return write_json_report(manifest, get_manifest_path(out_dir))


def load_manifest(out_dir: Path) -> RunManifest:
    return RunManifest.model_validate_json(get_manifest_path(out_dir).read_text(encoding="utf-8"))
