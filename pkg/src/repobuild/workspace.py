"""Session workspaces: repository materialization, inventory, and file snapshots."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import subprocess
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Optional

from .corpus import RepoRecord
from .errors import CloneError

logger = logging.getLogger(__name__)

_README_NAMES = ["readme", "readme.md", "readme.rst", "readme.txt"]

# directories never scanned for build evidence or readmes
_SCAN_IGNORE = {".git", ".hg", ".svn"}


class BuildSystemKind(Enum):
    MAKE = "Make"
    CMAKE = "CMake"
    AUTOTOOLS = "Autotools"
    MSBUILD = "MSBuild"
    QMAKE = "QMake"
    MESON = "Meson"
    CUSTOM_SCRIPT = "CustomScript"
    NONE = "None"


# report order when several kinds coexist; mirrors the build-routine priority
_KIND_ORDER = [
    BuildSystemKind.CMAKE,
    BuildSystemKind.AUTOTOOLS,
    BuildSystemKind.MAKE,
    BuildSystemKind.MESON,
    BuildSystemKind.QMAKE,
    BuildSystemKind.MSBUILD,
    BuildSystemKind.CUSTOM_SCRIPT,
]


@dataclass
class Workspace:
    """A materialized repository owned by a single session."""

    repo_id: str
    root_path: Path
    commit: str
    created_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())

    @property
    def repo_name(self) -> str:
        return self.repo_id.split("/", 1)[-1]

    @property
    def mount_path(self) -> str:
        """Fixed path where the sandbox exposes this workspace."""
        return f"/app/{self.repo_name}"


@dataclass(frozen=True)
class FileSnapshot:
    """Digest inventory of every regular file and symlink under a workspace root."""

    entries: dict  # rel path -> (size, sha256 hex, executable flag)
    taken_at: str


def _run_git(args: list, cwd: Optional[Path] = None) -> subprocess.CompletedProcess:
    return subprocess.run(
        ["git"] + args,
        cwd=cwd,
        capture_output=True,
        text=True,
        timeout=600,
    )


def _classify_clone_failure(stderr: str) -> str:
    low = stderr.lower()
    if "authentication" in low or "permission denied" in low or "403" in low:
        return "auth"
    if (
        "could not resolve" in low
        or "unable to access" in low
        or "does not exist" in low
        or "not found" in low
        or "no such file or directory" in low
        or "repository" in low and "not found" in low
    ):
        return "unreachable"
    return "other"


def prepare_workspace(record: RepoRecord, session_dir: str | Path) -> Workspace:
    """Materialize ``record`` under ``session_dir`` and pin the requested revision.

    Remote URLs and local git repositories are cloned; a plain local directory
    (no version control) is copied verbatim so fixtures work without network.
    """
    session_dir = Path(session_dir)
    if session_dir.exists() and any(session_dir.iterdir()):
        raise CloneError(f"session dir {session_dir} is not empty", kind="other")
    session_dir.mkdir(parents=True, exist_ok=True)
    dest = session_dir / record.name

    src = record.clone_url
    local = Path(src[7:]) if src.startswith("file://") else Path(src)
    if not src.startswith(("http://", "https://", "git://", "ssh://", "git@")) and local.is_dir():
        if not (local / ".git").exists():
            shutil.copytree(local, dest, symlinks=True)
            commit = record.commit or "unversioned"
            return Workspace(repo_id=record.id, root_path=dest.resolve(), commit=commit)
        src = str(local)

    proc = _run_git(["clone", src, str(dest)])
    if proc.returncode != 0:
        kind = _classify_clone_failure(proc.stderr)
        raise CloneError(f"clone of {record.clone_url} failed: {proc.stderr.strip()}", kind=kind)
    if record.commit:
        proc = _run_git(["-c", "advice.detachedHead=false", "checkout", record.commit], cwd=dest)
        if proc.returncode != 0:
            raise CloneError(
                f"revision {record.commit} not found in {record.clone_url}",
                kind="missing-revision",
            )
    proc = _run_git(["rev-parse", "HEAD"], cwd=dest)
    if proc.returncode != 0:
        raise CloneError(f"cannot resolve HEAD in {dest}: {proc.stderr.strip()}", kind="other")
    return Workspace(repo_id=record.id, root_path=dest.resolve(), commit=proc.stdout.strip())


def _digest_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def snapshot_files(ws: Workspace) -> FileSnapshot:
    """Record (size, digest, executable) for every file under the root.

    Symlinks are recorded by the digest of their target string, so a dangling
    link is still representable and a retargeted link shows up as a change.
    """
    entries = {}
    root = ws.root_path
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames[:] = sorted(d for d in dirnames if d not in _SCAN_IGNORE)
        for name in sorted(filenames):
            full = Path(dirpath) / name
            rel = str(full.relative_to(root))
            if full.is_symlink():
                target = os.readlink(full)
                digest = hashlib.sha256(target.encode("utf-8", "surrogateescape")).hexdigest()
                entries[rel] = (len(target), digest, False)
            elif full.is_file():
                st = full.stat()
                entries[rel] = (st.st_size, _digest_file(full), bool(st.st_mode & 0o111))
    return FileSnapshot(entries=entries, taken_at=datetime.now(timezone.utc).isoformat())


def save_snapshot(snapshot: FileSnapshot, path: str | Path) -> None:
    doc = {
        "taken_at": snapshot.taken_at,
        "entries": {rel: list(vals) for rel, vals in snapshot.entries.items()},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True), "utf-8")


def load_snapshot(path: str | Path) -> FileSnapshot:
    doc = json.loads(Path(path).read_text("utf-8"))
    entries = {rel: tuple(vals) for rel, vals in doc["entries"].items()}
    return FileSnapshot(entries=entries, taken_at=doc["taken_at"])


def diff_snapshots(before: FileSnapshot, after: FileSnapshot) -> dict:
    """Paths added, modified (size/digest/mode change), and removed."""
    added = sorted(set(after.entries) - set(before.entries))
    removed = sorted(set(before.entries) - set(after.entries))
    modified = sorted(
        p for p in set(before.entries) & set(after.entries)
        if before.entries[p] != after.entries[p]
    )
    return {"added": added, "modified": modified, "removed": removed}


def _evidence_kind(name: str) -> Optional[BuildSystemKind]:
    if name == "CMakeLists.txt":
        return BuildSystemKind.CMAKE
    if name in ("configure.ac", "configure.in", "configure"):
        return BuildSystemKind.AUTOTOOLS
    if name.startswith(("Makefile", "makefile")) or name == "GNUmakefile":
        return BuildSystemKind.MAKE
    if name == "meson.build":
        return BuildSystemKind.MESON
    if name.endswith(".pro"):
        return BuildSystemKind.QMAKE
    if name.endswith((".sln", ".vcxproj")):
        return BuildSystemKind.MSBUILD
    if name in ("build.sh", "compile.sh"):
        return BuildSystemKind.CUSTOM_SCRIPT
    return None


def detect_build_systems(ws: Workspace) -> list:
    """All build systems with evidence in the tree, shallowest evidence first.

    Returns (kind, relative evidence path) pairs, one per detected kind; a
    repository with no recognizable build files yields [(None kind, ".")].
    """
    found = {}  # kind -> (depth, rel path)
    root = ws.root_path
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames[:] = sorted(d for d in dirnames if d not in _SCAN_IGNORE)
        for name in sorted(filenames):
            kind = _evidence_kind(name)
            if kind is None:
                continue
            rel = str((Path(dirpath) / name).relative_to(root))
            depth = rel.count(os.sep)
            best = found.get(kind)
            if best is None or (depth, rel) < best:
                found[kind] = (depth, rel)
    if not found:
        return [(BuildSystemKind.NONE, ".")]
    return [(kind, found[kind][1]) for kind in _KIND_ORDER if kind in found]


def read_readme(ws: Workspace) -> Optional[tuple]:
    """Shallowest readme file, preferring bare README over suffixed names.

    Returns (content, relative path), or None when the repository has none.
    """
    candidates = []  # (depth, name preference, rel path)
    root = ws.root_path
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames[:] = sorted(d for d in dirnames if d not in _SCAN_IGNORE)
        for name in filenames:
            try:
                pref = _README_NAMES.index(name.lower())
            except ValueError:
                continue
            rel = str((Path(dirpath) / name).relative_to(root))
            candidates.append((rel.count(os.sep), pref, rel))
    if not candidates:
        return None
    candidates.sort()
    rel = candidates[0][2]
    content = (root / rel).read_text("utf-8", errors="replace")
    return content, rel


def list_root_entries(ws: Workspace) -> list:
    """Immediate children of the root as (name, "file"|"dir"), sorted by name."""
    out = []
    for child in sorted(ws.root_path.iterdir(), key=lambda p: p.name):
        out.append((child.name, "dir" if child.is_dir() else "file"))
    return out
