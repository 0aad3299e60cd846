"""
Manifest database for artifacts.

Each artifact directory (dataset, checkpoint, sample set, run) carries a
SQLite manifest that records every file in it with its role, seed
provenance and creation parameters.
"""
import json
import logging
import sqlite3
from contextlib import contextmanager
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import pandas as pd

from ..models.schemas import ArtifactRole, ManifestEntry
from ..utils.errors import StoreError

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.db"


class ManifestDatabase:
    """SQLite manifest rooted at an artifact directory."""

    def __init__(self, root: Union[str, Path], create: bool = True):
        self.root = Path(root)
        self.db_path = self.root / MANIFEST_FILE
        if not create and not self.db_path.exists():
            raise StoreError(f"no manifest at {self.root}")
        self.root.mkdir(parents=True, exist_ok=True)
        self._create_tables()

    @contextmanager
    def get_connection(self):
        """Connection with automatic commit/rollback."""
        try:
            conn = sqlite3.connect(str(self.db_path))
        except sqlite3.Error as e:
            raise StoreError(f"cannot open manifest {self.db_path}: {e}") from e
        conn.row_factory = sqlite3.Row
        try:
            yield conn
            conn.commit()
        except sqlite3.Error as e:
            conn.rollback()
            raise StoreError(f"manifest {self.db_path}: {e}") from e
        except Exception:
            conn.rollback()
            raise
        finally:
            conn.close()

    def _create_tables(self):
        with self.get_connection() as conn:
            cursor = conn.cursor()
            cursor.execute("""
                CREATE TABLE IF NOT EXISTS entries (
                    name TEXT PRIMARY KEY,
                    path TEXT UNIQUE NOT NULL,
                    role TEXT NOT NULL,
                    seed INTEGER,
                    problem_kind TEXT,
                    params TEXT,
                    created_at TEXT
                )
            """)
            cursor.execute("CREATE INDEX IF NOT EXISTS idx_entry_role ON entries(role)")

    def register(self, entry: ManifestEntry, replace: bool = True) -> ManifestEntry:
        """Insert an entry; paths are stored relative to the manifest root."""
        path = Path(entry.path)
        if path.is_absolute() and path.is_relative_to(self.root.resolve()):
            path = path.relative_to(self.root.resolve())
        elif not path.is_absolute() and path.is_relative_to(self.root):
            path = path.relative_to(self.root)
        verb = "INSERT OR REPLACE" if replace else "INSERT"
        with self.get_connection() as conn:
            conn.execute(f"""
                {verb} INTO entries (name, path, role, seed, problem_kind, params, created_at)
                VALUES (?, ?, ?, ?, ?, ?, ?)
            """, (
                entry.name,
                str(path),
                entry.role.value,
                entry.seed,
                entry.problem_kind,
                json.dumps(entry.params, default=str, sort_keys=True),
                entry.created_at.isoformat(),
            ))
        logger.debug("registered %s (%s) in %s", entry.name, entry.role.value, self.root)
        return entry.model_copy(update={"path": str(path)})

    def add(self, name: str, path: Union[str, Path], role: ArtifactRole, seed: Optional[int] = None,
            problem_kind: Optional[str] = None, **params: Any) -> ManifestEntry:
        return self.register(ManifestEntry(name=name, path=str(path), role=role, seed=seed,
                                           problem_kind=problem_kind, params=params))

    @staticmethod
    def _row_to_entry(row: sqlite3.Row) -> ManifestEntry:
        return ManifestEntry(
            name=row["name"],
            path=row["path"],
            role=ArtifactRole(row["role"]),
            seed=row["seed"],
            problem_kind=row["problem_kind"],
            params=json.loads(row["params"] or "{}"),
            created_at=datetime.fromisoformat(row["created_at"]),
        )

    def get_entry(self, name: str) -> Optional[ManifestEntry]:
        with self.get_connection() as conn:
            row = conn.execute("SELECT * FROM entries WHERE name = ?", (name,)).fetchone()
            return self._row_to_entry(row) if row else None

    def require(self, name: str) -> ManifestEntry:
        entry = self.get_entry(name)
        if entry is None:
            raise StoreError(f"manifest {self.root} has no entry '{name}'")
        return entry

    def resolve(self, entry: Union[str, ManifestEntry]) -> Path:
        if isinstance(entry, str):
            entry = self.require(entry)
        return self.root / entry.path

    def list_entries(self, role: Optional[ArtifactRole] = None, limit: int = 10000) -> List[ManifestEntry]:
        with self.get_connection() as conn:
            if role:
                rows = conn.execute("SELECT * FROM entries WHERE role = ? ORDER BY name LIMIT ?",
                                    (role.value, limit)).fetchall()
            else:
                rows = conn.execute("SELECT * FROM entries ORDER BY name LIMIT ?", (limit,)).fetchall()
            return [self._row_to_entry(r) for r in rows]

    def get_statistics(self) -> Dict[str, Any]:
        with self.get_connection() as conn:
            total = conn.execute("SELECT COUNT(*) AS total FROM entries").fetchone()["total"]
            by_role = {row["role"]: row["count"] for row in conn.execute(
                "SELECT role, COUNT(*) AS count FROM entries GROUP BY role").fetchall()}
            kinds = [row["problem_kind"] for row in conn.execute(
                "SELECT DISTINCT problem_kind FROM entries WHERE problem_kind IS NOT NULL").fetchall()]
        missing = [e.name for e in self.list_entries() if not self.resolve(e).exists()]
        return {
            "root": str(self.root),
            "total_entries": total,
            "by_role": by_role,
            "problem_kinds": sorted(kinds),
            "missing_files": missing,
        }

    def to_frame(self, role: Optional[ArtifactRole] = None) -> pd.DataFrame:
        rows = [e.model_dump(mode="json") for e in self.list_entries(role)]
        return pd.DataFrame(rows, columns=list(ManifestEntry.model_fields))

    def export_to_json(self, output_path: Union[str, Path], role: Optional[ArtifactRole] = None) -> int:
        frame = self.to_frame(role)
        frame.to_json(output_path, orient="records", indent=2)
        return len(frame)

    def export_to_csv(self, output_path: Union[str, Path], role: Optional[ArtifactRole] = None) -> int:
        frame = self.to_frame(role)
        if frame.empty:
            return 0
        frame = frame.assign(params=frame["params"].map(lambda p: json.dumps(p, sort_keys=True)))
        frame.to_csv(output_path, index=False)
        return len(frame)
