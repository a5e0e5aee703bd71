"""
SQLite run ledger.

Records every run, the digest of every episode it trained or evaluated on,
and its headline metrics, so paired comparisons can be checked after the fact.
"""

import sqlite3
import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Optional

logger = logging.getLogger(__name__)

_db_path: Optional[Path] = None


@contextmanager
def get_connection():
    """Get a database connection with proper cleanup."""
    if _db_path is None:
        raise RuntimeError("run ledger not initialized; call init_db(path) first")
    conn = sqlite3.connect(_db_path)
    conn.row_factory = sqlite3.Row  # Return dicts instead of tuples
    try:
        yield conn
    finally:
        conn.close()


def is_initialized() -> bool:
    return _db_path is not None


def init_db(path) -> None:
    """Point the ledger at `path` and create tables if they don't exist."""
    global _db_path
    _db_path = Path(path)
    _db_path.parent.mkdir(parents=True, exist_ok=True)
    with get_connection() as conn:
        cursor = conn.cursor()

        cursor.execute("""
            CREATE TABLE IF NOT EXISTS runs (
                run_id INTEGER PRIMARY KEY AUTOINCREMENT,
                kind TEXT NOT NULL,
                label TEXT NOT NULL,
                config_hash TEXT NOT NULL,
                created_at TEXT DEFAULT CURRENT_TIMESTAMP
            )
        """)

        cursor.execute("""
            CREATE TABLE IF NOT EXISTS episodes (
                run_id INTEGER NOT NULL,
                phase TEXT NOT NULL,
                idx INTEGER NOT NULL,
                digest TEXT NOT NULL,
                FOREIGN KEY (run_id) REFERENCES runs(run_id),
                UNIQUE(run_id, phase, idx)
            )
        """)

        cursor.execute("""
            CREATE TABLE IF NOT EXISTS metrics (
                run_id INTEGER NOT NULL,
                key TEXT NOT NULL,
                value TEXT NOT NULL,
                FOREIGN KEY (run_id) REFERENCES runs(run_id),
                UNIQUE(run_id, key)
            )
        """)

        cursor.execute("""
            CREATE INDEX IF NOT EXISTS idx_episodes_lookup
            ON episodes(run_id, phase)
        """)

        conn.commit()
        logger.info(f"Run ledger ready at {_db_path}")


def close_db() -> None:
    global _db_path
    _db_path = None


def start_run(kind: str, label: str, config_hash: str) -> int:
    with get_connection() as conn:
        cursor = conn.cursor()
        cursor.execute(
            "INSERT INTO runs (kind, label, config_hash) VALUES (?, ?, ?)",
            (kind, label, config_hash),
        )
        conn.commit()
        return int(cursor.lastrowid)


def record_episodes(run_id: int, phase: str, digests: list[str]) -> None:
    with get_connection() as conn:
        conn.executemany(
            "INSERT OR REPLACE INTO episodes (run_id, phase, idx, digest) VALUES (?, ?, ?, ?)",
            [(run_id, phase, i, digest) for i, digest in enumerate(digests)],
        )
        conn.commit()


def episode_digests(run_id: int, phase: str) -> list[str]:
    with get_connection() as conn:
        rows = conn.execute(
            "SELECT digest FROM episodes WHERE run_id = ? AND phase = ? ORDER BY idx",
            (run_id, phase),
        ).fetchall()
        return [row['digest'] for row in rows]


def record_metrics(run_id: int, values: dict[str, object]) -> None:
    with get_connection() as conn:
        conn.executemany(
            "INSERT OR REPLACE INTO metrics (run_id, key, value) VALUES (?, ?, ?)",
            [(run_id, key, str(value)) for key, value in values.items()],
        )
        conn.commit()


def get_metrics(run_id: int) -> dict[str, str]:
    with get_connection() as conn:
        rows = conn.execute("SELECT key, value FROM metrics WHERE run_id = ?", (run_id,)).fetchall()
        return {row['key']: row['value'] for row in rows}


def get_run(run_id: int) -> Optional[dict]:
    with get_connection() as conn:
        row = conn.execute("SELECT * FROM runs WHERE run_id = ?", (run_id,)).fetchone()
        return dict(row) if row else None
