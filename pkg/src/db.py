"""
Potential-solve cache.

SQLite store of assembled added-mass sets and Kirchhoff densities keyed by a
geometry hash, plus a small key/value table for per-config run state.
"""

import json
import logging
import os
import sqlite3
import time
from typing import Any, Dict, Optional, Tuple

import numpy as np

from .geometry import BodyInertia, ControlBasis, SurfaceMesh, mesh_hash
from .potential import AddedMassSet, ExteriorNeumannSolver, PotentialTables

logger = logging.getLogger(__name__)

DB_NAME = 'potentials.db'
REQUIRED_TABLES = {'runtime_state', 'added_mass'}


def init_database(cache_dir: str) -> str:
    """
    Create the cache database and its tables if needed.

    Safe to call multiple times - uses CREATE TABLE IF NOT EXISTS.

    Returns:
        Path to the database file
    """
    os.makedirs(cache_dir, exist_ok=True)
    db_path = os.path.join(cache_dir, DB_NAME)
    conn = sqlite3.connect(db_path)
    try:
        conn.execute('''
            CREATE TABLE IF NOT EXISTS runtime_state (
                key TEXT PRIMARY KEY,
                value TEXT NOT NULL
            )
        ''')
        conn.execute('''
            CREATE TABLE IF NOT EXISTS added_mass (
                geometry_hash TEXT PRIMARY KEY,
                document TEXT NOT NULL,
                created_at REAL NOT NULL
            )
        ''')
        conn.commit()
        logger.info(f"Cache database initialized: {db_path}")
        return db_path
    finally:
        conn.close()


def cache_key(mesh: SurfaceMesh, controls: Optional[ControlBasis], inertia: BodyInertia,
              near_factor: float = 2.0) -> str:
    """Hash of the mesh, control profiles, inertia and quadrature setting."""
    extra = [inertia.inertia, np.array([inertia.mass, near_factor])]
    if controls is not None and controls.m:
        extra.insert(0, controls.values)
    return mesh_hash(mesh, *extra)


def get_state(db_path: str, key: str) -> Optional[str]:
    conn = sqlite3.connect(db_path)
    try:
        row = conn.execute('SELECT value FROM runtime_state WHERE key = ?', (key,)).fetchone()
        return row[0] if row else None
    finally:
        conn.close()


def set_state(db_path: str, key: str, value: str) -> None:
    conn = sqlite3.connect(db_path)
    try:
        conn.execute('INSERT OR REPLACE INTO runtime_state (key, value) VALUES (?, ?)', (key, value))
        conn.commit()
    finally:
        conn.close()


def put_cached_tables(db_path: str, key: str, tables: PotentialTables, mats: AddedMassSet) -> None:
    """
    Store the added-mass set and the Kirchhoff densities under key.

    Floats go through JSON, whose repr round-trips doubles exactly.
    """
    document = {
        'added_mass': mats.to_dict(),
        'sigmas': tables.sigmas.tolist(),
        'data': tables.data.tolist(),
    }
    conn = sqlite3.connect(db_path)
    try:
        conn.execute(
            'INSERT OR REPLACE INTO added_mass (geometry_hash, document, created_at) VALUES (?, ?, ?)',
            (key, json.dumps(document, sort_keys=True), time.time())
        )
        conn.commit()
        logger.info(f"cached potentials for geometry {key[:12]}")
    finally:
        conn.close()


def get_cached_tables(db_path: str, key: str,
                      solver: ExteriorNeumannSolver) -> Optional[Tuple[PotentialTables, AddedMassSet]]:
    """
    Rebuild (tables, mats) from the cache, or None on a miss.

    The solver must belong to the mesh the key was computed from; boundary
    traces are recomputed from the stored densities.
    """
    conn = sqlite3.connect(db_path)
    try:
        row = conn.execute('SELECT document FROM added_mass WHERE geometry_hash = ?', (key,)).fetchone()
    finally:
        conn.close()
    if row is None:
        return None
    document: Dict[str, Any] = json.loads(row[0])
    sigmas = np.asarray(document['sigmas'], dtype=float)
    if sigmas.shape[1] != solver.mesh.n_panels:
        logger.warning(f"cache entry {key[:12]} does not match the mesh; ignoring it")
        return None
    tables = PotentialTables(solver=solver, sigmas=sigmas, data=np.asarray(document['data'], dtype=float))
    mats = AddedMassSet.from_dict(document['added_mass'])
    logger.info(f"loaded cached potentials for geometry {key[:12]}")
    return tables, mats


def validate_database_schema(db_path: str) -> bool:
    """True if the database exists and has every required table."""
    if not os.path.exists(db_path):
        return False
    conn = sqlite3.connect(db_path)
    try:
        cursor = conn.execute("SELECT name FROM sqlite_master WHERE type='table'")
        tables = {row[0] for row in cursor.fetchall()}
        missing = REQUIRED_TABLES - tables
        if missing:
            logger.error(f"Database schema validation failed: missing tables {missing}")
            return False
        return True
    except sqlite3.Error as e:
        logger.error(f"Database schema validation error: {e}")
        return False
    finally:
        conn.close()
