# database.py - Run and result registry for Ion Lifetime Twin
import json
import logging
import os
import sqlite3
from datetime import datetime
from typing import Any, Dict, List, Optional

from analysis import LifetimeResult
from config import config

logger = logging.getLogger(__name__)

EXPECTED_TABLES = ['runs', 'lifetime_results', 'pull_studies']


def get_db_connection():
    """Get database connection with registry configuration."""
    db_path = config.DATABASE_PATH
    directory = os.path.dirname(db_path)
    if directory:
        os.makedirs(directory, exist_ok=True)

    conn = sqlite3.connect(db_path, timeout=30.0)
    conn.row_factory = sqlite3.Row
    conn.execute('PRAGMA foreign_keys = ON')
    conn.execute('PRAGMA journal_mode = WAL')

    return conn


def init_db():
    """Create the registry tables."""
    conn = get_db_connection()
    cursor = conn.cursor()

    # One row per simulate / measure-irf invocation
    cursor.execute('''
    CREATE TABLE IF NOT EXISTS runs (
        id INTEGER PRIMARY KEY AUTOINCREMENT,
        command TEXT NOT NULL,
        transition TEXT,
        seed INTEGER,
        code_version TEXT,
        out_dir TEXT,
        manifest TEXT,
        created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
    )
    ''')

    cursor.execute('''
    CREATE TABLE IF NOT EXISTS lifetime_results (
        id INTEGER PRIMARY KEY AUTOINCREMENT,
        run_id INTEGER,
        trap_label TEXT NOT NULL,
        tau_ns REAL NOT NULL,
        stat_error_ns REAL NOT NULL,
        sys_error_ns REAL NOT NULL,
        final_error_ns REAL NOT NULL,
        combine_rule TEXT NOT NULL,
        n_inputs INTEGER DEFAULT 1,
        source TEXT,
        diagnostics TEXT,
        created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP,
        FOREIGN KEY (run_id) REFERENCES runs (id) ON DELETE SET NULL
    )
    ''')

    cursor.execute('''
    CREATE TABLE IF NOT EXISTS pull_studies (
        id INTEGER PRIMARY KEY AUTOINCREMENT,
        config_source TEXT,
        master_seed INTEGER,
        n_repeats INTEGER NOT NULL,
        tau_true_ns REAL NOT NULL,
        pull_mean REAL,
        pull_width REAL,
        relative_spread REAL,
        summary TEXT,
        created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
    )
    ''')

    cursor.execute('CREATE INDEX IF NOT EXISTS idx_results_label ON lifetime_results (trap_label)')

    conn.commit()
    conn.close()
    logger.info(f"Registry initialized at {config.DATABASE_PATH}")


def save_run(command: str, manifest: Dict[str, Any], out_dir: str) -> int:
    """Store a run manifest and return its id."""
    conn = get_db_connection()
    try:
        cursor = conn.cursor()
        cursor.execute('''
            INSERT INTO runs (command, transition, seed, code_version, out_dir, manifest, created_at)
            VALUES (?, ?, ?, ?, ?, ?, ?)
        ''', (
            command,
            manifest.get('config', {}).get('transition'),
            manifest.get('seed'),
            manifest.get('code_version'),
            out_dir,
            json.dumps(manifest),
            manifest.get('created_at') or datetime.now().isoformat(timespec='seconds'),
        ))
        conn.commit()
        return int(cursor.lastrowid)
    finally:
        conn.close()


def get_runs(limit: int = 50) -> List[Dict[str, Any]]:
    conn = get_db_connection()
    try:
        rows = conn.execute('SELECT * FROM runs ORDER BY id DESC LIMIT ?', (limit,)).fetchall()
        runs = []
        for row in rows:
            run = dict(row)
            run['manifest'] = json.loads(run['manifest']) if run['manifest'] else {}
            runs.append(run)
        return runs
    finally:
        conn.close()


def save_lifetime_result(result: LifetimeResult, source: str = '', run_id: Optional[int] = None,
                         diagnostics: Optional[Dict[str, Any]] = None) -> int:
    conn = get_db_connection()
    try:
        cursor = conn.cursor()
        cursor.execute('''
            INSERT INTO lifetime_results (
                run_id, trap_label, tau_ns, stat_error_ns, sys_error_ns, final_error_ns,
                combine_rule, n_inputs, source, diagnostics
            ) VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
        ''', (
            run_id, result.trap_label, result.tau_ns, result.stat_error_ns, result.sys_error_ns,
            result.final_error_ns, result.combine_rule, result.n_inputs, source,
            json.dumps(diagnostics) if diagnostics else None,
        ))
        conn.commit()
        logger.debug(f"Stored result {result.trap_label} tau={result.tau_ns:.5f} ns from {source}")
        return int(cursor.lastrowid)
    finally:
        conn.close()


def get_lifetime_results(labels: Optional[List[str]] = None) -> List[LifetimeResult]:
    """Stored results in insertion order, optionally restricted to trap labels."""
    conn = get_db_connection()
    try:
        query = 'SELECT * FROM lifetime_results'
        params: List[Any] = []
        if labels:
            query += f" WHERE trap_label IN ({', '.join('?' for _ in labels)})"
            params.extend(labels)
        rows = conn.execute(query + ' ORDER BY id', params).fetchall()
        return [LifetimeResult.from_dict(dict(row)) for row in rows]
    finally:
        conn.close()


def save_pull_study(summary: Dict[str, Any], config_source: str = '') -> int:
    conn = get_db_connection()
    try:
        cursor = conn.cursor()
        cursor.execute('''
            INSERT INTO pull_studies (
                config_source, master_seed, n_repeats, tau_true_ns, pull_mean, pull_width,
                relative_spread, summary
            ) VALUES (?, ?, ?, ?, ?, ?, ?, ?)
        ''', (
            config_source, summary.get('master_seed'), summary['n_repeats'], summary['tau_true_ns'],
            summary.get('pull_mean'), summary.get('pull_width'), summary.get('relative_spread'),
            json.dumps(summary),
        ))
        conn.commit()
        return int(cursor.lastrowid)
    finally:
        conn.close()


def get_database_statistics() -> Dict[str, Any]:
    """Row counts per registry table, with missing tables reported."""
    conn = get_db_connection()
    try:
        tables = [row[0] for row in conn.execute(
            "SELECT name FROM sqlite_master WHERE type='table' ORDER BY name").fetchall()]
        stats = {}
        for table in EXPECTED_TABLES:
            if table in tables:
                stats[table] = conn.execute(f"SELECT COUNT(*) FROM {table}").fetchone()[0]
        missing = sorted(set(EXPECTED_TABLES) - set(tables))
        return {'healthy': not missing, 'missing_tables': missing, 'stats': stats}
    finally:
        conn.close()
