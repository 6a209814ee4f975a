# datamanager.py
"""
SQLite-backed registry of experiments and their stages.

One row per experiment in the shared `experiments` table; every experiment
owns a `stages_{experiment_id}` table (one row per stage, keyed by content
key) and a `metrics_{experiment_id}` table holding the imported JSONL
streams. The registry drives resume: a stage whose content key is already
COMPLETE is skipped.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, List, Optional, Union

import pandas as pd
from sqlalchemy import Engine, create_engine, inspect, text

logger = logging.getLogger(__name__)

STAGE_STATUSES = ("RUNNING", "COMPLETE")
REGISTRY_FILE = "registry.db"


def registry_engine(output_dir: Union[str, Path]) -> Engine:
    path = Path(output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return create_engine(f"sqlite:///{path / REGISTRY_FILE}", echo=False, future=True)


class RunStore:
    def __init__(self, engine: Engine):
        self.engine = engine
        self.ensure_schema()

    def ensure_schema(self):
        """Shared tables, created once per database."""
        with self.engine.begin() as conn:
            conn.exec_driver_sql("""
            CREATE TABLE IF NOT EXISTS experiments (
              experiment_id    INTEGER PRIMARY KEY,
              experiment_name  TEXT NOT NULL UNIQUE,
              seed             INTEGER NOT NULL
            );
            """)

    # --------- per-experiment table names ---------

    @staticmethod
    def stage_table_name(experiment_id: int) -> str:
        """stages_{experiment_id}: one row per stage run"""
        return f"stages_{experiment_id}"

    @staticmethod
    def metrics_table_name(experiment_id: int) -> str:
        """metrics_{experiment_id}: imported metrics streams, tagged by stage"""
        return f"metrics_{experiment_id}"

    # --------- experiments ---------

    def create_experiment(self, experiment_name: str, seed: int) -> int:
        """
        Register an experiment (or return the existing id for `experiment_name`)
        and create its stage table.
        """
        with self.engine.begin() as conn:
            existing = conn.execute(text(
                "SELECT experiment_id FROM experiments WHERE experiment_name=:n"
            ), {"n": experiment_name}).scalar()
            if existing is None:
                conn.execute(text("INSERT INTO experiments(experiment_name, seed) VALUES (:n, :s)"),
                             {"n": experiment_name, "s": seed})
                existing = conn.execute(text(
                    "SELECT experiment_id FROM experiments WHERE experiment_name=:n"
                ), {"n": experiment_name}).scalar_one()
            stages = RunStore.stage_table_name(existing)
            conn.exec_driver_sql(f"""
                CREATE TABLE IF NOT EXISTS "{stages}" (
                    stage_id     INTEGER PRIMARY KEY AUTOINCREMENT,
                    stage_index  INTEGER NOT NULL,
                    stage_name   TEXT NOT NULL,
                    kind         TEXT NOT NULL,
                    content_key  TEXT NOT NULL UNIQUE,
                    status       TEXT NOT NULL CHECK(status IN ('RUNNING', 'COMPLETE')),
                    output_dir   TEXT NOT NULL
                );
            """)
        return int(existing)

    def list_experiments(self) -> List[Dict]:
        """All experiments as dicts sorted by experiment_id."""
        with self.engine.begin() as conn:
            rows = conn.execute(text(
                "SELECT experiment_id, experiment_name, seed FROM experiments ORDER BY experiment_id"
            )).fetchall()
        return [{"experiment_id": r[0], "experiment_name": r[1], "seed": r[2]} for r in rows]

    def delete_experiment(self, experiment_id: int) -> bool:
        """Drop the experiment's tables and its registry row. Returns True on success."""
        try:
            with self.engine.begin() as conn:
                for table_name in (RunStore.stage_table_name(experiment_id),
                                   RunStore.metrics_table_name(experiment_id)):
                    conn.exec_driver_sql(f'DROP TABLE IF EXISTS "{table_name}"')
                conn.execute(text("DELETE FROM experiments WHERE experiment_id = :eid"),
                             {"eid": experiment_id})
            return True
        except Exception as e:
            logger.error("error deleting experiment %s: %s", experiment_id, e)
            return False

    # --------- stages ---------

    def register_stage(self, experiment_id: int, stage_index: int, stage_name: str, kind: str,
                       content_key: str, output_dir: Union[str, Path]) -> None:
        """Mark a stage RUNNING; re-registering the same content key resets it."""
        stages = RunStore.stage_table_name(experiment_id)
        with self.engine.begin() as conn:
            conn.execute(text(f'DELETE FROM "{stages}" WHERE content_key = :k'), {"k": content_key})
            conn.execute(text(
                f'INSERT INTO "{stages}"(stage_index, stage_name, kind, content_key, status, output_dir) '
                "VALUES (:i, :n, :kind, :k, 'RUNNING', :o)"
            ), {"i": stage_index, "n": stage_name, "kind": kind, "k": content_key, "o": str(output_dir)})

    def complete_stage(self, experiment_id: int, content_key: str) -> bool:
        stages = RunStore.stage_table_name(experiment_id)
        try:
            with self.engine.begin() as conn:
                updated = conn.execute(text(
                    f"UPDATE \"{stages}\" SET status = 'COMPLETE' WHERE content_key = :k"
                ), {"k": content_key}).rowcount
            if not updated:
                logger.warning("stage %s was never registered in experiment %s", content_key, experiment_id)
            return bool(updated)
        except Exception as e:
            logger.error("error completing stage %s: %s", content_key, e)
            return False

    def completed_output(self, experiment_id: int, content_key: str) -> Optional[str]:
        """Output directory of a COMPLETE stage with this content key, else None."""
        stages = RunStore.stage_table_name(experiment_id)
        if stages not in inspect(self.engine).get_table_names():
            return None
        with self.engine.begin() as conn:
            return conn.execute(text(
                f"SELECT output_dir FROM \"{stages}\" WHERE content_key = :k AND status = 'COMPLETE'"
            ), {"k": content_key}).scalar()

    def stages_frame(self, experiment_id: int) -> pd.DataFrame:
        stages = RunStore.stage_table_name(experiment_id)
        return pd.read_sql(text(f'SELECT * FROM "{stages}" ORDER BY stage_index, stage_id'), self.engine)

    # --------- metrics ---------

    def import_metrics(self, experiment_id: int, stage_name: str, metrics_path: Union[str, Path]) -> bool:
        """Append a JSONL metrics stream to the experiment's metrics table."""
        try:
            frame = pd.read_json(metrics_path, orient="records", lines=True)
        except ValueError as e:
            logger.error("cannot read metrics %s: %s", metrics_path, e)
            return False
        if frame.empty:
            return True
        frame = frame.map(lambda v: ",".join(map(str, v)) if isinstance(v, list) else v)
        frame.insert(0, "stage_name", stage_name)
        table = RunStore.metrics_table_name(experiment_id)
        existing = self.metrics_frame(experiment_id)
        if not existing.empty:
            # streams differ in columns (pretrain adds dev loss), so the table is rewritten
            frame = pd.concat([existing[existing["stage_name"] != stage_name], frame], ignore_index=True)
        frame.to_sql(table, self.engine, if_exists="replace", index=False, method="multi", chunksize=1000)
        return True

    def metrics_frame(self, experiment_id: int, stage_name: Optional[str] = None) -> pd.DataFrame:
        table = RunStore.metrics_table_name(experiment_id)
        if table not in inspect(self.engine).get_table_names():
            return pd.DataFrame()
        query = f'SELECT * FROM "{table}"'
        params = {}
        if stage_name is not None:
            query += " WHERE stage_name = :n"
            params["n"] = stage_name
        return pd.read_sql(text(query), self.engine, params=params)
