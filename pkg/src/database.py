"""
Run registry connection and helper functions
"""

import logging
import os
from contextlib import contextmanager
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv
from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker

from models import Base, EvalResult, Run

load_dotenv()
logger = logging.getLogger(__name__)

# Database setup
DATABASE_PATH = os.getenv('MESM_DATABASE_PATH', 'runs/registry.db')

engine = None
SessionLocal = None


def configure_database(path: Optional[str] = None):
    """Point the registry at a SQLite file (default MESM_DATABASE_PATH)"""
    global engine, SessionLocal, DATABASE_PATH
    DATABASE_PATH = str(path or DATABASE_PATH)
    Path(DATABASE_PATH).parent.mkdir(parents=True, exist_ok=True)
    engine = create_engine(f'sqlite:///{DATABASE_PATH}', echo=False)
    SessionLocal = sessionmaker(bind=engine)
    return engine


def init_database(path: Optional[str] = None):
    """Create all tables in the registry"""
    configure_database(path)
    Base.metadata.create_all(engine)
    logger.info(f"✅ Registry initialized at {DATABASE_PATH}")
    logger.info(f"   Tables: {list(Base.metadata.tables.keys())}")


@contextmanager
def get_db():
    """
    Context manager for registry sessions

    Usage:
        with get_db() as db:
            run = db.query(Run).first()
    """
    if SessionLocal is None:
        init_database()
    session = SessionLocal()
    try:
        yield session
        session.commit()
    except Exception as e:
        session.rollback()
        logger.error(f"Database error: {e}")
        raise
    finally:
        session.close()


# ============================================================================
# RUN OPERATIONS
# ============================================================================

def create_run(run_data: dict) -> Run:
    with get_db() as db:
        run = Run(**run_data)
        db.add(run)
        db.commit()
        db.refresh(run)
        db.expunge(run)
        logger.info(f"✅ Registered run {run.id} ({run.command})")
        return run


def update_run(run_id: int, updates: dict) -> Optional[Run]:
    with get_db() as db:
        run = db.get(Run, run_id)
        if run is None:
            return None
        for key, value in updates.items():
            setattr(run, key, value)
        db.commit()
        db.refresh(run)
        db.expunge(run)
        return run


def get_run(run_id: int) -> Optional[Run]:
    with get_db() as db:
        run = db.get(Run, run_id)
        if run:
            db.expunge(run)
        return run


def get_all_runs(command: Optional[str] = None, status: Optional[str] = None) -> List[Run]:
    """All runs, newest first, optionally filtered"""
    with get_db() as db:
        query = db.query(Run)
        if command:
            query = query.filter_by(command=command)
        if status:
            query = query.filter_by(status=status)
        runs = query.order_by(Run.id.desc()).all()
        for run in runs:
            db.expunge(run)
        return runs


# ============================================================================
# EVAL RESULT OPERATIONS
# ============================================================================

def record_eval(run_id: int, report, split: str = 'val', label: str = '') -> EvalResult:
    """Store an EvalReport's headline numbers plus the full JSON"""
    with get_db() as db:
        result = EvalResult(
            run_id=run_id,
            split=split,
            label=label,
            r1_05=report.recall.get('R1@0.5'),
            r1_07=report.recall.get('R1@0.7'),
            miou=report.mIoU,
            map_avg=report.mAP_avg,
            report=report.model_dump(mode='json', exclude={'per_query'}),
        )
        db.add(result)
        db.commit()
        db.refresh(result)
        db.expunge(result)
        return result


def get_eval_results(run_id: int) -> List[EvalResult]:
    with get_db() as db:
        results = db.query(EvalResult).filter_by(run_id=run_id).order_by(EvalResult.id).all()
        for result in results:
            db.expunge(result)
        return results


# ============================================================================
# STATISTICS
# ============================================================================

def get_registry_stats() -> dict:
    with get_db() as db:
        best = db.query(EvalResult).order_by(EvalResult.map_avg.desc()).first()
        return {
            'total_runs': db.query(Run).count(),
            'completed': db.query(Run).filter_by(status='completed').count(),
            'failed': db.query(Run).filter_by(status='failed').count(),
            'aborted_nan': db.query(Run).filter_by(status='aborted_nan').count(),
            'evaluations': db.query(EvalResult).count(),
            'best_map_avg': best.map_avg if best else None,
        }
