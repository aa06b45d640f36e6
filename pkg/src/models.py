"""
Run registry models

Tables:
- runs: one row per CLI command that trains, evaluates, ablates or probes
- eval_results: headline metrics of every evaluation, linked to its run
"""

from datetime import datetime

from sqlalchemy import JSON, Column, DateTime, Float, ForeignKey, Integer, String, Text
from sqlalchemy.orm import declarative_base, relationship

Base = declarative_base()


class Run(Base):
    """
    One invocation of a run-producing command

    The reproducibility key is (config_hash, dataset_hash, seed).
    """
    __tablename__ = 'runs'

    id = Column(Integer, primary_key=True)
    command = Column(String(20), nullable=False, index=True)  # train, eval, ablate, probe
    config_hash = Column(String(64), index=True)
    dataset_hash = Column(String(64))
    seed = Column(Integer)
    output_dir = Column(Text)

    status = Column(String(20), default='running', index=True)
    # Status values: running, completed, failed, aborted_nan
    steps = Column(Integer, default=0)
    final_loss = Column(Float)
    error_message = Column(Text)

    created_at = Column(DateTime, default=datetime.utcnow)
    updated_at = Column(DateTime, default=datetime.utcnow, onupdate=datetime.utcnow)

    eval_results = relationship('EvalResult', back_populates='run', cascade='all, delete-orphan')

    def __repr__(self):
        return f"<Run(id={self.id}, command='{self.command}', status='{self.status}')>"

    def to_dict(self):
        return {
            'id': self.id,
            'command': self.command,
            'config_hash': self.config_hash,
            'dataset_hash': self.dataset_hash,
            'seed': self.seed,
            'output_dir': self.output_dir,
            'status': self.status,
            'steps': self.steps,
            'final_loss': self.final_loss,
            'created_at': self.created_at.isoformat() if self.created_at else None,
        }


class EvalResult(Base):
    """Headline metrics of one evaluation; the full report is kept as JSON"""
    __tablename__ = 'eval_results'

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey('runs.id'), nullable=False)
    split = Column(String(20))
    label = Column(String(64))  # ablation row name, empty for plain evals

    r1_05 = Column(Float)
    r1_07 = Column(Float)
    miou = Column(Float)
    map_avg = Column(Float)
    report = Column(JSON)

    created_at = Column(DateTime, default=datetime.utcnow)

    run = relationship('Run', back_populates='eval_results')

    def __repr__(self):
        return f"<EvalResult(run_id={self.run_id}, split='{self.split}', mAP_avg={self.map_avg})>"

    def to_dict(self):
        return {
            'id': self.id,
            'run_id': self.run_id,
            'split': self.split,
            'label': self.label,
            'R1@0.5': self.r1_05,
            'R1@0.7': self.r1_07,
            'mIoU': self.miou,
            'mAP_avg': self.map_avg,
        }
