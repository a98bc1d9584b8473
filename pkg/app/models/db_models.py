from sqlalchemy import Column, Integer, String, Text, Float, DateTime, ForeignKey, func, Index
from sqlalchemy.orm import relationship
from app.core.database import Base

# ------------------------------------------------------------------------------
# Database Models
# ------------------------------------------------------------------------------
# Experiments launched through the API are persisted here so their results can
# be queried after the background run finishes. The CSV files written by the
# CLI carry the same episode columns.
# ------------------------------------------------------------------------------

class ExperimentRun(Base):
    """
    One submitted experiment.

    status moves pending -> running -> done | failed; `config` is the
    validated ExperimentConfig as JSON so a run can be replayed exactly.
    """
    __tablename__ = "experiment_runs"

    id = Column(String, primary_key=True, index=True)
    created_at = Column(DateTime(timezone=True), server_default=func.now())
    status = Column(String, nullable=False, default="pending")
    config = Column(Text, nullable=False)
    error = Column(Text, nullable=True)

    episodes = relationship("EpisodeRecord", back_populates="run", cascade="all, delete-orphan")

class EpisodeRecord(Base):
    """One played episode (policy x scenario x q x grid size)."""
    __tablename__ = "episodes"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(String, ForeignKey("experiment_runs.id"), nullable=False)

    # position in the run's deterministic episode order
    episode = Column(Integer, nullable=False)
    grid_size = Column(Integer, nullable=False)
    q = Column(Float, nullable=False)
    policy = Column(String, nullable=False)
    init_state = Column(Integer, nullable=False)
    scenario = Column(Integer, nullable=False)
    seed = Column(String, nullable=False)
    neg_utility = Column(Float, nullable=False)
    steps = Column(Integer, nullable=False)
    wall_ms = Column(Float, nullable=False)

    run = relationship("ExperimentRun", back_populates="episodes")

    # The aggregate query groups a run's episodes by (grid_size, q, policy).
    __table_args__ = (
        Index('idx_episodes_run_group', 'run_id', 'grid_size', 'q', 'policy'),
    )
