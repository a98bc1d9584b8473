from sqlalchemy.ext.asyncio import AsyncSession
from sqlalchemy import select, update, func
from app.models.db_models import ExperimentRun, EpisodeRecord
from app.services.harness import ExperimentConfig, run_experiment
from app.core.config import settings
from pathlib import Path
import asyncio
import logging
import uuid

# Configure Logger
logger = logging.getLogger(__name__)

async def create_run(db: AsyncSession, cfg: ExperimentConfig) -> ExperimentRun:
    """Register a pending run and return it."""
    run = ExperimentRun(id=str(uuid.uuid4()), status="pending", config=cfg.model_dump_json())
    db.add(run)
    await db.commit()
    logger.info(f"Created experiment run {run.id}")
    return run

async def mark_run(db: AsyncSession, run_id: str, status: str, error: str | None = None):
    await db.execute(update(ExperimentRun).where(ExperimentRun.id == run_id).values(status=status, error=error))
    await db.commit()

async def save_episodes(db: AsyncSession, run_id: str, episodes) -> int:
    """Bulk insert the episode table produced by run_experiment."""
    records = [
        EpisodeRecord(
            run_id=run_id,
            episode=i,
            grid_size=int(row.grid_size),
            q=float(row.q),
            policy=row.policy,
            init_state=int(row.init_state),
            scenario=int(row.scenario),
            # 64-bit seeds overflow SQL integers on some backends
            seed=str(row.seed),
            neg_utility=float(row.neg_utility),
            steps=int(row.steps),
            wall_ms=float(row.wall_ms),
        )
        for i, row in enumerate(episodes.itertuples(index=False))
    ]
    db.add_all(records)
    await db.commit()
    return len(records)

async def get_run(db: AsyncSession, run_id: str) -> ExperimentRun | None:
    result = await db.execute(select(ExperimentRun).where(ExperimentRun.id == run_id))
    return result.scalar_one_or_none()

async def load_aggregate(db: AsyncSession, run_id: str) -> list[dict]:
    """Mean negative utility and steps per (grid_size, q, policy), in episode order."""
    stmt = (
        select(
            EpisodeRecord.grid_size,
            EpisodeRecord.q,
            EpisodeRecord.policy,
            func.avg(EpisodeRecord.neg_utility).label("mean_neg_utility"),
            func.avg(EpisodeRecord.steps).label("mean_steps"),
            func.count(EpisodeRecord.id).label("episodes"),
        )
        .where(EpisodeRecord.run_id == run_id)
        .group_by(EpisodeRecord.grid_size, EpisodeRecord.q, EpisodeRecord.policy)
        .order_by(func.min(EpisodeRecord.episode))
    )
    result = await db.execute(stmt)
    return [dict(row._mapping) for row in result]

async def execute_run(run_id: str, cfg: ExperimentConfig):
    """
    Background task: run the experiment off the event loop, then persist it.

    Failures are recorded on the run row instead of propagating, since nothing
    awaits a background task.
    """
    from app.core.database import SessionLocal
    out_dir = Path(settings.RESULTS_DIR) / run_id
    async with SessionLocal() as session:
        try:
            await mark_run(session, run_id, "running")
            loop = asyncio.get_running_loop()
            results = await loop.run_in_executor(
                None, lambda: run_experiment(cfg, out_dir, workers=settings.DEFAULT_WORKERS, echo=False)
            )
            count = await save_episodes(session, run_id, results.episodes)
            await mark_run(session, run_id, "done")
            logger.info(f"Experiment run {run_id} finished with {count} episodes")
        except Exception as e:
            logger.error(f"Experiment run {run_id} failed: {e}")
            await session.rollback()
            await mark_run(session, run_id, "failed", error=str(e))
