from fastapi import APIRouter, UploadFile, File, Form, Depends, HTTPException, BackgroundTasks
from fastapi.concurrency import run_in_threadpool
from sqlalchemy.ext.asyncio import AsyncSession
from pathlib import Path
import numpy as np
import tempfile
import logging
from app.core.database import get_db
from app.core.exceptions import WildfireError
from app.api.schemas import (
    SimulateRequest, EpisodeResponse, PlanRequest, PlanResponse, RootActionStats,
    ZonalResponse, ZoneStatsResponse, ExperimentCreateResponse, ExperimentStatus,
)
from app.services.belief import initial_belief
from app.services.dynamics import DynamicsParams, SpreadParams
from app.services.geo_io import read_ascii_grid, read_polygons_csv
from app.services.grid import GridState, UtilityMap
from app.services.harness import ExperimentConfig, play_episode
from app.services.planner import plan_with_stats
from app.services.sensing import SensingParams
from app.services.zonal import build_intersections, zonal_stats
from app.services import experiment_store

# Configure logger
logger = logging.getLogger(__name__)

router = APIRouter()

# ------------------------------------------------------------------------------
# Service calls
# ------------------------------------------------------------------------------
# Simulation and planning are CPU bound; they run in the threadpool so the event
# loop keeps serving requests. Bad input surfaces as 400, anything else as 500.
# ------------------------------------------------------------------------------

def run_simulation(request: SimulateRequest):
    cfg = ExperimentConfig(grid_size=request.grid_size, planner=request.planner, seed=request.seed)
    if request.horizon is not None:
        cfg = cfg.model_copy(update={"horizon": request.horizon})
    return play_episode(cfg, request.policy, request.q, request.scenario)

def run_planner(request: PlanRequest):
    state = GridState(request.rows, request.cols, request.fire, request.fuel, request.classes)
    dyn = DynamicsParams(
        q=request.q,
        spread=SpreadParams(request.wind_direction, request.wind_strength, request.base_rate),
    )
    belief = initial_belief(state, request.planner.n_particles)
    rng = np.random.default_rng(request.seed)
    return plan_with_stats(belief, request.planner, dyn, SensingParams(), UtilityMap(), rng)

def run_zonal(raster_bytes: bytes, polygon_bytes: bytes, layer: str, workers: int):
    with tempfile.TemporaryDirectory() as tmp:
        raster_path = Path(tmp) / "raster.asc"
        polygon_path = Path(tmp) / "polygons.csv"
        raster_path.write_bytes(raster_bytes)
        polygon_path.write_bytes(polygon_bytes)
        raster = read_ascii_grid(raster_path)
        polys = read_polygons_csv(polygon_path)
    ix = build_intersections(polys, raster.metadata)
    return zonal_stats(ix, raster, layer=layer, workers=workers)

async def _call(func, *args, what: str):
    try:
        return await run_in_threadpool(func, *args)
    except (WildfireError, ValueError) as e:
        logger.warning(f"Rejected {what} request: {e}")
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        logger.error(f"Error in {what}: {e}")
        raise HTTPException(status_code=500, detail=f"Internal Server Error during {what}.")

def _number(value):
    return None if value is None else float(value)

# ------------------------------------------------------------------------------
# API Routes
# ------------------------------------------------------------------------------

@router.post("/simulate", response_model=EpisodeResponse)
async def simulate_endpoint(request: SimulateRequest):
    """
    Play one episode of the suppression game.

    Args:
        request (SimulateRequest): Grid size, policy, suppression success q,
            master seed and scenario index.

    Returns:
        EpisodeResponse: Accumulated negative utility and episode length.
    """
    logger.info(f"Simulate request: {request.policy} on {request.grid_size}x{request.grid_size}, q={request.q}")
    result = await _call(run_simulation, request, what="simulation")
    return EpisodeResponse(**result.as_row())

@router.post("/plan", response_model=PlanResponse)
async def plan_endpoint(request: PlanRequest):
    """
    Choose the next suppression action for a fully known fire map.

    Returns:
        PlanResponse: Targeted cells plus visit counts and values of every
        root action the search expanded.
    """
    logger.info(f"Plan request for a {request.rows}x{request.cols} grid")
    action, stats = await _call(run_planner, request, what="planning")
    return PlanResponse(
        targets=action.sorted_targets(),
        root_actions=[RootActionStats(targets=a.sorted_targets(), visits=n, value=v) for a, n, v in stats],
    )

@router.post("/zonal", response_model=ZonalResponse)
async def zonal_endpoint(
    raster: UploadFile = File(...),
    polygons: UploadFile = File(...),
    layer: str = Form("layer"),
    workers: int = Form(1),
):
    """
    Zonal statistics of an uploaded ASCII grid over uploaded polygons.

    Args:
        raster (UploadFile): ASCII grid raster.
        polygons (UploadFile): CSV with columns id,wkt.
        layer (str): Name reported for the raster layer.
        workers (int): Row-block threads for the aggregation.
    """
    logger.info(f"Zonal request: raster {raster.filename}, polygons {polygons.filename}")
    if workers < 1:
        raise HTTPException(status_code=400, detail="workers must be at least 1")
    raster_bytes = await raster.read()
    polygon_bytes = await polygons.read()
    result = await _call(run_zonal, raster_bytes, polygon_bytes, layer, workers, what="zonal statistics")
    zones = [
        ZoneStatsResponse(
            id=str(pid),
            min=_number(z.min),
            max=_number(z.max),
            median=_number(z.median),
            sum=_number(z.sum),
            mode=_number(z.mode),
            count=int(z.count),
        )
        for pid, z in result.stats.items()
    ]
    return ZonalResponse(layer=result.layer, zones=zones)

@router.post("/experiments", response_model=ExperimentCreateResponse, status_code=202)
async def create_experiment_endpoint(
    cfg: ExperimentConfig,
    background_tasks: BackgroundTasks,
    db: AsyncSession = Depends(get_db)
):
    """
    Queue a policy comparison experiment. The run executes after the response
    is sent; poll GET /experiments/{run_id} for its status and aggregate.
    """
    try:
        run = await experiment_store.create_run(db, cfg)
    except Exception as e:
        logger.error(f"Error in create_experiment_endpoint: {e}")
        raise HTTPException(status_code=500, detail="Internal Server Error while registering the experiment.")
    background_tasks.add_task(experiment_store.execute_run, run.id, cfg)
    return ExperimentCreateResponse(run_id=run.id, status=run.status)

@router.get("/experiments/{run_id}", response_model=ExperimentStatus)
async def get_experiment_endpoint(run_id: str, db: AsyncSession = Depends(get_db)):
    run = await experiment_store.get_run(db, run_id)
    if run is None:
        raise HTTPException(status_code=404, detail=f"Experiment run {run_id} not found.")
    aggregate = await experiment_store.load_aggregate(db, run_id) if run.status == "done" else []
    return ExperimentStatus(
        run_id=run.id,
        status=run.status,
        error=run.error,
        config=ExperimentConfig.model_validate_json(run.config),
        aggregate=aggregate,
    )
