from pydantic import BaseModel, Field
from typing import Literal, Optional
from app.services.harness import ExperimentConfig
from app.services.planner import PlannerConfig

class SimulateRequest(BaseModel):
    grid_size: int = Field(4, ge=2)
    policy: Literal["baseline", "uafr"] = "baseline"
    q: float = Field(1.0, ge=0, le=1)
    seed: int = Field(0, ge=0)
    scenario: int = Field(0, ge=0)
    horizon: Optional[int] = Field(None, ge=0)
    planner: PlannerConfig = PlannerConfig()

class EpisodeResponse(BaseModel):
    grid_size: int
    q: float
    policy: str
    init_state: int
    scenario: int
    seed: int
    neg_utility: float
    steps: int
    wall_ms: float

class PlanRequest(BaseModel):
    rows: int = Field(..., ge=1)
    cols: int = Field(..., ge=1)
    fire: list[int] = Field(..., description="Row-major 0/1 fire map")
    fuel: list[int]
    classes: list[int] = Field(..., description="0 = Red, 1 = Yellow, 2 = Green")
    wind_direction: float = 0.0
    wind_strength: float = Field(0.0, ge=0, le=1)
    base_rate: float = Field(0.2, ge=0, le=1)
    q: float = Field(1.0, ge=0, le=1)
    seed: int = Field(0, ge=0)
    planner: PlannerConfig = PlannerConfig()

class RootActionStats(BaseModel):
    targets: list[int]
    visits: int
    value: float

class PlanResponse(BaseModel):
    targets: list[int]
    root_actions: list[RootActionStats]

class ZoneStatsResponse(BaseModel):
    id: str
    min: Optional[float] = None
    max: Optional[float] = None
    median: Optional[float] = None
    sum: Optional[float] = None
    mode: Optional[float] = None
    count: int

class ZonalResponse(BaseModel):
    layer: str
    zones: list[ZoneStatsResponse]

class ExperimentCreateResponse(BaseModel):
    run_id: str
    status: str

class AggregateRow(BaseModel):
    grid_size: int
    q: float
    policy: str
    mean_neg_utility: float
    mean_steps: float
    episodes: int

class ExperimentStatus(BaseModel):
    run_id: str
    status: str
    error: Optional[str] = None
    config: ExperimentConfig
    aggregate: list[AggregateRow] = []
