import os
from dotenv import load_dotenv

load_dotenv()

class Settings:
    # Results database. Postgres deployments use postgresql+asyncpg://...
    DATABASE_URL = os.getenv("DATABASE_URL", "sqlite+aiosqlite:///./wildfire.db")

    LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()

    # Experiment Runner
    RESULTS_DIR = os.getenv("RESULTS_DIR", "results")
    DEFAULT_WORKERS = int(os.getenv("DEFAULT_WORKERS", "1"))
    DEFAULT_SEED = int(os.getenv("DEFAULT_SEED", "0"))

settings = Settings()
