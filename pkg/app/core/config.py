from pathlib import Path

from pydantic_settings import BaseSettings, SettingsConfigDict


TOOL_NAME = "parkloop"
TOOL_VERSION = "0.1.0"


class Settings(BaseSettings):
    OUTPUT_DIR: Path = Path("out")
    LOG_LEVEL: str = "INFO"

    # 0 means one worker process per CPU; results never depend on this value
    WORKERS: int = 1
    CHUNK_RUNS: int = 50

    ORACLE_TOLERANCE: float = 1e-10
    ORACLE_MAX_ITER: int = 500

    RENDER_SVG: bool = True

    model_config = SettingsConfigDict(env_file=".env", extra="ignore")


settings = Settings()
