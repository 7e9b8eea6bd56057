"""
Configuration settings for the IES token economy simulator
"""
from pathlib import Path
from typing import Dict, List

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict
from dotenv import load_dotenv

# Load environment variables
load_dotenv()


class Settings(BaseSettings):
    """Application settings"""

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    # Application settings
    log_level: str = Field("INFO")
    log_file: str = Field("logs/simulator.log")
    default_out_dir: str = Field("out")
    default_export_format: str = Field("csv")


# CLI exit codes (stable contract, documented in docs/usage.md)
EXIT_CODES: Dict[str, int] = {
    "ok": 0,
    "invalid": 1,
    "unreadable": 2,
    "solver": 3,
    "out_dir": 4,
}

# Per-actor time series, one row per step per actor
TIMESERIES_HEADER: List[str] = [
    "step",
    "period",
    "actor",
    "balance",
    "f_carbon",
    "f_congestion",
    "clean_fraction",
]

SUMMARY_FORMAT = (
    "tokens_issued={issued} tokens_levied={levied} congestion_events={congestion} "
    "curtailed_mwh={curtailed:.6f} blocks={blocks} head={head}"
)

# Output file names written by `run`
REPORT_FILE = "report.json"
TIMESERIES_FILE = "timeseries.csv"
CHAIN_FILE = "chain.log"

# Defaults applied when a scenario omits the congestion token rule
DEFAULT_CONGESTION_RULE = {
    "theta": 1.0,
    "xi": 10.0,
    "f1": 0.1,
    "f2": 1.0,
    "n_max": 20,
}


def get_settings() -> Settings:
    """Get application settings"""
    return Settings()


def ensure_log_directory():
    """Ensure log directory exists"""
    settings = get_settings()
    log_path = Path(settings.log_file)
    log_path.parent.mkdir(parents=True, exist_ok=True)
